"""
Metrics Log
Line-delimited JSON metric records written during training, read back as pandas tables
"""

import json
import math
from pathlib import Path
from typing import Dict, Optional, Union

import pandas as pd
from loguru import logger

from errors import DatasetError, TrainingError


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None if math.isnan(value) else ("inf" if value > 0 else "-inf")
    return value


class MetricsLog:
    """Appends one record per training step, flushed so a crash never loses ordered history"""

    def __init__(self, path: Union[str, Path], append: bool = False):
        """
        Initialize MetricsLog

        Args:
            path: JSONL file
            append: keep existing records (resumed runs)
        """
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a" if append else "w", encoding="utf-8")
        self.last_step = -1

    def write(self, step: int, record: Dict):
        if step <= self.last_step:
            raise TrainingError(f"Metric records must be in step order ({step} after {self.last_step})")
        row = {"step": int(step)}
        row.update({k: _jsonable(v) for k, v in record.items()})
        self._fh.write(json.dumps(row) + "\n")
        self._fh.flush()
        self.last_step = step

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def load_metrics(path: Union[str, Path]) -> pd.DataFrame:
    """All records as a DataFrame indexed by step"""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Metrics log not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: malformed record ({exc.msg})") from exc
    frame = pd.DataFrame(rows)
    if frame.empty:
        return frame
    if "psnr" in frame:
        frame["psnr"] = pd.to_numeric(frame["psnr"].replace({"inf": math.inf}), errors="coerce")
    return frame.set_index("step").sort_index()


def summarize(frame: pd.DataFrame, window: int = 10) -> Dict[str, Optional[float]]:
    """
    Headline numbers of a run

    Args:
        frame: output of load_metrics
        window: number of steps averaged at each end

    Returns:
        dict with early_loss (mean of the first `window` steps), final_loss (mean of the last
        `window`), loss_ratio, best_psnr and first_psnr (None without evaluations)
    """
    if frame.empty or "total" not in frame:
        return {"early_loss": None, "final_loss": None, "loss_ratio": None, "best_psnr": None, "first_psnr": None}
    total = frame["total"].astype(float)
    early = float(total.iloc[:window].mean())
    final = float(total.iloc[-window:].mean())
    psnr = frame["psnr"].dropna() if "psnr" in frame else pd.Series(dtype=float)
    summary = {
        "early_loss": early,
        "final_loss": final,
        "loss_ratio": final / early if early > 0 else None,
        "best_psnr": float(psnr.max()) if len(psnr) else None,
        "first_psnr": float(psnr.iloc[0]) if len(psnr) else None,
    }
    logger.debug(f"Run summary: {summary}")
    return summary
