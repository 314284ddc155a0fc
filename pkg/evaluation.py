"""
Evaluation
Held-out view quality, exposed Gaussian count, encode wall-time and peak memory of a trained model
"""

import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from loguru import logger

from atomic_io import write_atomic
from errors import DatasetError
from geometry import canonicalize
from param_store import ParamStore
from quality_metrics import psnr, ssim
from renderer import render
from run_config import RunConfig
from trainer import decode_scene, evenly_spaced, final_point


@dataclass
class EvalReport:
    views: pd.DataFrame  # one row per held-out view: view, psnr, ssim
    num_gaussians: int
    encode_seconds: float
    peak_memory_mb: float
    gaussians_by_context: Dict[int, int] = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(self.views["psnr"].replace(np.inf, np.nan).mean()) if len(self.views) else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(self.views["ssim"].mean()) if len(self.views) else float("nan")

    @property
    def count_invariant(self) -> bool:
        return len(set(self.gaussians_by_context.values())) <= 1

    def summary(self) -> pd.DataFrame:
        rows = [
            ("mean PSNR (dB)", self.mean_psnr),
            ("mean SSIM", self.mean_ssim),
            ("#G", self.num_gaussians),
            ("encode time (ms)", 1000.0 * self.encode_seconds),
            ("peak memory (MB)", self.peak_memory_mb),
        ]
        rows += [(f"#G with {k} context views", g) for k, g in sorted(self.gaussians_by_context.items())]
        return pd.DataFrame(rows, columns=["metric", "value"]).set_index("metric")


def time_encode(store: ParamStore, config: RunConfig, views, repeats: int = 3) -> float:
    """
    Median wall-time of encode + decode over `repeats` runs, the first run discarded as warm-up

    Returns:
        seconds
    """
    norm = canonicalize(views)
    point = final_point(config)
    samples = []
    for _ in range(repeats + 1):
        store.begin_step()
        started = time.perf_counter()
        decode_scene(norm, store, config, point)
        samples.append(time.perf_counter() - started)
    store.begin_step()
    return float(np.median(samples[1:]))


def peak_memory(store: ParamStore, config: RunConfig, views) -> float:
    """Peak traced allocation in MB while reconstructing once"""
    tracemalloc.start()
    try:
        store.begin_step()
        decode_scene(canonicalize(views), store, config, final_point(config))
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
        store.begin_step()
    return peak / (1024.0 * 1024.0)


def gaussian_counts(store: ParamStore, config: RunConfig, dataset, context_counts: Sequence[int]) -> Dict[int, int]:
    """Exposed Gaussian count when reconstructing from each number of context views"""
    counts = {}
    for k in context_counts:
        frames = evenly_spaced(len(dataset), k)
        views = [dataset.view(i) for i in frames]
        # fewer distinct frames than requested: repeat the sequence so k views still go in
        while len(views) < k:
            views += views[: k - len(views)]
        store.begin_step()
        counts[k] = decode_scene(canonicalize(views), store, config, final_point(config)).count
    store.begin_step()
    return counts


def evaluate(
    store: ParamStore,
    config: RunConfig,
    dataset,
    context_views: Optional[int] = None,
    context_counts: Sequence[int] = (),
    repeats: int = 3,
) -> EvalReport:
    """
    Score a model on the held-out views of a sequence

    Args:
        store: trained parameters
        config: run configuration of the checkpoint
        dataset: SyntheticScene or PosedDirectory with held-out views
        context_views: number of evenly spaced context frames, defaults to training.context_views
        context_counts: extra context sizes for the Gaussian-count check (e.g. 12, 24, 36)
        repeats: timed encode runs after the discarded warm-up

    Returns:
        EvalReport
    """
    held_out = dataset.held_out_views()
    if not held_out:
        raise DatasetError("Dataset has no held-out views to evaluate on")
    k = context_views or config.training.context_views
    context = [dataset.view(i) for i in evenly_spaced(len(dataset), k)]

    store.begin_step()
    norm = canonicalize(context)
    scene = decode_scene(norm, store, config, final_point(config)).detached()
    store.begin_step()

    settings = config.renderer.to_settings()
    background = np.asarray(config.renderer.background, dtype=np.float64)
    rows = []
    for j, view in enumerate(held_out):
        cam = norm.canonical_view(view)
        image = render(scene, cam.pose, cam.intrinsics, background, settings).color.data
        rows.append({"view": j, "psnr": psnr(image, view.image), "ssim": ssim(image, view.image)})

    report = EvalReport(
        views=pd.DataFrame(rows).set_index("view"),
        num_gaussians=scene.count,
        encode_seconds=time_encode(store, config, context, repeats),
        peak_memory_mb=peak_memory(store, config, context),
        gaussians_by_context=gaussian_counts(store, config, dataset, context_counts) if context_counts else {},
    )
    logger.info(
        f"Evaluated {len(held_out)} held-out views: PSNR {report.mean_psnr:.2f} dB, SSIM {report.mean_ssim:.4f}, "
        f"#G {report.num_gaussians}, encode {1000 * report.encode_seconds:.1f} ms"
    )
    if not report.count_invariant:
        logger.warning(f"Gaussian count changed with the context size: {report.gaussians_by_context}")
    return report


def write_report(report: EvalReport, path: Union[str, Path]) -> Path:
    """Per-view table as CSV, summary next to it as <stem>_summary.csv"""
    path = Path(path)
    write_atomic(path, report.views.to_csv())
    write_atomic(path.with_name(path.stem + "_summary.csv"), report.summary().to_csv())
    return path
