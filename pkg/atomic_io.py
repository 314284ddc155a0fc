"""
Atomic File Writes
Readers never observe a half-written file
"""

import os
from pathlib import Path
from typing import Union


def write_atomic(path: Union[str, Path], data: Union[bytes, str]) -> Path:
    """
    Write `data` to a sibling temp file, fsync it, then rename it over `path`

    On any failure the temp file is removed and the previous contents of `path` survive.

    Args:
        path: destination
        data: bytes, or text encoded as UTF-8

    Returns:
        the destination path
    """
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return path
