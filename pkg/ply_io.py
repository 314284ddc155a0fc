"""
Splat Asset I/O
Binary little-endian PLY in the layout common splat viewers expect: 59 float32 properties
per Gaussian (position, unused normal, SH DC, SH rest channel-major, opacity logit,
log-scales, w-first unit quaternion).
"""

import io
from pathlib import Path
from typing import List, Union

import numpy as np
from plyfile import PlyData, PlyElement

import diffcore as dc
from atomic_io import write_atomic
from decoder import SH_COEFFS, GaussianScene, quaternion_to_rotation_matrix, rotation_matrix_to_quaternion
from errors import PlyFormatError

NUM_REST = 3 * (SH_COEFFS - 1)


def property_names() -> List[str]:
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(NUM_REST)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


PROPERTIES = property_names()
VERTEX_DTYPE = np.dtype([(name, "<f4") for name in PROPERTIES])


def _vertex_array(scene: GaussianScene) -> np.ndarray:
    n = scene.count
    sh = scene.sh.data.reshape(n, 3, SH_COEFFS)
    quats = rotation_matrix_to_quaternion(scene.rotations.data) if n else np.zeros((0, 4))
    columns = {
        "x": scene.means.data[:, 0],
        "y": scene.means.data[:, 1],
        "z": scene.means.data[:, 2],
        "nx": np.zeros(n),
        "ny": np.zeros(n),
        "nz": np.zeros(n),
        "opacity": scene.opacity_logits.data.reshape(n),
    }
    for ch in range(3):
        columns[f"f_dc_{ch}"] = sh[:, ch, 0]
        for k in range(1, SH_COEFFS):
            columns[f"f_rest_{ch * (SH_COEFFS - 1) + k - 1}"] = sh[:, ch, k]
    for axis in range(3):
        columns[f"scale_{axis}"] = scene.log_scales.data[:, axis]
    for i in range(4):
        columns[f"rot_{i}"] = quats[:, i]

    vertices = np.empty(n, dtype=VERTEX_DTYPE)
    for name in PROPERTIES:
        vertices[name] = columns[name]
    return vertices


def ply_bytes(scene: GaussianScene) -> bytes:
    """Encode a scene as a binary PLY file image"""
    element = PlyElement.describe(_vertex_array(scene), "vertex")
    buffer = io.BytesIO()
    PlyData([element], text=False, byte_order="<").write(buffer)
    return buffer.getvalue()


def write_ply(scene: GaussianScene, path: Union[str, Path]) -> int:
    """
    Write the asset atomically

    Returns:
        size in bytes
    """
    data = ply_bytes(scene)
    write_atomic(path, data)
    return len(data)


def _decode(ply: PlyData, source: str) -> GaussianScene:
    if "vertex" not in ply:
        raise PlyFormatError(f"{source}: no vertex element")
    vertex = ply["vertex"]
    names = [prop.name for prop in vertex.properties]
    if names != PROPERTIES:
        raise PlyFormatError(f"{source}: unexpected property layout (got {len(names)} properties starting {names[:4]})")
    if any(prop.val_dtype not in ("f4", "float32", "float") for prop in vertex.properties):
        raise PlyFormatError(f"{source}: all vertex properties must be float32")

    data = vertex.data
    n = len(data)
    col = lambda name: np.asarray(data[name], dtype=np.float64)

    means = np.column_stack([col("x"), col("y"), col("z")]) if n else np.zeros((0, 3))
    sh = np.zeros((n, 3, SH_COEFFS))
    for ch in range(3):
        sh[:, ch, 0] = col(f"f_dc_{ch}")
        for k in range(1, SH_COEFFS):
            sh[:, ch, k] = col(f"f_rest_{ch * (SH_COEFFS - 1) + k - 1}")
    log_scales = np.column_stack([col(f"scale_{i}") for i in range(3)]) if n else np.zeros((0, 3))
    quats = np.column_stack([col(f"rot_{i}") for i in range(4)]) if n else np.zeros((0, 4))
    if n and np.any(np.linalg.norm(quats, axis=1) < 1e-12):
        raise PlyFormatError(f"{source}: zero-length rotation quaternion")
    rotations = quaternion_to_rotation_matrix(quats) if n else np.zeros((0, 3, 3))
    logits = col("opacity").reshape(n, 1)

    rot6d = np.concatenate([rotations[:, :, 0], rotations[:, :, 1]], axis=1)
    return GaussianScene(
        means=dc.constant(means),
        log_scales=dc.constant(log_scales),
        rot6d=dc.constant(rot6d),
        # log(1 - sigmoid(o)) = -softplus(o)
        log_transmittance=dc.constant(-np.logaddexp(0.0, logits)),
        sh=dc.constant(sh),
    )


def read_ply_bytes(data: bytes, source: str = "<bytes>") -> GaussianScene:
    try:
        ply = PlyData.read(io.BytesIO(data))
    except Exception as exc:  # plyfile raises several exception types for malformed input
        raise PlyFormatError(f"{source}: {exc}") from exc
    return _decode(ply, source)


def read_ply(path: Union[str, Path]) -> GaussianScene:
    path = Path(path)
    if not path.exists():
        raise PlyFormatError(f"PLY file not found: {path}")
    return read_ply_bytes(path.read_bytes(), str(path))
