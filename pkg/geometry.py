"""
Geometry Module
Camera pose algebra, scene canonicalization and the ray/context geometry feeding the encoder.

Conventions:
    - CameraPose.rotation is world-from-camera; its columns are the camera x (right),
      y (down) and z (look direction) axes expressed in world coordinates.
    - Pixel (u, v) is sampled at its center (u + 0.5, v + 0.5).
    - Patch ordering: patches row-major over the image, pixels row-major inside a patch,
      channels fastest. Everything downstream relies on this order.
"""

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

import diffcore as dc
from errors import GeometryError, ShapeError
from param_store import truncated_normal

ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class CameraPose:
    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "center", center)
        if not np.allclose(rotation @ rotation.T, np.eye(3), atol=ORTHO_TOL, rtol=0.0):
            raise GeometryError("Pose rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHO_TOL:
            raise GeometryError(f"Pose rotation has det {np.linalg.det(rotation):.12f}, expected +1")

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Row-vector points (..., 3) into this camera's frame"""
        return (np.asarray(points) - self.center) @ self.rotation


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"Focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError(
                f"Principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, sx: float, sy: float) -> "Intrinsics":
        """Intrinsics after resizing the image by (sx, sy)"""
        width = int(round(self.width * sx))
        height = int(round(self.height * sy))
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


@dataclass(frozen=True, eq=False)
class CameraView:
    pose: CameraPose
    intrinsics: Intrinsics
    image: Optional[np.ndarray] = field(default=None, compare=False)
    frame_index: int = -1

    def __post_init__(self):
        if self.image is not None:
            image = np.asarray(self.image, dtype=np.float64)
            if image.shape != (self.intrinsics.height, self.intrinsics.width, 3):
                raise ShapeError(
                    "CameraView image",
                    image.shape,
                    (self.intrinsics.height, self.intrinsics.width, 3),
                )
            object.__setattr__(self, "image", image)


@dataclass(frozen=True, eq=False)
class NormalizedScene:
    views: List[CameraView]
    scale: float
    average_pose: CameraPose

    def to_canonical(self, pose: CameraPose) -> CameraPose:
        """Express any other camera in this scene's canonical frame"""
        return _relative_pose(self.average_pose, pose, self.scale)

    def canonical_view(self, view: CameraView) -> CameraView:
        return replace(view, pose=self.to_canonical(view.pose))

    def subset(self, indices: Sequence[int]) -> "NormalizedScene":
        """Same frame, fewer views"""
        return NormalizedScene([self.views[i] for i in indices], self.scale, self.average_pose)


@dataclass(frozen=True, eq=False)
class PluckerMap:
    directions: np.ndarray
    moments: np.ndarray

    def as_array(self) -> np.ndarray:
        """H x W x 6 with (d, m) per pixel"""
        return np.concatenate([self.directions, self.moments], axis=-1)


def _relative_pose(reference: CameraPose, pose: CameraPose, scale: float) -> CameraPose:
    rotation = reference.rotation.T @ pose.rotation
    center = reference.rotation.T @ (pose.center - reference.center) / scale
    return CameraPose(_reorthonormalize(rotation), center)


def _reorthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Snap a numerically drifted rotation back onto SO(3)"""
    u, _, vt = np.linalg.svd(rotation)
    fixed = u @ vt
    if np.linalg.det(fixed) < 0:
        u[:, -1] *= -1
        fixed = u @ vt
    return fixed


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> CameraPose:
    """
    Pose at `eye` looking at `target`

    Args:
        eye: camera center
        target: point on the optical axis
        up: world up; the camera y axis (image down) points away from it
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise GeometryError("look_at: eye and target coincide")
    forward = forward / norm
    down = -np.asarray(up, dtype=np.float64)
    down = down - np.dot(down, forward) * forward
    if np.linalg.norm(down) < 1e-9:
        raise GeometryError("look_at: up vector parallel to viewing direction")
    down = down / np.linalg.norm(down)
    right = np.cross(down, forward)
    return CameraPose(np.stack([right, down, forward], axis=1), eye)


def average_pose(poses: Sequence[CameraPose]) -> CameraPose:
    """
    Mean center plus re-orthonormalized mean of the look and y axes

    Args:
        poses: at least one pose

    Returns:
        The average camera frame T_avg
    """
    if not poses:
        raise GeometryError("average_pose needs at least one pose")
    center = np.mean([p.center for p in poses], axis=0)
    forward = np.mean([p.rotation[:, 2] for p in poses], axis=0)
    down = np.mean([p.rotation[:, 1] for p in poses], axis=0)

    f_norm = np.linalg.norm(forward)
    if f_norm < 1e-6:
        raise GeometryError("Averaged viewing direction is degenerate (near-zero norm)")
    forward = forward / f_norm
    down = down - np.dot(down, forward) * forward
    d_norm = np.linalg.norm(down)
    if d_norm < 1e-6:
        raise GeometryError("Averaged up axis is degenerate after orthogonalization")
    down = down / d_norm
    right = np.cross(down, forward)
    return CameraPose(np.stack([right, down, forward], axis=1), center)


def canonicalize(views: Sequence[CameraView]) -> NormalizedScene:
    """
    Express views in the average-camera frame and normalize the camera diameter to 1

    Args:
        views: one or more posed views

    Returns:
        NormalizedScene with the transformed views, the diameter s and T_avg
    """
    if not views:
        raise GeometryError("canonicalize needs at least one view")
    reference = average_pose([v.pose for v in views])

    aligned = [(reference.rotation.T @ (v.pose.center - reference.center)) for v in views]
    scale = 1.0
    if len(views) >= 2:
        pts = np.asarray(aligned)
        diffs = pts[:, None, :] - pts[None, :, :]
        scale = float(np.sqrt(np.max(np.sum(diffs * diffs, axis=-1))))
        if scale < 1e-12:
            raise GeometryError("All camera centers coincide; scene scale is zero")

    out = [replace(v, pose=_relative_pose(reference, v.pose, scale)) for v in views]
    return NormalizedScene(out, scale, reference)


def pixel_rays(pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    """Unit world-space ray directions, H x W x 3"""
    u = np.arange(intr.width, dtype=np.float64) + 0.5
    v = np.arange(intr.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v, indexing="xy")
    local = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1)
    world = local @ pose.rotation.T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def plucker_rays(pose: CameraPose, intr: Intrinsics) -> PluckerMap:
    """Per-pixel Plücker coordinates (d, o x d)"""
    directions = pixel_rays(pose, intr)
    moments = np.cross(np.broadcast_to(pose.center, directions.shape), directions)
    return PluckerMap(directions, moments)


def patchify(values: np.ndarray, patch_size: int) -> np.ndarray:
    """
    H x W x F map into (H/p * W/p) x (p*p*F) patch vectors

    Args:
        values: dense map (a 2-D map is treated as single-channel)
        patch_size: p, must divide H and W
    """
    values = np.asarray(values)
    if values.ndim == 2:
        values = values[..., None]
    h, w, f = values.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"patchify (patch size {p})", (h, w))
    grid = values.reshape(h // p, p, w // p, p, f).transpose(0, 2, 1, 3, 4)
    return grid.reshape((h // p) * (w // p), p * p * f)


def unpatchify(patches: np.ndarray, height: int, width: int, patch_size: int, channels: int) -> np.ndarray:
    """Inverse of patchify"""
    p = patch_size
    expected = ((height // p) * (width // p), p * p * channels)
    if height % p or width % p or patches.shape != expected:
        raise ShapeError("unpatchify", patches.shape, expected)
    grid = patches.reshape(height // p, width // p, p, p, channels).transpose(0, 2, 1, 3, 4)
    return grid.reshape(height, width, channels)


def fourier_encode(x: np.ndarray, num_frequencies: int = 6) -> np.ndarray:
    """
    sin/cos features at octave frequencies 2^k (radians), k = 0..L-1

    Layout per coordinate: L sines then L cosines, coordinates in order.
    """
    x = np.asarray(x, dtype=np.float64)
    freqs = 2.0 ** np.arange(num_frequencies)
    angles = x[..., :, None] * freqs
    feats = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    return feats.reshape(*x.shape[:-1], x.shape[-1] * 2 * num_frequencies)


def intrinsics_features(intr: Intrinsics) -> np.ndarray:
    """Resolution-normalized (fx/W, fy/H, cx/W, cy/H)"""
    return np.array([intr.fx / intr.width, intr.fy / intr.height, intr.cx / intr.width, intr.cy / intr.height])


def init_camera_code_params(store, rng: np.random.Generator, ray_width: int, hidden: int = 64, num_frequencies: int = 6, std: float = 0.02):
    """Register MLP_K and W_proj"""
    pe_dim = 3 * 2 * num_frequencies
    store.register("camera_code.mlp1.w", truncated_normal(rng, (4, hidden), std))
    store.register("camera_code.mlp1.b", np.zeros(hidden))
    store.register("camera_code.mlp2.w", truncated_normal(rng, (hidden, hidden), std))
    store.register("camera_code.mlp2.b", np.zeros(hidden))
    store.register("camera_code.proj.w", truncated_normal(rng, (hidden + pe_dim, ray_width), std))
    store.register("camera_code.proj.b", np.zeros(ray_width))


def camera_code(pose: CameraPose, intr: Intrinsics, store, num_frequencies: int = 6) -> dc.DiffValue:
    """
    Per-view code e = W_proj([MLP_K(phi(kappa)); PE(o)])

    Args:
        pose: canonical-frame pose
        intr: intrinsics
        store: ParamStore holding the camera_code.* parameters
        num_frequencies: Fourier frequencies per coordinate

    Returns:
        1 x rayWidth DiffValue
    """
    phi = dc.constant(intrinsics_features(intr)[None, :])
    hidden = dc.relu(phi @ store.param("camera_code.mlp1.w") + store.param("camera_code.mlp1.b"))
    intr_feat = hidden @ store.param("camera_code.mlp2.w") + store.param("camera_code.mlp2.b")
    pe = dc.constant(fourier_encode(pose.center[None, :], num_frequencies))
    joined = dc.concat([intr_feat, pe], axis=1)
    return joined @ store.param("camera_code.proj.w") + store.param("camera_code.proj.b")
