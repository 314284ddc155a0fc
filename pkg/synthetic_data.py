"""
Training Data
Seeded synthetic blob scenes rendered by the project's own renderer, and directories of
posed images (cameras.json + PPM/PNG frames) for real or exported sequences.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from loguru import logger
from scipy import ndimage

from atomic_io import write_atomic
from decoder import SH_COEFFS, GaussianScene, quaternion_to_rotation_matrix
from errors import DatasetError
from geometry import CameraPose, CameraView, Intrinsics, look_at
from image_io import read_image, write_image
from renderer import SH_C0, RenderSettings, render

CAMERAS_FILE = "cameras.json"


@dataclass
class SyntheticScene:
    """Ground-truth blobs in the unit cube plus an arc trajectory; frames render on demand"""

    gaussians: GaussianScene
    poses: List[CameraPose]
    intrinsics: Intrinsics
    held_out_poses: List[CameraPose]
    seed: int
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    settings: RenderSettings = field(default_factory=RenderSettings)
    _cache: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.poses)

    def _render(self, pose: CameraPose) -> np.ndarray:
        out = render(self.gaussians, pose, self.intrinsics, self.background, self.settings)
        return out.color.data.copy()

    def image(self, index: int) -> np.ndarray:
        if index not in self._cache:
            self._cache[index] = self._render(self.poses[index])
        return self._cache[index]

    def view(self, index: int) -> CameraView:
        return CameraView(self.poses[index], self.intrinsics, self.image(index), frame_index=index)

    def held_out_views(self) -> List[CameraView]:
        return [
            CameraView(pose, self.intrinsics, self._render(pose), frame_index=-1 - j)
            for j, pose in enumerate(self.held_out_poses)
        ]


@dataclass
class PosedDirectory:
    """Posed frames loaded from disk"""

    views: List[CameraView]
    held_out: List[CameraView]
    root: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.views)

    def view(self, index: int) -> CameraView:
        return self.views[index]

    def held_out_views(self) -> List[CameraView]:
        return list(self.held_out)


# ---- synthetic scenes ------------------------------------------------------------------------


def _random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    quats = rng.normal(size=(n, 4))
    return quaternion_to_rotation_matrix(quats)


def arc_trajectory(
    num_frames: int,
    radius: float = 2.0,
    height: float = 0.3,
    sweep_degrees: float = 120.0,
    phase: float = 0.0,
    target=(0.0, 0.0, 0.0),
) -> List[CameraPose]:
    """Cameras on a horizontal arc around `target`, all looking at it"""
    if num_frames < 1:
        raise DatasetError("num_frames must be positive")
    half = math.radians(sweep_degrees) / 2.0
    if num_frames == 1:
        angles = np.array([phase])
    else:
        angles = np.linspace(-half, half, num_frames) + phase
    poses = []
    for theta in angles:
        eye = np.array([radius * math.sin(theta), height, -radius * math.cos(theta)]) + np.asarray(target)
        poses.append(look_at(eye, target))
    return poses


def make_synthetic_scene(
    seed: int = 0,
    num_blobs: int = 20,
    num_frames: int = 240,
    resolution: int = 64,
    num_held_out: int = 4,
    settings: Optional[RenderSettings] = None,
) -> SyntheticScene:
    """
    Seeded ground-truth scene of colored blobs

    Args:
        seed: generator seed (same seed, same scene and renders)
        num_blobs: number of Gaussians (>= 1)
        num_frames: trajectory length
        resolution: square image size
        num_held_out: cameras off the training arc for evaluation
        settings: renderer constants used for the ground truth

    Returns:
        SyntheticScene
    """
    if num_blobs < 1:
        raise DatasetError("num_blobs must be at least 1")
    rng = np.random.default_rng(seed)
    means = rng.uniform(-0.5, 0.5, size=(num_blobs, 3))
    scales = rng.uniform(0.02, 0.1, size=(num_blobs, 3))
    rotations = _random_rotations(rng, num_blobs)
    opacities = rng.uniform(0.4, 0.9, size=num_blobs)
    colors = rng.uniform(0.1, 0.9, size=(num_blobs, 3))
    sh = np.zeros((num_blobs, 3, SH_COEFFS))
    sh[:, :, 0] = (colors - 0.5) / SH_C0

    gaussians = GaussianScene.from_arrays(means, scales, rotations, opacities, sh)
    focal = 0.9 * resolution
    intr = Intrinsics(focal, focal, resolution / 2.0, resolution / 2.0, resolution, resolution)
    poses = arc_trajectory(num_frames)
    # held-out cameras sit between training frames, slightly higher
    held_out = arc_trajectory(num_held_out, height=0.45, sweep_degrees=90.0, phase=math.radians(1.3))
    logger.debug(f"Synthetic scene seed={seed}: {num_blobs} blobs, {num_frames} frames at {resolution}px")
    return SyntheticScene(gaussians, poses, intr, held_out, seed, settings=settings or RenderSettings())


# ---- posed directories -----------------------------------------------------------------------


def _camera_record(view: CameraView, filename: str, held_out: bool) -> dict:
    intr = view.intrinsics
    return {
        "file": filename,
        "rotation": view.pose.rotation.tolist(),
        "center": view.pose.center.tolist(),
        "fx": intr.fx,
        "fy": intr.fy,
        "cx": intr.cx,
        "cy": intr.cy,
        "width": intr.width,
        "height": intr.height,
        "held_out": held_out,
    }


def write_posed_directory(source, path: Union[str, Path], frames: Optional[Sequence[int]] = None, image_ext: str = ".ppm") -> Path:
    """
    Export frames (and held-out views) of a sequence as cameras.json plus images

    Args:
        source: SyntheticScene or PosedDirectory
        path: output directory (created)
        frames: frame indices to export, all by default
        image_ext: .ppm or .png

    Returns:
        the directory path
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    frames = range(len(source)) if frames is None else frames
    records = []
    for i in frames:
        name = f"frame_{i:05d}{image_ext}"
        view = source.view(i)
        write_image(root / name, view.image)
        records.append(_camera_record(view, name, False))
    for j, view in enumerate(source.held_out_views()):
        name = f"held_out_{j:03d}{image_ext}"
        write_image(root / name, view.image)
        records.append(_camera_record(view, name, True))
    write_atomic(root / CAMERAS_FILE, json.dumps({"frames": records}, indent=1))
    logger.info(f"Wrote {len(records)} posed images to {root}")
    return root


def crop_and_resize(image: np.ndarray, intr: Intrinsics, resolution: Optional[int]):
    """
    Crop the largest rectangle centered on the principal point, then resize to a square

    Returns:
        (image, updated intrinsics)
    """
    half_w = min(intr.cx, intr.width - intr.cx)
    half_h = min(intr.cy, intr.height - intr.cy)
    x0, x1 = int(math.ceil(intr.cx - half_w)), int(math.floor(intr.cx + half_w))
    y0, y1 = int(math.ceil(intr.cy - half_h)), int(math.floor(intr.cy + half_h))
    cropped = image[y0:y1, x0:x1]
    h, w = cropped.shape[:2]
    cx, cy = intr.cx - x0, intr.cy - y0
    if resolution is None or (h == resolution and w == resolution):
        return cropped, Intrinsics(intr.fx, intr.fy, cx, cy, w, h)

    sy, sx = resolution / h, resolution / w
    resized = ndimage.zoom(cropped, (sy, sx, 1), order=1)[:resolution, :resolution]
    resized = np.clip(resized, 0.0, 1.0)
    return resized, Intrinsics(intr.fx * sx, intr.fy * sy, cx * sx, cy * sy, resolution, resolution)


def load_posed_directory(path: Union[str, Path], resolution: Optional[int] = None) -> PosedDirectory:
    """
    Read cameras.json and the listed images

    Args:
        path: directory written by write_posed_directory (or by hand in the same layout)
        resolution: square target size; None keeps the cropped size

    Returns:
        PosedDirectory with training frames and held-out views
    """
    root = Path(path)
    cameras_path = root / CAMERAS_FILE
    if not cameras_path.exists():
        raise DatasetError(f"No {CAMERAS_FILE} in {root}")
    try:
        records = json.loads(cameras_path.read_text())["frames"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise DatasetError(f"Malformed {cameras_path}: {exc}") from exc

    views, held_out = [], []
    for k, rec in enumerate(records):
        try:
            intr = Intrinsics(rec["fx"], rec["fy"], rec["cx"], rec["cy"], int(rec["width"]), int(rec["height"]))
            pose = CameraPose(np.asarray(rec["rotation"], dtype=np.float64), np.asarray(rec["center"], dtype=np.float64))
        except KeyError as exc:
            raise DatasetError(f"{cameras_path}: frame {k} lacks {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise DatasetError(f"{cameras_path}: frame {k} is malformed ({exc})") from exc
        image = read_image(root / rec["file"])
        if image.shape[:2] != (intr.height, intr.width):
            raise DatasetError(f"{rec['file']}: image is {image.shape[:2]}, cameras.json says {(intr.height, intr.width)}")
        image, intr = crop_and_resize(image, intr, resolution)
        target = held_out if rec.get("held_out", False) else views
        target.append(CameraView(pose, intr, image, frame_index=len(target)))

    if not views:
        raise DatasetError(f"{root} contains no training frames")
    logger.info(f"Loaded {len(views)} frames and {len(held_out)} held-out views from {root}")
    return PosedDirectory(views, held_out, root)
