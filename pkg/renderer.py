"""
Renderer Module
Differentiable CPU splatting of a GaussianScene.

The projection, covariance and SH stages are built from diffcore ops. Blending is a single
custom op with a hand-written adjoint; the tiled path and the per-pixel reference share one
blend kernel and accumulate sequentially, so they agree bit for bit.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

import diffcore as dc
from diffcore import DiffValue
from geometry import CameraPose, Intrinsics

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

OUT_CHANNELS = 5  # r, g, b, depth, accumulation


@dataclass(frozen=True)
class RenderSettings:
    dilation: float = 0.3
    alpha_clamp: float = 0.99
    transmittance_cutoff: float = 1e-4
    sigma_extent: float = 3.0
    z_near: float = 0.01
    tile_size: int = 16
    min_scale: float = 1e-4
    max_scale: float = 1.0
    depth_floor: float = 1e-6
    workers: int = field(default_factory=lambda: int(os.getenv("SPLAT_WORKERS", "1")))

    @property
    def cutoff_power(self) -> float:
        return self.sigma_extent ** 2


@dataclass
class Splat2D:
    """Projected, culled and depth-sorted splats (one row per surviving Gaussian)"""

    means2d: DiffValue  # n x 2 pixel coordinates
    conics: DiffValue  # n x 3 (a, b, c) of the inverse 2D covariance
    depths: DiffValue  # n view-space z
    colors: DiffValue  # n x 3
    opacities: DiffValue  # n
    radii: np.ndarray  # n, pixels
    indices: np.ndarray  # source Gaussian index per row

    @property
    def count(self) -> int:
        return int(self.indices.shape[0])


@dataclass
class RenderOutput:
    color: DiffValue  # H x W x 3
    depth: DiffValue  # H x W
    accumulation: DiffValue  # H x W
    num_visible: int = 0


# ---- 3D / 2D geometry ------------------------------------------------------------------


def covariance3d(scales, rotations) -> DiffValue:
    """Sigma = R diag(s^2) R^T for (..., 3) scales and (..., 3, 3) rotations"""
    scales, rotations = dc.lift(scales), dc.lift(rotations)
    m = rotations * dc.reshape(scales, scales.shape[:-1] + (1, 3))
    axes = tuple(range(m.ndim - 2)) + (m.ndim - 1, m.ndim - 2)
    return m @ dc.transpose(m, axes)


def sh_basis(dirs: DiffValue) -> DiffValue:
    """Real SH basis up to degree 3: (..., 3) unit directions -> (..., 16)"""
    dirs = dc.lift(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    terms = [
        dc.constant(np.full(x.shape, SH_C0)),
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * xy,
        SH_C2[1] * yz,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * xz,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * xy * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
    return dc.stack(terms, axis=-1)


def sh_eval(coeffs, dirs) -> DiffValue:
    """
    View-dependent color

    Args:
        coeffs: (..., 3, 16) SH coefficients per channel
        dirs: (..., 3) unit viewing directions

    Returns:
        (..., 3) rgb = max(sum_k Y_k c_k + 0.5, 0)
    """
    coeffs = dc.lift(coeffs)
    basis = sh_basis(dirs)
    basis = dc.reshape(basis, basis.shape[:-1] + (1, 16))
    return dc.relu(dc.sum(coeffs * basis, axis=-1) + 0.5)


def _screen_radius(cov2d: np.ndarray, extent: float) -> np.ndarray:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.1))
    return np.ceil(extent * np.sqrt(lam_max))


def project(scene, pose: CameraPose, intr: Intrinsics, settings: Optional[RenderSettings] = None) -> Splat2D:
    """
    EWA projection of every Gaussian, frustum culling and the global depth sort

    Args:
        scene: GaussianScene
        pose: world-from-camera pose
        intr: pinhole intrinsics
        settings: rasterizer constants

    Returns:
        Splat2D sorted by view-space depth, ties broken by Gaussian index
    """
    settings = settings or RenderSettings()
    rot = pose.rotation
    # row by row, so each Gaussian's camera coordinates do not depend on its position in the scene
    cam_all = dc.sum(dc.reshape(scene.means - pose.center, (-1, 3, 1)) * rot, axis=1)
    keep = np.nonzero(cam_all.data[:, 2] > settings.z_near)[0]
    if keep.size == 0:
        return _empty_splats()

    cam = cam_all[keep]
    means = scene.means[keep]
    log_scales = dc.clip(scene.log_scales[keep], math.log(settings.min_scale), math.log(settings.max_scale))
    cov_world = covariance3d(dc.exp(log_scales), scene.rotations[keep])
    cov_cam = rot.T @ cov_world @ rot

    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    inv_z = 1.0 / z
    zeros = dc.constant(np.zeros(keep.size))
    jac = dc.stack(
        [
            dc.stack([intr.fx * inv_z, zeros, -intr.fx * x * inv_z * inv_z], axis=-1),
            dc.stack([zeros, intr.fy * inv_z, -intr.fy * y * inv_z * inv_z], axis=-1),
        ],
        axis=1,
    )
    cov2d = jac @ cov_cam @ dc.transpose(jac, (0, 2, 1)) + settings.dilation * np.eye(2)

    px = intr.fx * x * inv_z + intr.cx
    py = intr.fy * y * inv_z + intr.cy
    radii = _screen_radius(cov2d.data, settings.sigma_extent)
    on_screen = (
        (px.data + radii >= 0.0)
        & (px.data - radii <= intr.width)
        & (py.data + radii >= 0.0)
        & (py.data - radii <= intr.height)
    )
    sel = np.nonzero(on_screen)[0]
    if sel.size == 0:
        return _empty_splats()

    # global front-to-back order, ties by source index
    src = keep[sel]
    order = sel[np.lexsort((src, z.data[sel]))]

    a, b, c = cov2d[order, 0, 0], cov2d[order, 0, 1], cov2d[order, 1, 1]
    det = a * c - b * b
    conics = dc.stack([c / det, -b / det, a / det], axis=-1)

    view_dirs = dc.normalize_l2(means[order] - pose.center, axis=-1)
    colors = sh_eval(scene.sh[keep[order]], view_dirs)
    opacities = dc.reshape(scene.opacities[keep[order]], (-1,))

    return Splat2D(
        means2d=dc.stack([px[order], py[order]], axis=-1),
        conics=conics,
        depths=z[order],
        colors=colors,
        opacities=opacities,
        radii=radii[order],
        indices=keep[order],
    )


def _empty_splats() -> Splat2D:
    return Splat2D(
        means2d=dc.constant(np.zeros((0, 2))),
        conics=dc.constant(np.zeros((0, 3))),
        depths=dc.constant(np.zeros(0)),
        colors=dc.constant(np.zeros((0, 3))),
        opacities=dc.constant(np.zeros(0)),
        radii=np.zeros(0),
        indices=np.zeros(0, dtype=np.int64),
    )


# ---- blending kernel -------------------------------------------------------------------


@dataclass
class _SplatArrays:
    means2d: np.ndarray
    conics: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    depths: np.ndarray
    radii: np.ndarray
    background: np.ndarray


def _blend_state(pix_x: np.ndarray, pix_y: np.ndarray, splats: _SplatArrays, idx: np.ndarray, settings: RenderSettings):
    """Per-pixel, per-splat blending quantities for one pixel block (P pixels x K splats)"""
    mean = splats.means2d[idx]
    conic = splats.conics[idx]
    dx = (pix_x[:, None] + 0.5) - mean[None, :, 0]
    dy = (pix_y[:, None] + 0.5) - mean[None, :, 1]
    q = conic[None, :, 0] * dx * dx + 2.0 * conic[None, :, 1] * dx * dy + conic[None, :, 2] * dy * dy
    gauss = np.exp(-0.5 * q)
    raw = splats.opacities[idx][None, :] * gauss
    inside = q <= settings.cutoff_power
    alpha = np.where(inside, np.minimum(raw, settings.alpha_clamp), 0.0)
    one_minus = 1.0 - alpha
    trans_incl = np.cumprod(one_minus, axis=1)
    trans = np.concatenate([np.ones((alpha.shape[0], 1)), trans_incl[:, :-1]], axis=1)
    active = trans >= settings.transmittance_cutoff
    weights = np.where(active, alpha * trans, 0.0)
    final_t = np.cumprod(np.where(active, one_minus, 1.0), axis=1)[:, -1]
    return {
        "dx": dx,
        "dy": dy,
        "gauss": gauss,
        "raw": raw,
        "inside": inside,
        "alpha": alpha,
        "one_minus": one_minus,
        "trans": trans,
        "active": active,
        "weights": weights,
        "final_t": final_t,
    }


def _blend_forward(pix_x, pix_y, splats: _SplatArrays, idx, settings: RenderSettings) -> np.ndarray:
    """P x 5 outputs (rgb, depth, accumulation)"""
    out = np.zeros((pix_x.shape[0], OUT_CHANNELS))
    if idx.size == 0:
        out[:, 0:3] = splats.background[None, :]
        return out
    st = _blend_state(pix_x, pix_y, splats, idx, settings)
    w = st["weights"]
    color = np.cumsum(w[:, :, None] * splats.colors[idx][None, :, :], axis=1)[:, -1, :]
    depth_num = np.cumsum(w * splats.depths[idx][None, :], axis=1)[:, -1]
    acc = 1.0 - st["final_t"]
    out[:, 0:3] = color + st["final_t"][:, None] * splats.background[None, :]
    out[:, 3] = depth_num / np.maximum(acc, settings.depth_floor)
    out[:, 4] = acc
    return out


def _blend_backward(pix_x, pix_y, splats: _SplatArrays, idx, settings: RenderSettings, grad_out: np.ndarray):
    """Adjoint of _blend_forward for one pixel block; returns per-splat gradient rows"""
    g_color, g_depth, g_acc = grad_out[:, 0:3], grad_out[:, 3], grad_out[:, 4]
    if idx.size == 0:
        return None, g_color.sum(axis=0)

    st = _blend_state(pix_x, pix_y, splats, idx, settings)
    w, trans, final_t = st["weights"], st["trans"], st["final_t"]
    colors = splats.colors[idx]
    depths = splats.depths[idx]
    conic = splats.conics[idx]

    depth_num = np.cumsum(w * depths[None, :], axis=1)[:, -1]
    acc = 1.0 - final_t
    acc_floor = np.maximum(acc, settings.depth_floor)
    g_depth_num = g_depth / acc_floor
    g_acc_total = g_acc - np.where(acc > settings.depth_floor, g_depth * depth_num / (acc_floor * acc_floor), 0.0)
    # dL/dT_final
    g_final = g_color @ splats.background - g_acc_total

    per_weight = g_color @ colors.T + g_depth_num[:, None] * depths[None, :]
    wv = w * per_weight
    suffix = np.cumsum(wv[:, ::-1], axis=1)[:, ::-1]
    suffix_excl = np.concatenate([suffix[:, 1:], np.zeros((wv.shape[0], 1))], axis=1)
    g_alpha = np.where(
        st["active"],
        trans * per_weight - (suffix_excl + (final_t * g_final)[:, None]) / st["one_minus"],
        0.0,
    )

    live = st["inside"] & (st["raw"] < settings.alpha_clamp)
    g_raw = np.where(live, g_alpha, 0.0)
    g_q = g_raw * (-0.5 * st["raw"])
    dx, dy = st["dx"], st["dy"]
    a, b, c = conic[None, :, 0], conic[None, :, 1], conic[None, :, 2]

    rows = {
        "means2d": np.stack(
            [
                np.sum(g_q * -2.0 * (a * dx + b * dy), axis=0),
                np.sum(g_q * -2.0 * (b * dx + c * dy), axis=0),
            ],
            axis=-1,
        ),
        "conics": np.stack(
            [np.sum(g_q * dx * dx, axis=0), np.sum(g_q * 2.0 * dx * dy, axis=0), np.sum(g_q * dy * dy, axis=0)],
            axis=-1,
        ),
        "opacities": np.sum(g_raw * st["gauss"], axis=0),
        "colors": w.T @ g_color,
        "depths": w.T @ g_depth_num,
    }
    g_background = final_t @ g_color
    return rows, g_background


# ---- tiling ----------------------------------------------------------------------------


@dataclass
class _Tile:
    pix_x: np.ndarray
    pix_y: np.ndarray
    flat: np.ndarray  # flattened output pixel indices
    splats: np.ndarray  # sorted splat indices overlapping the tile


def _make_tiles(splats: _SplatArrays, height: int, width: int, settings: RenderSettings, reference: bool) -> List[_Tile]:
    n = splats.opacities.shape[0]
    all_splats = np.arange(n)
    if reference:
        # one block per pixel, every splat considered
        tiles = []
        for py in range(height):
            for px in range(width):
                tiles.append(_Tile(np.array([px]), np.array([py]), np.array([py * width + px]), all_splats))
        return tiles

    ts = settings.tile_size
    mx, my, r = splats.means2d[:, 0], splats.means2d[:, 1], splats.radii
    tiles = []
    for y0 in range(0, height, ts):
        y1 = min(y0 + ts, height)
        for x0 in range(0, width, ts):
            x1 = min(x0 + ts, width)
            hit = (mx + r >= x0) & (mx - r <= x1) & (my + r >= y0) & (my - r <= y1)
            ys, xs = np.meshgrid(np.arange(y0, y1), np.arange(x0, x1), indexing="ij")
            xs, ys = xs.reshape(-1), ys.reshape(-1)
            tiles.append(_Tile(xs, ys, ys * width + xs, all_splats[hit]))
    return tiles


def _map_tiles(fn, tiles: Sequence[_Tile], workers: int):
    """Apply fn to every tile; results come back in tile order"""
    if workers <= 1 or len(tiles) <= 1:
        return [fn(tile) for tile in tiles]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tiles))


def rasterize_forward(
    splats: _SplatArrays, height: int, width: int, settings: RenderSettings, reference: bool = False
) -> np.ndarray:
    """H x W x 5 image of blended rgb, expected depth and accumulation"""
    out = np.zeros((height * width, OUT_CHANNELS))
    tiles = _make_tiles(splats, height, width, settings, reference)
    results = _map_tiles(
        lambda t: _blend_forward(t.pix_x, t.pix_y, splats, t.splats, settings),
        tiles,
        1 if reference else settings.workers,
    )
    for tile, block in zip(tiles, results):
        out[tile.flat] = block
    return out.reshape(height, width, OUT_CHANNELS)


def rasterize_backward(
    grad_out: np.ndarray, splats: _SplatArrays, height: int, width: int, settings: RenderSettings
) -> Dict[str, np.ndarray]:
    """
    Adjoint of the blending stage

    Args:
        grad_out: H x W x 5 upstream gradient
        splats: the forward inputs
        height, width: image size
        settings: rasterizer constants

    Returns:
        gradients for means2d, conics, opacities, colors, depths and background
    """
    n = splats.opacities.shape[0]
    grads = {
        "means2d": np.zeros((n, 2)),
        "conics": np.zeros((n, 3)),
        "opacities": np.zeros(n),
        "colors": np.zeros((n, 3)),
        "depths": np.zeros(n),
        "background": np.zeros(3),
    }
    flat_grad = grad_out.reshape(height * width, OUT_CHANNELS)
    tiles = _make_tiles(splats, height, width, settings, reference=False)
    results = _map_tiles(
        lambda t: _blend_backward(t.pix_x, t.pix_y, splats, t.splats, settings, flat_grad[t.flat]),
        tiles,
        settings.workers,
    )
    # fixed reduction order: tile by tile
    for tile, (rows, g_bg) in zip(tiles, results):
        grads["background"] += g_bg
        if rows is None:
            continue
        for name, value in rows.items():
            grads[name][tile.splats] += value
    return grads


def rasterize(
    splat2d: Splat2D,
    background,
    height: int,
    width: int,
    settings: RenderSettings,
    reference: bool = False,
) -> DiffValue:
    """Blend sorted splats into an H x W x 5 DiffValue"""
    background = dc.lift(background)
    inputs = [splat2d.means2d, splat2d.conics, splat2d.opacities, splat2d.colors, splat2d.depths, background]
    arrays = _SplatArrays(
        means2d=splat2d.means2d.data,
        conics=splat2d.conics.data,
        opacities=splat2d.opacities.data,
        colors=splat2d.colors.data,
        depths=splat2d.depths.data,
        radii=splat2d.radii,
        background=background.data,
    )
    data = rasterize_forward(arrays, height, width, settings, reference=reference)

    def backward(g):
        grads = rasterize_backward(g, arrays, height, width, settings)
        return (
            grads["means2d"],
            grads["conics"],
            grads["opacities"],
            grads["colors"],
            grads["depths"],
            grads["background"],
        )

    return dc.custom_op(inputs, data, backward, "rasterize")


def _split_output(packed: DiffValue, num_visible: int) -> RenderOutput:
    return RenderOutput(
        color=packed[..., 0:3],
        depth=packed[..., 3],
        accumulation=packed[..., 4],
        num_visible=num_visible,
    )


def render(
    scene,
    pose: CameraPose,
    intr: Intrinsics,
    background=None,
    settings: Optional[RenderSettings] = None,
) -> RenderOutput:
    """
    Render a GaussianScene from one camera (tiled path)

    Args:
        scene: GaussianScene
        pose: world-from-camera pose in the scene's frame
        intr: intrinsics (fixes the output size)
        background: rgb, defaults to black
        settings: rasterizer constants

    Returns:
        RenderOutput with color, expected depth and accumulation maps
    """
    return _render(scene, pose, intr, background, settings, reference=False)


def render_reference(
    scene,
    pose: CameraPose,
    intr: Intrinsics,
    background=None,
    settings: Optional[RenderSettings] = None,
) -> RenderOutput:
    """Brute-force per-pixel reference over every projected splat"""
    return _render(scene, pose, intr, background, settings, reference=True)


def _render(scene, pose, intr, background, settings, reference: bool) -> RenderOutput:
    settings = settings or RenderSettings()
    if background is None:
        background = np.zeros(3)
    splat2d = project(scene, pose, intr, settings) if scene.count > 0 else _empty_splats()
    packed = rasterize(splat2d, background, intr.height, intr.width, settings, reference=reference)
    logger.trace(f"Rendered {splat2d.count}/{scene.count} splats at {intr.width}x{intr.height}")
    return _split_output(packed, splat2d.count)
