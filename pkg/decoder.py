"""
Decoder Module
Maps latent tokens to 16 raw Gaussian candidates each and exposes G = 2^s merged
Gaussians per token through the stage-dependent, parameter-aware merge.

Attributes travel in their parameter domains: positions, 6D rotations and SH linearly,
scales as log-scales, opacity as log-transmittance log(1 - alpha).
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

import diffcore as dc
from diffcore import DiffValue
from errors import ConfigError, GeometryError, ShapeError
from param_store import truncated_normal

NUM_CANDIDATES = 16
SH_DEGREE = 3
SH_COEFFS = (SH_DEGREE + 1) ** 2
MAX_STAGE = 4

MEAN_OFFSET = np.array([0.0, 0.0, 1.5])
LOG_SCALE_OFFSET = -2.0
OPACITY_OFFSET = -5.0
ROT6D_OFFSET = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
ALPHA_EPS = 1e-7

# per-candidate widths of the geometry head: X, S, R, O, gate
GEO_LAYOUT = (("positions", 3), ("log_scales", 3), ("rot6d", 6), ("opacity_logits", 1), ("gate_logits", 1))
GEO_WIDTH = sum(w for _, w in GEO_LAYOUT)
APP_WIDTH = 3 * SH_COEFFS


@dataclass(frozen=True)
class DecoderConfig:
    tau: float = 1.0
    num_candidates: int = NUM_CANDIDATES
    mean_offset: Tuple[float, float, float] = (0.0, 0.0, 1.5)
    log_scale_offset: float = LOG_SCALE_OFFSET
    opacity_offset: float = OPACITY_OFFSET
    rot6d_offset: Tuple[float, ...] = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)

    def __post_init__(self):
        if self.num_candidates != NUM_CANDIDATES:
            raise ConfigError(f"The decoder always predicts {NUM_CANDIDATES} candidates per token")
        if self.tau <= 0:
            raise ConfigError(f"Gate temperature must be positive, got {self.tau}")


@dataclass
class CandidateSet:
    positions: DiffValue  # M x 16 x 3
    log_scales: DiffValue  # M x 16 x 3
    rot6d: DiffValue  # M x 16 x 6, offset included
    rot_residual: DiffValue  # M x 16 x 6, raw head output
    opacity_logits: DiffValue  # M x 16 x 1
    gate_logits: DiffValue  # M x 16 x 1
    sh: DiffValue  # M x 16 x 48, channel-major (3 x 16)

    @property
    def num_tokens(self) -> int:
        return self.positions.shape[0]

    def log_transmittance(self) -> DiffValue:
        alpha = dc.clip(dc.sigmoid(self.opacity_logits), ALPHA_EPS, 1.0 - ALPHA_EPS)
        return dc.log1p(-alpha)


@dataclass(frozen=True)
class StagePoint:
    stage: int
    lam: float = 1.0

    def __post_init__(self):
        if not 0 <= self.stage <= MAX_STAGE:
            raise ConfigError(f"Stage {self.stage} outside 0..{MAX_STAGE}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"Transition coefficient {self.lam} outside [0, 1]")

    @property
    def gaussians_per_token(self) -> int:
        return 2 ** self.stage

    @property
    def group_size(self) -> int:
        return NUM_CANDIDATES // self.gaussians_per_token


@dataclass
class GaussianScene:
    means: DiffValue  # N x 3
    log_scales: DiffValue  # N x 3
    rot6d: DiffValue  # N x 6
    log_transmittance: DiffValue  # N x 1
    sh: DiffValue  # N x 3 x 16
    rot_residual: Optional[DiffValue] = None  # N x 6

    @property
    def count(self) -> int:
        return self.means.shape[0]

    @property
    def scales(self) -> DiffValue:
        return dc.exp(self.log_scales)

    @property
    def rotations(self) -> DiffValue:
        return rot6d_to_matrix(self.rot6d)

    @property
    def opacities(self) -> DiffValue:
        return -dc.expm1(self.log_transmittance)

    @property
    def opacity_logits(self) -> DiffValue:
        return dc.log(self.opacities) - self.log_transmittance

    @classmethod
    def from_arrays(cls, means, scales, rotations, opacities, sh) -> "GaussianScene":
        """
        Build a constant scene from linear attributes

        Args:
            means: N x 3
            scales: N x 3, positive
            rotations: N x 3 x 3 rotation matrices
            opacities: N, in (0, 1)
            sh: N x 3 x 16
        """
        means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = means.shape[0]
        rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 3, 3)
        rot6d = np.concatenate([rotations[:, :, 0], rotations[:, :, 1]], axis=1)
        alpha = np.clip(np.asarray(opacities, dtype=np.float64).reshape(n, 1), ALPHA_EPS, 1.0 - ALPHA_EPS)
        return cls(
            means=dc.constant(means),
            log_scales=dc.constant(np.log(np.asarray(scales, dtype=np.float64).reshape(n, 3))),
            rot6d=dc.constant(rot6d),
            log_transmittance=dc.constant(np.log1p(-alpha)),
            sh=dc.constant(np.asarray(sh, dtype=np.float64).reshape(n, 3, SH_COEFFS)),
            rot_residual=dc.constant(rot6d - ROT6D_OFFSET),
        )

    def arrays(self) -> Dict[str, np.ndarray]:
        """Linear-domain numpy view (means, scales, rotations, opacities, sh)"""
        return {
            "means": self.means.data.copy(),
            "scales": np.exp(self.log_scales.data),
            "rotations": rot6d_to_matrix(dc.constant(self.rot6d.data)).data,
            "opacities": (-np.expm1(self.log_transmittance.data)).reshape(-1),
            "sh": self.sh.data.copy(),
        }

    def detached(self) -> "GaussianScene":
        residual = None if self.rot_residual is None else dc.constant(self.rot_residual.data)
        return GaussianScene(
            dc.constant(self.means.data),
            dc.constant(self.log_scales.data),
            dc.constant(self.rot6d.data),
            dc.constant(self.log_transmittance.data),
            dc.constant(self.sh.data),
            residual,
        )


# ---- heads ------------------------------------------------------------------------------


def init_head_params(store, rng: np.random.Generator, dim: int, std: float = 0.02):
    """Register the geometry and appearance linear heads"""
    store.register("decoder.geo.w", truncated_normal(rng, (dim, NUM_CANDIDATES * GEO_WIDTH), std))
    store.register("decoder.geo.b", np.zeros(NUM_CANDIDATES * GEO_WIDTH))
    store.register("decoder.app.w", truncated_normal(rng, (dim, NUM_CANDIDATES * APP_WIDTH), std))
    store.register("decoder.app.b", np.zeros(NUM_CANDIDATES * APP_WIDTH))


def decode_candidates(latents, store, config: Optional[DecoderConfig] = None) -> CandidateSet:
    """
    Run the two linear heads and add the static offsets

    Args:
        latents: LatentState (geometry and appearance stream features, M x d)
        store: ParamStore with decoder.* parameters
        config: static offsets

    Returns:
        CandidateSet with 16 candidates per token
    """
    config = config or DecoderConfig()
    geo_feat, app_feat = latents.geometry_features, latents.appearance_features
    m = geo_feat.shape[0]
    geo = geo_feat @ store.param("decoder.geo.w") + store.param("decoder.geo.b")
    geo = dc.reshape(geo, (m, NUM_CANDIDATES, GEO_WIDTH))
    app = app_feat @ store.param("decoder.app.w") + store.param("decoder.app.b")
    sh = dc.reshape(app, (m, NUM_CANDIDATES, APP_WIDTH))

    parts = {}
    start = 0
    for name, width in GEO_LAYOUT:
        parts[name] = geo[:, :, start:start + width]
        start += width

    return CandidateSet(
        positions=parts["positions"] + np.asarray(config.mean_offset),
        log_scales=parts["log_scales"] + config.log_scale_offset,
        rot6d=parts["rot6d"] + np.asarray(config.rot6d_offset),
        rot_residual=parts["rot6d"],
        opacity_logits=parts["opacity_logits"] + config.opacity_offset,
        gate_logits=parts["gate_logits"],
        sh=sh,
    )


# ---- rotations ---------------------------------------------------------------------------


def rot6d_to_matrix(r6: DiffValue) -> DiffValue:
    """
    Gram-Schmidt on the two 3-vectors of a 6D rotation

    Args:
        r6: (..., 6) with a1 = r6[..., :3], a2 = r6[..., 3:]

    Returns:
        (..., 3, 3) with columns b1, b2, b3 = b1 x b2
    """
    r6 = dc.lift(r6)
    if r6.shape[-1] != 6:
        raise ShapeError("rot6d_to_matrix", r6.shape, (..., 6))
    a1 = r6[..., 0:3]
    a2 = r6[..., 3:6]
    if np.any(np.linalg.norm(a1.data, axis=-1) < 1e-8):
        raise GeometryError("6D rotation has a near-zero first column")
    b1 = dc.normalize_l2(a1, axis=-1)
    proj = dc.sum(a2 * b1, axis=-1, keepdims=True)
    b2 = dc.normalize_l2(a2 - proj * b1, axis=-1)
    b3 = dc.cross(b1, b2)
    return dc.stack([b1, b2, b3], axis=-1)


def rotation_matrix_to_quaternion(rotations: np.ndarray) -> np.ndarray:
    """(..., 3, 3) -> unit quaternions (w, x, y, z) with w >= 0"""
    r = np.asarray(rotations, dtype=np.float64)
    flat = r.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, m in enumerate(flat):
        trace = m[0, 0] + m[1, 1] + m[2, 2]
        if trace > 0:
            s = 2.0 * math.sqrt(trace + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        q /= np.linalg.norm(q)
        out[i] = -q if q[0] < 0 else q
    return out.reshape(r.shape[:-2] + (4,))


def quaternion_to_rotation_matrix(quats: np.ndarray) -> np.ndarray:
    """(..., 4) quaternions (w, x, y, z), normalized first"""
    q = np.asarray(quats, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


# ---- merge / split -----------------------------------------------------------------------


def gate_weights(gate_logits: DiffValue, tau: float = 1.0) -> DiffValue:
    """Temperature-scaled softmax over the last axis (one group)"""
    return dc.softmax(gate_logits, axis=-1, temperature=tau)


def merge_group(
    positions,
    log_scales,
    rot6d,
    alphas,
    sh,
    weights,
    group_size: Optional[int] = None,
) -> Dict[str, DiffValue]:
    """
    Merge one group of b candidates into a parent Gaussian

    Args:
        positions: b x 3
        log_scales: b x 3
        rot6d: b x 6
        alphas: b opacities in (0, 1)
        sh: b x 3 x 16 (or b x 48)
        weights: b gate weights summing to 1
        group_size: b, defaults to the number of rows

    Returns:
        dict with positions, log_scales, rot6d, log_transmittance, alpha, sh of the parent
    """
    alphas = dc.lift(alphas)
    if np.any(alphas.data >= 1.0):
        raise GeometryError("Opacity >= 1 has no log-transmittance")
    b = group_size or alphas.shape[0]
    w = dc.reshape(dc.lift(weights), (-1, 1))
    log_u = dc.log1p(-dc.clip(dc.reshape(alphas, (-1, 1)), ALPHA_EPS, 1.0 - ALPHA_EPS))
    sh = dc.lift(sh)
    sh_flat = dc.reshape(sh, (sh.shape[0], -1))

    merged_log_u = dc.sum(w * log_u, axis=0)
    merged = {
        "positions": dc.sum(w * dc.lift(positions), axis=0),
        "log_scales": dc.sum(w * dc.lift(log_scales), axis=0) + math.log(b) / 3.0,
        "rot6d": dc.sum(w * dc.lift(rot6d), axis=0),
        "log_transmittance": merged_log_u,
        "sh": dc.reshape(dc.sum(w * sh_flat, axis=0), sh.shape[1:]),
    }
    merged["alpha"] = -dc.expm1(merged_log_u)
    return merged


def split_parent(parent: Dict[str, DiffValue]) -> Tuple[Dict[str, DiffValue], Dict[str, DiffValue]]:
    """
    Inverse binary split: children copy position, rotation and SH, shrink the scale by
    2^(-1/3) per axis and take the square root of the transmittance
    """
    child = dict(parent)
    child["log_scales"] = dc.lift(parent["log_scales"]) - math.log(2.0) / 3.0
    child["log_transmittance"] = dc.lift(parent["log_transmittance"]) * 0.5
    child["alpha"] = -dc.expm1(child["log_transmittance"])
    return child, dict(child)


def _merge_stage(cands: CandidateSet, stage: int, tau: float) -> Dict[str, DiffValue]:
    """All tokens at one stage: M x G x k per attribute"""
    m = cands.num_tokens
    groups = 2 ** stage
    b = NUM_CANDIDATES // groups
    w = gate_weights(dc.reshape(cands.gate_logits, (m, groups, b)), tau)
    wk = dc.reshape(w, (m, groups, b, 1))

    def avg(value: DiffValue) -> DiffValue:
        k = value.shape[-1]
        return dc.sum(dc.reshape(value, (m, groups, b, k)) * wk, axis=2)

    return {
        "positions": avg(cands.positions),
        "log_scales": avg(cands.log_scales) + math.log(b) / 3.0,
        "rot6d": avg(cands.rot6d),
        "rot_residual": avg(cands.rot_residual),
        "log_transmittance": avg(cands.log_transmittance()),
        "sh": avg(cands.sh),
    }


def _expand(parents: Dict[str, DiffValue]) -> Dict[str, DiffValue]:
    """Split every parent into two adjacent children (M x G/2 -> M x G)"""
    groups = parents["positions"].shape[1]
    order = np.repeat(np.arange(groups), 2)
    children = {name: value[:, order, :] for name, value in parents.items()}
    children["log_scales"] = children["log_scales"] - math.log(2.0) / 3.0
    children["log_transmittance"] = children["log_transmittance"] * 0.5
    return children


def _flatten(attrs: Dict[str, DiffValue]) -> GaussianScene:
    m, g = attrs["positions"].shape[:2]
    n = m * g

    def flat(value: DiffValue, *tail) -> DiffValue:
        return dc.reshape(value, (n,) + tail)

    return GaussianScene(
        means=flat(attrs["positions"], 3),
        log_scales=flat(attrs["log_scales"], 3),
        rot6d=flat(attrs["rot6d"], 6),
        log_transmittance=flat(attrs["log_transmittance"], 1),
        sh=flat(attrs["sh"], 3, SH_COEFFS),
        rot_residual=flat(attrs["rot_residual"], 6),
    )


def decode_stage(cands: CandidateSet, point: StagePoint, tau: float = 1.0) -> GaussianScene:
    """
    Expose M * 2^s Gaussians, blending with the split previous stage while lambda < 1

    Args:
        cands: all 16 candidates per token
        point: stage and transition coefficient
        tau: gate temperature

    Returns:
        GaussianScene ordered token-major, then group
    """
    if not 0.0 <= point.lam <= 1.0:
        raise ConfigError(f"Transition coefficient {point.lam} outside [0, 1]")
    current = _merge_stage(cands, point.stage, tau)
    if point.lam >= 1.0:
        return _flatten(current)
    if point.stage == 0:
        raise ConfigError("Stage 0 has no coarser stage to blend from (lambda must be 1)")

    previous = _expand(_merge_stage(cands, point.stage - 1, tau))
    if point.lam <= 0.0:
        return _flatten(previous)
    lam = point.lam
    blended = {name: previous[name] * (1.0 - lam) + current[name] * lam for name in current}
    return _flatten(blended)


# ---- worked example ----------------------------------------------------------------------


def constant_candidates(scale: float = 0.5, alpha: float = 0.5, gate_logits=None) -> CandidateSet:
    """One token whose 16 candidates share scale and opacity (identity rotation, origin, zero SH)"""
    if not 0.0 < alpha < 1.0:
        raise GeometryError(f"alpha must lie in (0, 1), got {alpha}")
    gates = np.zeros((1, NUM_CANDIDATES, 1)) if gate_logits is None else np.asarray(gate_logits, dtype=np.float64).reshape(1, NUM_CANDIDATES, 1)
    return CandidateSet(
        positions=dc.constant(np.zeros((1, NUM_CANDIDATES, 3))),
        log_scales=dc.constant(np.full((1, NUM_CANDIDATES, 3), math.log(scale))),
        rot6d=dc.constant(np.tile(ROT6D_OFFSET, (1, NUM_CANDIDATES, 1))),
        rot_residual=dc.constant(np.zeros((1, NUM_CANDIDATES, 6))),
        opacity_logits=dc.constant(np.full((1, NUM_CANDIDATES, 1), math.log(alpha) - math.log1p(-alpha))),
        gate_logits=dc.constant(gates),
        sh=dc.constant(np.zeros((1, NUM_CANDIDATES, APP_WIDTH))),
    )


def merge_demo_rows(point: StagePoint, scale: float = 0.5, alpha: float = 0.5, tau: float = 1.0) -> List[Dict]:
    """
    Decode one token of identical candidates at a stage and describe every exposed Gaussian,
    followed by the split of the first one and the front-to-back composite of its children

    Returns:
        list of row dicts (gaussian, group_size, scale, alpha)
    """
    scene = decode_stage(constant_candidates(scale, alpha), point, tau)
    arrays = scene.arrays()
    rows = [
        {"gaussian": f"exposed {i}", "group_size": point.group_size, "scale": float(arrays["scales"][i, 0]), "alpha": float(arrays["opacities"][i])}
        for i in range(scene.count)
    ]
    parent = {"log_scales": dc.constant(scene.log_scales.data[0]), "log_transmittance": dc.constant(scene.log_transmittance.data[0])}
    child, _ = split_parent(parent)
    child_alpha = float(child["alpha"].data[0])
    rows.append({"gaussian": "split child", "group_size": point.group_size // 2 or 1, "scale": float(np.exp(child["log_scales"].data[0])), "alpha": child_alpha})
    rows.append({"gaussian": "children composited", "group_size": point.group_size, "scale": float("nan"), "alpha": 1.0 - (1.0 - child_alpha) ** 2})
    return rows
