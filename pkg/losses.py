"""
Loss Functions
Rendering, subset consistency, frustum and decoder-side regularization objectives and
their weighted composition
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

import diffcore as dc
from diffcore import DiffValue
from errors import ConfigError, GeometryError, ShapeError
from geometry import CameraPose, Intrinsics


@dataclass(frozen=True)
class LossWeights:
    mse: float = 2.0
    perceptual: float = 1.0
    frustum: float = 1e-2
    decoder: float = 1e-2
    consistency_alpha: float = 1e-3
    consistency_depth: float = 1e-2
    alpha_max: float = 0.2
    scale_max: float = 0.5
    sh_max: float = 3.0
    sh_tau: float = 1.0
    sh_power: float = 2.0
    frustum_tau: float = 0.1
    frustum_z_near: float = 0.01
    support_threshold: float = 0.5

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ConfigError(f"Loss weight '{name}' must be nonnegative, got {value}")

    @property
    def opacity_hinge(self) -> float:
        return math.log(self.alpha_max / (1.0 - self.alpha_max))


@dataclass
class LossReport:
    """Unweighted terms plus the weighted total built from them"""

    total: DiffValue
    terms: Dict[str, DiffValue] = field(default_factory=dict)

    def scalars(self) -> Dict[str, float]:
        values = {name: float(term.data) for name, term in self.terms.items()}
        values["total"] = float(self.total.data)
        return values


# ---- rendering ---------------------------------------------------------------------------


def _sobel(image: DiffValue) -> Tuple[DiffValue, DiffValue]:
    """Valid-region Sobel responses of an H x W x C image"""
    tl, tc, tr = image[:-2, :-2], image[:-2, 1:-1], image[:-2, 2:]
    ml, mr = image[1:-1, :-2], image[1:-1, 2:]
    bl, bc, br = image[2:, :-2], image[2:, 1:-1], image[2:, 2:]
    gx = (tr + 2.0 * mr + br) - (tl + 2.0 * ml + bl)
    gy = (bl + 2.0 * bc + br) - (tl + 2.0 * tc + tr)
    return gx, gy


def _downsample(image: DiffValue) -> DiffValue:
    h, w = (image.shape[0] // 2) * 2, (image.shape[1] // 2) * 2
    image = image[:h, :w]
    return (image[0::2, 0::2] + image[1::2, 0::2] + image[0::2, 1::2] + image[1::2, 1::2]) * 0.25


def gradient_proxy_loss(rendered, target, scales: int = 3) -> DiffValue:
    """Multi-scale L1 between Sobel gradient maps, averaged over the usable scales"""
    rendered, target = dc.lift(rendered), dc.lift(target)
    per_scale = []
    for level in range(scales):
        if rendered.shape[0] < 3 or rendered.shape[1] < 3:
            break
        gx_r, gy_r = _sobel(rendered)
        gx_t, gy_t = _sobel(target)
        per_scale.append(0.5 * (dc.mean(dc.abs(gx_r - gx_t)) + dc.mean(dc.abs(gy_r - gy_t))))
        if level + 1 < scales:
            rendered, target = _downsample(rendered), _downsample(target)
    if not per_scale:
        return dc.constant(0.0)
    total = per_scale[0]
    for term in per_scale[1:]:
        total = total + term
    return total / float(len(per_scale))


def rendering_loss(
    rendered,
    target,
    weights: Optional[LossWeights] = None,
    perceptual: Optional[Callable[[DiffValue, DiffValue], DiffValue]] = None,
) -> LossReport:
    """
    lambda_mse * MSE + lambda_perc * perceptual term

    Args:
        rendered: H x W x 3 rendered color
        target: H x W x 3 reference image
        weights: loss weights
        perceptual: optional replacement for the gradient proxy

    Returns:
        LossReport with terms mse and perceptual
    """
    weights = weights or LossWeights()
    rendered, target = dc.lift(rendered), dc.lift(target)
    if rendered.shape != target.shape:
        raise ShapeError("rendering_loss", rendered.shape, target.shape)
    mse = dc.mean(dc.square(rendered - target))
    perc = (perceptual or gradient_proxy_loss)(rendered, target)
    total = weights.mse * mse + weights.perceptual * perc
    return LossReport(total=total, terms={"mse": mse, "perceptual": perc})


# ---- consistency -------------------------------------------------------------------------


def one_sided_l1(live: DiffValue, other: DiffValue, mask: Optional[np.ndarray] = None) -> DiffValue:
    """|live - sg(other)| averaged over the mask (or all pixels); only `live` receives gradient"""
    diff = dc.abs(live - dc.stop_gradient(other))
    if mask is None:
        return dc.mean(diff)
    count = max(int(mask.sum()), 1)
    return dc.sum(diff * mask.astype(np.float64)) / float(count)


def _symmetric_l1(a: DiffValue, b: DiffValue, mask: Optional[np.ndarray] = None) -> DiffValue:
    """1/2 |a - sg(b)| + 1/2 |b - sg(a)|"""
    return 0.5 * one_sided_l1(a, b, mask) + 0.5 * one_sided_l1(b, a, mask)


def consistency_loss(out_a, out_b, weights: Optional[LossWeights] = None) -> LossReport:
    """
    Stop-gradient agreement of two branches rendered from the same camera

    Args:
        out_a, out_b: RenderOutput of each subset branch
        weights: loss weights (also supplies the support threshold)

    Returns:
        LossReport with terms con_alpha and con_depth
    """
    weights = weights or LossWeights()
    acc_a, acc_b = out_a.accumulation, out_b.accumulation
    if acc_a.shape != acc_b.shape:
        raise ShapeError("consistency_loss", acc_a.shape, acc_b.shape)
    loss_alpha = _symmetric_l1(acc_a, acc_b)
    support = (acc_a.data > weights.support_threshold) & (acc_b.data > weights.support_threshold)
    loss_depth = _symmetric_l1(out_a.depth, out_b.depth, mask=support)
    total = weights.consistency_alpha * loss_alpha + weights.consistency_depth * loss_depth
    return LossReport(total=total, terms={"con_alpha": loss_alpha, "con_depth": loss_depth})


# ---- frustum -----------------------------------------------------------------------------


def frustum_violation(means, pose: CameraPose, intr: Intrinsics, z_near: float = 0.01) -> DiffValue:
    """Per-point violation of one camera's frustum (0 inside)"""
    means = dc.lift(means)
    cam = (means - pose.center) @ pose.rotation
    z = cam[:, 2]
    in_front = z.data > 0.0
    z_safe = dc.where(in_front, z, 1.0)
    ndc_x = (intr.fx * cam[:, 0] / z_safe + intr.cx) * (2.0 / intr.width) - 1.0
    ndc_y = (intr.fy * cam[:, 1] / z_safe + intr.cy) * (2.0 / intr.height) - 1.0
    lateral = dc.relu(dc.abs(ndc_x) - 1.0) + dc.relu(dc.abs(ndc_y) - 1.0)
    # fixed lateral penalty behind the camera
    lateral = dc.where(in_front, lateral, 2.0)
    return dc.relu(z_near - z) + lateral


def frustum_loss(
    means,
    cameras: Sequence[Tuple[CameraPose, Intrinsics]],
    tau: float = 0.1,
    z_near: float = 0.01,
) -> DiffValue:
    """
    mean_n log(1 + v_n / tau), v_n the smallest violation over the input cameras

    Args:
        means: N x 3 Gaussian centers
        cameras: (pose, intrinsics) of each input view
        tau: softening scale
        z_near: near plane

    Returns:
        scalar loss
    """
    if not cameras:
        raise GeometryError("frustum_loss needs at least one camera")
    means = dc.lift(means)
    if means.shape[0] == 0:
        return dc.constant(0.0)
    per_view = [frustum_violation(means, pose, intr, z_near) for pose, intr in cameras]
    v = dc.min(dc.stack(per_view, axis=1), axis=1)
    return dc.mean(dc.log(1.0 + v / tau))


# ---- decoder regularizers ------------------------------------------------------------------


def decoder_regularizers(scene, weights: Optional[LossWeights] = None) -> LossReport:
    """
    Opacity, scale, rotation-residual and SH soft-cap penalties on the exposed scene

    Args:
        scene: GaussianScene with parameter-domain attributes
        weights: loss weights and regularizer constants

    Returns:
        LossReport whose total is the unweighted sum of the four terms
    """
    weights = weights or LossWeights()
    logits = scene.opacity_logits
    hinge = dc.relu(logits - weights.opacity_hinge)
    opacity = dc.mean(scene.opacities) + dc.mean(dc.square(hinge))

    scale = dc.mean(dc.square(dc.relu(scene.log_scales - math.log(weights.scale_max))))

    if scene.rot_residual is not None:
        rotation = dc.mean(dc.sum(dc.square(scene.rot_residual), axis=-1))
    else:
        rotation = dc.constant(0.0)

    tau = weights.sh_tau
    soft = dc.softplus((dc.abs(scene.sh) - weights.sh_max) / tau) * tau
    sh = dc.mean(dc.power(soft, weights.sh_power))

    terms = {"opacity_reg": opacity, "scale_reg": scale, "rot_reg": rotation, "sh_reg": sh}
    return LossReport(total=opacity + scale + rotation + sh, terms=terms)


# ---- composition -------------------------------------------------------------------------


def branch_objective(
    renders: Sequence,
    targets: Sequence[np.ndarray],
    scene,
    cameras: Sequence[Tuple[CameraPose, Intrinsics]],
    weights: Optional[LossWeights] = None,
    perceptual: Optional[Callable] = None,
) -> LossReport:
    """
    L^k = L_ren + lambda_fru * L_fru + lambda_dec * L_dec for one subset branch

    Args:
        renders: RenderOutput per target view
        targets: reference image per target view
        scene: the branch's decoded GaussianScene
        cameras: the branch's input cameras
        weights: loss weights
        perceptual: optional perceptual callable
    """
    weights = weights or LossWeights()
    if len(renders) != len(targets) or not renders:
        raise ShapeError("branch_objective (renders vs targets)", (len(renders),), (len(targets),))

    mse = perc = None
    for out, target in zip(renders, targets):
        rep = rendering_loss(out.color, target, weights, perceptual)
        mse = rep.terms["mse"] if mse is None else mse + rep.terms["mse"]
        perc = rep.terms["perceptual"] if perc is None else perc + rep.terms["perceptual"]
    mse = mse / float(len(renders))
    perc = perc / float(len(renders))

    fru = frustum_loss(scene.means, cameras, weights.frustum_tau, weights.frustum_z_near)
    dec = decoder_regularizers(scene, weights)

    total = (
        weights.mse * mse
        + weights.perceptual * perc
        + weights.frustum * fru
        + weights.decoder * dec.total
    )
    terms = {"mse": mse, "perceptual": perc, "frustum": fru, "decoder": dec.total}
    terms.update(dec.terms)
    return LossReport(total=total, terms=terms)


def total_objective(
    branch_a: LossReport,
    branch_b: Optional[LossReport] = None,
    consistency: Optional[LossReport] = None,
) -> LossReport:
    """
    1/2 (L^a + L^b) + L_con, or the single branch when consistency training is off

    Returns:
        LossReport; per-term entries are the branch averages plus the consistency terms
    """
    if branch_b is None:
        total = branch_a.total
        terms = dict(branch_a.terms)
        if consistency is not None:
            total = total + consistency.total
            terms.update(consistency.terms)
        return LossReport(total=total, terms=terms)

    total = 0.5 * (branch_a.total + branch_b.total)
    terms = {name: 0.5 * (branch_a.terms[name] + branch_b.terms[name]) for name in branch_a.terms}
    if consistency is not None:
        total = total + consistency.total
        terms.update(consistency.terms)
    return LossReport(total=total, terms=terms)
