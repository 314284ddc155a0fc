"""
Gradient Checking
Central finite differences against the analytic adjoints, and the verification suite run by
the grad-check command
"""

import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Union

import numpy as np
from loguru import logger

import diffcore as dc
from diffcore import DiffValue
from errors import NonFiniteError, ShapeError

Point = Union[np.ndarray, Dict[str, np.ndarray]]


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float = 0.0
    points: int = 1

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _as_dict(point: Point):
    if isinstance(point, dict):
        return {k: np.array(v, dtype=np.float64) for k, v in point.items()}, True
    return {"x": np.array(point, dtype=np.float64)}, False


def _evaluate(fn: Callable, values: Dict[str, np.ndarray], keyed: bool, make) -> DiffValue:
    leaves = {k: make(v) for k, v in values.items()}
    out = fn(leaves) if keyed else fn(leaves["x"])
    out = dc.lift(out)
    if out.size != 1:
        raise ShapeError("grad_check (output must be scalar)", out.shape, ())
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("grad_check: non-finite function value")
    return out, leaves


def grad_check(
    fn: Callable,
    point: Point,
    eps: float = 1e-6,
    coords_per_array: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Worst relative error between analytic and central-difference gradients

    Args:
        fn: builds a scalar DiffValue from a DiffValue (or a dict of them for dict points)
        point: where to evaluate, an array or a dict of named arrays
        eps: finite-difference step
        coords_per_array: check only this many random coordinates per array (all if None)
        seed: coordinate sampling seed

    Returns:
        max |a - n| / max(1, |a|, |n|)
    """
    values, keyed = _as_dict(point)
    for name, v in values.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"grad_check: non-finite input '{name}'")

    out, leaves = _evaluate(fn, values, keyed, dc.variable)
    out.backward()
    analytic = {k: leaf.grad for k, leaf in leaves.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, base in values.items():
        flat = base.reshape(-1)
        coords = np.arange(flat.size)
        if coords_per_array is not None and flat.size > coords_per_array:
            coords = rng.choice(flat.size, size=coords_per_array, replace=False)
        a_flat = analytic[name].reshape(-1)
        if not np.all(np.isfinite(a_flat)):
            raise NonFiniteError(f"grad_check: non-finite analytic gradient for '{name}'")
        for i in coords:
            saved = flat[i]
            flat[i] = saved + eps
            plus, _ = _evaluate(fn, values, keyed, dc.constant)
            flat[i] = saved - eps
            minus, _ = _evaluate(fn, values, keyed, dc.constant)
            flat[i] = saved
            numeric = (float(plus.data) - float(minus.data)) / (2.0 * eps)
            a = float(a_flat[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


# ---- verification suite -------------------------------------------------------------------


def _away_from(rng: np.random.Generator, shape, kink: float = 0.0, gap: float = 0.1, spread: float = 2.0) -> np.ndarray:
    """Random values at least `gap` from a non-differentiable point"""
    sign = rng.choice([-1.0, 1.0], size=shape)
    return kink + sign * rng.uniform(gap, spread, size=shape)


def _op_checks(rng: np.random.Generator) -> Dict[str, tuple]:
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    vec = rng.normal(size=(5, 3))
    weights = rng.normal(size=(3, 4))
    mask = rng.uniform(size=(3, 4)) > 0.5
    # distinct entries so the minimizer is unique
    separated = (rng.permutation(12) * 0.3 + rng.uniform(-0.05, 0.05, size=12)).reshape(3, 4)
    inner = rng.uniform(-0.45, 0.45, size=(3, 4))
    outer = _away_from(rng, (3, 4), gap=0.55)
    frozen = rng.normal(size=(3, 4))

    def scalar(v):
        return dc.sum(v * weights) if v.shape == weights.shape else dc.sum(v * v)

    return {
        "add": (lambda p: scalar(p["a"] + p["b"]), {"a": x, "b": y}),
        "sub": (lambda p: scalar(p["a"] - p["b"]), {"a": x, "b": y}),
        "mul": (lambda p: scalar(p["a"] * p["b"]), {"a": x, "b": y}),
        "div": (lambda p: scalar(p["a"] / p["b"]), {"a": x, "b": pos}),
        "neg": (lambda v: scalar(dc.neg(v)), x),
        "matmul": (lambda p: dc.sum(dc.square(p["a"] @ p["b"])), {"a": x, "b": rng.normal(size=(4, 2))}),
        "exp": (lambda v: scalar(dc.exp(v)), x),
        "log": (lambda v: scalar(dc.log(v)), pos),
        "expm1": (lambda v: scalar(dc.expm1(v)), 1e-3 * x),
        "log1p": (lambda v: scalar(dc.log1p(v)), pos - 1.2),
        "sigmoid": (lambda v: scalar(dc.sigmoid(v)), x),
        "softplus": (lambda v: scalar(dc.softplus(v)), x),
        "relu": (lambda v: scalar(dc.relu(v)), _away_from(rng, (3, 4))),
        "max_with_constant": (lambda v: scalar(dc.max_with_constant(v, 0.2)), _away_from(rng, (3, 4), kink=0.2)),
        "clip": (lambda v: scalar(dc.clip(v, -0.5, 0.5)), np.where(mask, inner, outer)),
        "clamp_soft": (lambda v: scalar(dc.clamp_soft(v, -0.5, 0.5)), x),
        "sqrt": (lambda v: scalar(dc.sqrt(v)), pos),
        "square": (lambda v: scalar(dc.square(v)), x),
        "abs": (lambda v: scalar(dc.abs(v)), _away_from(rng, (3, 4))),
        "power": (lambda v: scalar(dc.power(v, 1.7)), pos),
        "where": (lambda p: scalar(dc.where(mask, p["a"], p["b"])), {"a": x, "b": y}),
        # the stopped operand is a leaf outside the checked point
        "stop_gradient": (lambda v: scalar(v * dc.stop_gradient(dc.exp(dc.variable(frozen)))), x),
        "sum": (lambda v: dc.sum(dc.square(dc.sum(v, axis=1))), x),
        "mean": (lambda v: dc.sum(dc.square(dc.mean(v, axis=0))), x),
        "min": (lambda v: dc.sum(dc.square(dc.min(v, axis=1))), separated),
        "softmax": (lambda v: scalar(dc.softmax(v, axis=-1, temperature=0.7)), x),
        "normalize_l2": (lambda v: scalar(dc.normalize_l2(v, axis=-1)), x),
        "layernorm": (lambda v: scalar(dc.layernorm(v, axis=-1)), x),
        "reshape": (lambda v: dc.sum(dc.reshape(v, (4, 3)) * weights.reshape(4, 3)), x),
        "transpose": (lambda v: dc.sum(dc.transpose(v, (1, 0)) * weights.T), x),
        "broadcast_to": (lambda v: dc.sum(dc.square(dc.broadcast_to(v, (2, 3, 4)))), rng.normal(size=(3, 1))),
        "index": (lambda v: dc.sum(dc.square(v[np.array([0, 2, 2]), 1:3])), x),
        "concat": (lambda p: dc.sum(dc.square(dc.concat([p["a"], p["b"]], axis=1))), {"a": x, "b": y}),
        "stack": (lambda p: dc.sum(dc.stack([p["a"], p["b"]], axis=1) * np.stack([weights, -weights], axis=1)), {"a": x, "b": y}),
        "cross": (lambda p: dc.sum(dc.cross(p["a"], p["b"])), {"a": vec, "b": rng.normal(size=(5, 3))}),
    }


def _decoder_check(rng: np.random.Generator):
    from decoder import merge_group, split_parent

    point = {
        "positions": rng.normal(size=(4, 3)),
        "log_scales": rng.normal(-1.0, 0.3, size=(4, 3)),
        "rot6d": rng.normal(size=(4, 6)),
        "alphas": rng.uniform(0.1, 0.9, size=4),
        "sh": rng.normal(size=(4, 3, 16)),
        "logits": rng.normal(size=4),
    }

    def fn(p):
        merged = merge_group(
            p["positions"], p["log_scales"], p["rot6d"], p["alphas"], p["sh"], dc.softmax(p["logits"], axis=-1)
        )
        child, _ = split_parent(merged)
        return (
            dc.sum(child["positions"]) + dc.sum(dc.exp(child["log_scales"])) + dc.sum(child["rot6d"])
            + dc.sum(child["alpha"]) + dc.mean(child["sh"])
        )

    return fn, point


def _decode_stage_check(rng: np.random.Generator):
    from decoder import CandidateSet, StagePoint, decode_stage

    m = 2
    point = {
        "positions": rng.normal(size=(m, 16, 3)),
        "log_scales": rng.normal(-1.0, 0.3, size=(m, 16, 3)),
        "rot6d": rng.normal(size=(m, 16, 6)) + np.array([1.0, 0, 0, 0, 1.0, 0]),
        "opacity_logits": rng.normal(size=(m, 16, 1)),
        "gate_logits": rng.normal(size=(m, 16, 1)),
        "sh": rng.normal(size=(m, 16, 48)),
    }

    def fn(p):
        cands = CandidateSet(
            positions=p["positions"],
            log_scales=p["log_scales"],
            rot6d=p["rot6d"],
            rot_residual=p["rot6d"],
            opacity_logits=p["opacity_logits"],
            gate_logits=p["gate_logits"],
            sh=p["sh"],
        )
        scene = decode_stage(cands, StagePoint(2, 0.4), tau=0.8)
        return (
            dc.sum(dc.square(scene.means)) + dc.sum(scene.scales) + dc.sum(scene.rotations)
            + dc.sum(scene.opacities) + dc.mean(scene.sh)
        )

    return fn, point


def random_scene_point(rng: np.random.Generator, n: int = 2, scale_range=(0.15, 0.35)) -> Dict[str, np.ndarray]:
    """Small parameter-domain scene in front of an identity camera"""
    return {
        "means": np.column_stack([rng.uniform(-0.3, 0.3, n), rng.uniform(-0.3, 0.3, n), rng.uniform(2.0, 3.0, n)]),
        "log_scales": np.log(rng.uniform(*scale_range, size=(n, 3))),
        "rot6d": np.array([1.0, 0, 0, 0, 1.0, 0]) + 0.3 * rng.normal(size=(n, 6)),
        "log_transmittance": np.log1p(-rng.uniform(0.3, 0.8, size=(n, 1))),
        "sh": 0.5 * rng.normal(size=(n, 3, 16)),
    }


def _renderer_check(rng: np.random.Generator):
    from decoder import GaussianScene
    from geometry import CameraPose, Intrinsics
    from renderer import render

    # scales stay below the render clamp and every pixel inside each splat's 3-sigma
    # cutoff, where the image is smooth
    point = random_scene_point(rng, 2, scale_range=(0.75, 0.95))
    intr = Intrinsics(16.0, 16.0, 4.0, 4.0, 8, 8)
    pose = CameraPose.identity()
    target = rng.uniform(0.0, 1.0, size=(8, 8, 3))

    def fn(p):
        scene = GaussianScene(p["means"], p["log_scales"], p["rot6d"], p["log_transmittance"], p["sh"])
        out = render(scene, pose, intr, background=np.array([0.1, 0.2, 0.3]))
        return dc.mean(dc.square(out.color - target)) + 0.1 * dc.mean(out.depth) + dc.mean(out.accumulation)

    return fn, point


def _loss_checks(rng: np.random.Generator):
    from decoder import GaussianScene
    from geometry import CameraPose, Intrinsics
    from losses import LossWeights, decoder_regularizers, frustum_loss, one_sided_l1, rendering_loss

    weights = LossWeights()
    target = rng.uniform(size=(12, 12, 3))
    intr = Intrinsics(10.0, 10.0, 5.0, 5.0, 10, 10)
    cams = [(CameraPose.identity(), intr), (CameraPose(np.eye(3), np.array([0.5, 0.0, 0.0])), intr)]
    means = np.column_stack([rng.uniform(-2, 2, 6), rng.uniform(-2, 2, 6), rng.uniform(0.3, 3, 6)])
    scene_point = random_scene_point(rng, 3)
    scene_point["sh"] = scene_point["sh"] * 8.0
    scene_point["rot_residual"] = 0.2 * rng.normal(size=(3, 6))

    def regularizers(p):
        scene = GaussianScene(p["means"], p["log_scales"], p["rot6d"], p["log_transmittance"], p["sh"], p["rot_residual"])
        return decoder_regularizers(scene, weights).total

    # each consistency half against its live operand; the other branch is held fixed
    acc_other = rng.uniform(0.1, 0.9, size=(6, 6))
    depth_other = rng.uniform(1.0, 3.0, size=(6, 6))
    support = rng.uniform(size=(6, 6)) > 0.3

    return {
        "rendering_loss": (lambda v: rendering_loss(v, target, weights).total, rng.uniform(size=(12, 12, 3))),
        "frustum_loss": (lambda v: frustum_loss(v, cams, 0.1), means),
        "decoder_regularizers": (regularizers, scene_point),
        "consistency_alpha_half": (
            lambda v: one_sided_l1(v, dc.constant(acc_other)),
            acc_other + _away_from(rng, (6, 6), gap=0.02, spread=0.3),
        ),
        "consistency_depth_half": (
            lambda v: one_sided_l1(v, dc.constant(depth_other), mask=support),
            depth_other + _away_from(rng, (6, 6), gap=0.02, spread=0.5),
        ),
    }


def _encoder_check(rng: np.random.Generator):
    from encoder import EncoderConfig, encode, init_encoder_params
    from geometry import CameraView, Intrinsics, canonicalize, look_at
    from param_store import ParamStore

    config = EncoderConfig(
        num_latents=4, dim=8, blocks=1, self_attn_layers=1, heads=2, rgb_width=4, ray_width=4,
        registers=1, patch_size=4, camera_hidden=4,
    )
    store = ParamStore()
    init_encoder_params(store, rng, config)
    intr = Intrinsics(8.0, 8.0, 4.0, 4.0, 8, 8)
    views = [
        CameraView(look_at([2.0 * np.sin(t), 0.2, -2.0 * np.cos(t)], [0.0, 0.0, 0.0]), intr, rng.uniform(size=(8, 8, 3)))
        for t in (-0.4, 0.4)
    ]
    scene = canonicalize(views)
    head = rng.normal(size=(4, 8))
    names = ["latents.init", "context.rgb.w", "context.ray.w", "block0.geo.cross.q.w", "block0.app.self0.v.w", "block0.mix.w1"]

    def fn(p):
        store.bind(p)
        state = encode(scene, store, config)
        return dc.sum(state.geometry_features * head) + dc.mean(dc.square(state.appearance_features))

    return fn, {name: store.params[name].copy() for name in names}


def verification_checks(rng: np.random.Generator) -> Dict[str, tuple]:
    """name -> (fn, point, tolerance, coordinates per array or None for all)"""
    checks = {}
    for name, (fn, point) in _op_checks(rng).items():
        checks[f"op.{name}"] = (fn, point, 1e-6, None)
    for name, (fn, point) in _loss_checks(rng).items():
        checks[f"loss.{name}"] = (fn, point, 1e-6, None)
    checks["decoder.merge_split"] = (*_decoder_check(rng), 1e-6, None)
    checks["decoder.decode_stage"] = (*_decode_stage_check(rng), 1e-6, 8)
    checks["encoder.encode"] = (*_encoder_check(rng), 1e-5, 4)
    checks["renderer.render"] = (*_renderer_check(rng), 1e-4, None)
    return checks


def run_verification_suite(seed: int = 0, points: int = 10) -> List[CheckResult]:
    """
    Every differentiable op, both consistency halves, the decoder chain, the encoder and the renderer,
    each at `points` random points

    Returns:
        one CheckResult per check, carrying the worst error over its points
    """
    worst: Dict[str, CheckResult] = {}
    for k in range(points):
        rng = np.random.default_rng([seed, k])
        for name, (fn, point, tol, coords) in verification_checks(rng).items():
            start = time.perf_counter()
            err = grad_check(fn, point, eps=1e-6, coords_per_array=coords, seed=seed + k)
            elapsed = time.perf_counter() - start
            prev = worst.get(name)
            if prev is None:
                worst[name] = CheckResult(name, err, tol, elapsed, points=1)
            else:
                worst[name] = CheckResult(name, max(prev.error, err), tol, prev.seconds + elapsed, points=prev.points + 1)

    results = list(worst.values())
    for result in results:
        level = "DEBUG" if result.passed else "WARNING"
        logger.log(level, f"{result.name}: max relative error {result.error:.3e} over {result.points} points (tolerance {result.tolerance:.0e})")
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"{len(failed)} gradient checks failed: {', '.join(failed)}")
    else:
        logger.info(f"All {len(results)} gradient checks passed at {points} points each")
    return results
