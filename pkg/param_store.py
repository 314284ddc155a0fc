"""
Parameter Store
Named model parameters, their gradients and the AdamW optimizer state
"""

import math
from typing import Dict, Iterator, Optional, Tuple

import numpy as np
from loguru import logger
from scipy.stats import truncnorm

from diffcore import DiffValue
from errors import NonFiniteError, ShapeError


class ParamStore:
    def __init__(self):
        """Empty store; register() adds parameters"""
        self.params: Dict[str, np.ndarray] = {}
        self.first_moment: Dict[str, np.ndarray] = {}
        self.second_moment: Dict[str, np.ndarray] = {}
        self.step_count = 0
        self._leaves: Dict[str, DiffValue] = {}

    def register(self, name: str, value: np.ndarray) -> np.ndarray:
        """
        Add a parameter

        Args:
            name: unique parameter name
            value: initial value (copied, float64)

        Returns:
            The stored array
        """
        if name in self.params:
            raise KeyError(f"Parameter '{name}' is already registered")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.first_moment[name] = np.zeros_like(value)
        self.second_moment[name] = np.zeros_like(value)
        return value

    def assign(self, name: str, value: np.ndarray):
        """Overwrite a parameter value; shapes are fixed at registration"""
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.params[name].shape:
            raise ShapeError(f"assign '{name}'", value.shape, self.params[name].shape)
        self.params[name] = value.copy()
        self._leaves.pop(name, None)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = ""):
        return [n for n in self.params if n.startswith(prefix)]

    def num_values(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # ---- graph leaves -----------------------------------------------------

    def begin_step(self):
        """Drop the previous step's graph leaves"""
        self._leaves = {}

    def param(self, name: str) -> DiffValue:
        """Graph leaf for a parameter; repeated calls in one step share the leaf"""
        leaf = self._leaves.get(name)
        if leaf is None:
            leaf = DiffValue(self.params[name], requires_grad=True)
            self._leaves[name] = leaf
        return leaf

    def bind(self, leaves: Dict[str, DiffValue]):
        """Use caller-owned graph leaves for the named parameters (gradient checking)"""
        self._leaves = dict(leaves)

    def gradients(self) -> Dict[str, np.ndarray]:
        """Gradients gathered from this step's leaves (zeros for unused parameters)"""
        grads = {}
        for name, value in self.params.items():
            leaf = self._leaves.get(name)
            grads[name] = leaf.grad.copy() if leaf is not None else np.zeros_like(value)
        return grads

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name in self.params:
            other.params[name] = self.params[name].copy()
            other.first_moment[name] = self.first_moment[name].copy()
            other.second_moment[name] = self.second_moment[name].copy()
        other.step_count = self.step_count
        return other


def global_grad_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def optimizer_step(
    store: ParamStore,
    grads: Dict[str, np.ndarray],
    lr: float,
    weight_decay: float = 1e-6,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip_norm: Optional[float] = 1.0,
    step: Optional[int] = None,
) -> Tuple[ParamStore, float]:
    """
    One AdamW update with global-norm clipping applied before the moment update

    Args:
        store: parameters and moments, updated in place
        grads: gradient per parameter name
        lr: learning rate for this step
        weight_decay: decoupled decay coefficient
        beta1, beta2, eps: adaptive-moment constants
        clip_norm: global gradient norm cap (None disables)
        step: 1-based step for bias correction, defaults to store.step_count + 1

    Returns:
        (store, pre-clip global gradient norm)
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")

    norm = global_grad_norm(grads)
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm

    t = step if step is not None else store.step_count + 1
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t

    for name, g in grads.items():
        g = g * scale
        m = store.first_moment[name] = beta1 * store.first_moment[name] + (1.0 - beta1) * g
        v = store.second_moment[name] = beta2 * store.second_moment[name] + (1.0 - beta2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + eps)
        p = store.params[name]
        store.params[name] = p - lr * weight_decay * p - lr * update

    store.step_count = t
    store.begin_step()
    if scale < 1.0:
        logger.debug(f"Gradient norm {norm:.4g} clipped to {clip_norm}")
    return store, norm


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """
    Linear warm-up then cosine decay to zero

    Args:
        step: current step (>= 0)
        total_steps: step at which the rate reaches 0
        warmup_steps: length of the linear ramp
        base_lr: peak learning rate
    """
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal init truncated at two standard deviations"""
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)
