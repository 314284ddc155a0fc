"""
Encoder Module
Builds the multi-view token context (Plücker ray + RGB patch embeddings) and refines a fixed
set of latent scene tokens with dual-branch geometry/appearance attention blocks.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from loguru import logger

import diffcore as dc
from diffcore import DiffValue
from errors import ConfigError, ShapeError
from geometry import NormalizedScene, camera_code, init_camera_code_params, patchify, plucker_rays
from param_store import ParamStore, truncated_normal

STREAMS = ("geo", "app")


@dataclass(frozen=True)
class EncoderConfig:
    num_latents: int = 64
    dim: int = 64
    blocks: int = 2
    self_attn_layers: int = 2
    heads: int = 4
    rgb_width: int = 64
    ray_width: int = 32
    registers: int = 8
    patch_size: int = 8
    num_frequencies: int = 6
    camera_hidden: int = 64
    init_std: float = 0.02
    layer_scale_init: float = 0.1
    use_camera_code: bool = True
    dual_branch: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"Token dim {self.dim} is not divisible by {self.heads} heads")
        if self.num_latents < 1 or self.patch_size < 1:
            raise ConfigError("num_latents and patch_size must be positive")

    @property
    def context_width(self) -> int:
        return self.ray_width + self.rgb_width

    @property
    def ffn_width(self) -> int:
        return 4 * self.dim


@dataclass
class InputContext:
    tokens: DiffValue  # (V*P) x (ray_width + rgb_width)
    view_index: np.ndarray  # view of each token
    num_views: int
    num_patches: int


@dataclass
class LatentState:
    scene_tokens: DiffValue  # M x d
    register_tokens: DiffValue  # R x d
    geometry_features: DiffValue  # M x d, fed to the geometry head
    appearance_features: DiffValue  # M x d, fed to the appearance head

    @property
    def num_latents(self) -> int:
        return self.scene_tokens.shape[0]


def _stream_name(config: EncoderConfig, stream: str) -> str:
    # single-branch ablation: both streams share the geometry weights
    return stream if config.dual_branch else "geo"


# ---- parameters ----------------------------------------------------------------------------


def _register_attention(store: ParamStore, rng, prefix: str, dim: int, kv_dim: int, config: EncoderConfig):
    std = config.init_std
    store.register(f"{prefix}.q.w", truncated_normal(rng, (dim, dim), std))
    store.register(f"{prefix}.k.w", truncated_normal(rng, (kv_dim, dim), std))
    store.register(f"{prefix}.v.w", truncated_normal(rng, (kv_dim, dim), std))
    store.register(f"{prefix}.o.w", truncated_normal(rng, (dim, dim), std))
    store.register(f"{prefix}.o.b", np.zeros(dim))
    store.register(f"{prefix}.gamma", np.full(dim, config.layer_scale_init))


def _register_ffn(store: ParamStore, rng, prefix: str, config: EncoderConfig):
    std = config.init_std
    store.register(f"{prefix}.w1", truncated_normal(rng, (config.dim, config.ffn_width), std))
    store.register(f"{prefix}.b1", np.zeros(config.ffn_width))
    store.register(f"{prefix}.w2", truncated_normal(rng, (config.ffn_width, config.dim), std))
    store.register(f"{prefix}.b2", np.zeros(config.dim))
    store.register(f"{prefix}.gamma", np.full(config.dim, config.layer_scale_init))


def init_encoder_params(store: ParamStore, rng: np.random.Generator, config: EncoderConfig):
    """
    Register every encoder parameter

    Args:
        store: target ParamStore
        rng: seeded generator
        config: encoder sizes
    """
    d, std, p = config.dim, config.init_std, config.patch_size
    store.register("context.ray.w", truncated_normal(rng, (p * p * 6, config.ray_width), std))
    store.register("context.rgb.w", truncated_normal(rng, (p * p * 3, config.rgb_width), std))
    store.register("context.rgb.b", np.zeros(config.rgb_width))
    if config.use_camera_code:
        init_camera_code_params(store, rng, config.ray_width, config.camera_hidden, config.num_frequencies, std)

    store.register("latents.init", truncated_normal(rng, (config.num_latents, d), std))
    store.register("latents.registers", truncated_normal(rng, (config.registers, d), std))

    streams = STREAMS if config.dual_branch else ("geo",)
    for j in range(config.blocks):
        for stream in streams:
            base = f"block{j}.{stream}"
            store.register(f"{base}.proj.w", truncated_normal(rng, (d, d), std))
            store.register(f"{base}.proj.b", np.zeros(d))
            _register_attention(store, rng, f"{base}.cross", d, config.context_width, config)
            _register_ffn(store, rng, f"{base}.cross_ffn", config)
            for layer in range(config.self_attn_layers):
                _register_attention(store, rng, f"{base}.self{layer}", d, d, config)
                _register_ffn(store, rng, f"{base}.self{layer}_ffn", config)
        store.register(f"block{j}.mix.w1", truncated_normal(rng, (2 * d, 2 * d), std))
        store.register(f"block{j}.mix.b1", np.zeros(2 * d))
        store.register(f"block{j}.mix.w2", truncated_normal(rng, (2 * d, d), std))
        store.register(f"block{j}.mix.b2", np.zeros(d))


# ---- context -------------------------------------------------------------------------------


def build_context(scene: NormalizedScene, store: ParamStore, config: EncoderConfig) -> InputContext:
    """
    Per-patch tokens u = [W_ray r + e_i ; W_rgb x + b] for every view

    Args:
        scene: canonicalized views with images
        store: encoder parameters
        config: encoder sizes

    Returns:
        InputContext with V*P tokens
    """
    views = scene.views
    if not views:
        raise ShapeError("build_context (no views)", ())
    sizes = {(v.intrinsics.height, v.intrinsics.width) for v in views}
    if len(sizes) > 1:
        raise ShapeError("build_context (mixed image sizes)", *sorted(sizes))

    w_ray = store.param("context.ray.w")
    w_rgb = store.param("context.rgb.w")
    b_rgb = store.param("context.rgb.b")
    p = config.patch_size

    tokens: List[DiffValue] = []
    view_index = []
    num_patches = 0
    for i, view in enumerate(views):
        if view.image is None:
            raise ShapeError(f"build_context (view {i} has no image)", ())
        rays = patchify(plucker_rays(view.pose, view.intrinsics).as_array(), p)
        rgb = patchify(view.image, p)
        u_cam = dc.constant(rays) @ w_ray
        if config.use_camera_code:
            u_cam = u_cam + camera_code(view.pose, view.intrinsics, store, config.num_frequencies)
        u_rgb = dc.constant(rgb) @ w_rgb + b_rgb
        tokens.append(dc.concat([u_cam, u_rgb], axis=1))
        num_patches = rays.shape[0]
        view_index.append(np.full(num_patches, i))

    return InputContext(
        tokens=dc.concat(tokens, axis=0),
        view_index=np.concatenate(view_index),
        num_views=len(views),
        num_patches=num_patches,
    )


# ---- attention -----------------------------------------------------------------------------


def multi_head_attention(
    queries: DiffValue, keys: DiffValue, store: ParamStore, prefix: str, heads: int
) -> Tuple[DiffValue, DiffValue]:
    """
    Scaled dot-product attention

    Args:
        queries: Nq x d (already normalized)
        keys: Nk x dk key/value source (already normalized)
        store: parameters under `prefix`
        heads: number of heads

    Returns:
        (Nq x d output, heads x Nq x Nk attention weights)
    """
    q = queries @ store.param(f"{prefix}.q.w")
    k = keys @ store.param(f"{prefix}.k.w")
    v = keys @ store.param(f"{prefix}.v.w")
    nq, d = q.shape
    nk = k.shape[0]
    dh = d // heads

    qh = dc.transpose(dc.reshape(q, (nq, heads, dh)), (1, 0, 2))
    kh = dc.transpose(dc.reshape(k, (nk, heads, dh)), (1, 2, 0))
    vh = dc.transpose(dc.reshape(v, (nk, heads, dh)), (1, 0, 2))
    weights = dc.softmax((qh @ kh) * (1.0 / math.sqrt(dh)), axis=-1)
    attended = dc.reshape(dc.transpose(weights @ vh, (1, 0, 2)), (nq, d))
    out = attended @ store.param(f"{prefix}.o.w") + store.param(f"{prefix}.o.b")
    return out, weights


def _ffn(x: DiffValue, store: ParamStore, prefix: str) -> DiffValue:
    hidden = dc.relu(x @ store.param(f"{prefix}.w1") + store.param(f"{prefix}.b1"))
    return hidden @ store.param(f"{prefix}.w2") + store.param(f"{prefix}.b2")


def _attention_layer(x: DiffValue, source: Optional[DiffValue], store, prefix: str, config: EncoderConfig) -> DiffValue:
    """Pre-norm residual attention (self when source is None) followed by the feed-forward"""
    normed = dc.layernorm(x)
    kv = normed if source is None else dc.layernorm(source)
    attended, _ = multi_head_attention(normed, kv, store, prefix, config.heads)
    x = x + store.param(f"{prefix}.gamma") * attended
    ffn_prefix = f"{prefix}_ffn"
    return x + store.param(f"{ffn_prefix}.gamma") * _ffn(dc.layernorm(x), store, ffn_prefix)


def _stream(x: DiffValue, ctx: InputContext, store: ParamStore, block: int, stream: str, config: EncoderConfig) -> DiffValue:
    base = f"block{block}.{_stream_name(config, stream)}"
    f = x @ store.param(f"{base}.proj.w") + store.param(f"{base}.proj.b")
    f = _attention_layer(f, ctx.tokens, store, f"{base}.cross", config)
    for layer in range(config.self_attn_layers):
        f = _attention_layer(f, None, store, f"{base}.self{layer}", config)
    return f


def dual_branch_block(
    latents: LatentState, ctx: InputContext, store: ParamStore, block: int, config: EncoderConfig
) -> LatentState:
    """
    One encoder block: project into geometry/appearance streams, cross-attend to the context,
    self-attend, then fuse the streams with the mixer MLP

    Args:
        latents: current scene and register tokens
        ctx: context tokens
        store: parameters
        block: block index
        config: encoder sizes

    Returns:
        Updated LatentState whose stream features feed the decoder heads
    """
    m = latents.num_latents
    x = dc.concat([latents.scene_tokens, latents.register_tokens], axis=0)
    f_geo = _stream(x, ctx, store, block, "geo", config)
    f_app = _stream(x, ctx, store, block, "app", config)

    mixed = dc.concat([f_geo, f_app], axis=1)
    hidden = dc.relu(mixed @ store.param(f"block{block}.mix.w1") + store.param(f"block{block}.mix.b1"))
    x = x + hidden @ store.param(f"block{block}.mix.w2") + store.param(f"block{block}.mix.b2")

    return LatentState(
        scene_tokens=x[:m],
        register_tokens=x[m:],
        geometry_features=f_geo[:m],
        appearance_features=f_app[:m],
    )


def initial_latents(store: ParamStore) -> LatentState:
    init = store.param("latents.init")
    return LatentState(
        scene_tokens=init,
        register_tokens=store.param("latents.registers"),
        geometry_features=init,
        appearance_features=init,
    )


def encode(scene: NormalizedScene, store: ParamStore, config: EncoderConfig) -> LatentState:
    """
    Refine the learnable latents through all blocks

    Args:
        scene: canonicalized input views
        store: encoder parameters
        config: encoder sizes

    Returns:
        LatentState with M tokens independent of the number of views
    """
    state = initial_latents(store)
    if config.blocks == 0:
        return state
    ctx = build_context(scene, store, config)
    for block in range(config.blocks):
        state = dual_branch_block(state, ctx, store, block, config)
    logger.trace(f"Encoded {ctx.num_views} views ({ctx.tokens.shape[0]} tokens) into {state.num_latents} latents")
    return state
