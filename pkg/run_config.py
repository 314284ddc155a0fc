"""
Run Configuration
Pydantic models for every tunable constant and the sectioned `key = value` text format
they are stored in (grammar in CONFIG_FORMAT.md)
"""

import hashlib
import json
from pathlib import Path
from typing import List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from atomic_io import write_atomic
from decoder import DecoderConfig
from encoder import EncoderConfig
from errors import ConfigError
from losses import LossWeights
from renderer import RenderSettings
from sampling import SampleSpec, StageSchedule

SECTIONS = ("encoder", "decoder", "renderer", "losses", "training", "io")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class EncoderSection(_Section):
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

    @model_validator(mode="after")
    def _heads_divide_dim(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        return self

    def to_config(self) -> EncoderConfig:
        return EncoderConfig(**self.model_dump())


class DecoderSection(_Section):
    tau: float = 1.0
    num_candidates: int = 16
    mean_offset: List[float] = [0.0, 0.0, 1.5]
    log_scale_offset: float = -2.0
    opacity_offset: float = -5.0
    rot6d_offset: List[float] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]

    @field_validator("num_candidates")
    @classmethod
    def _sixteen(cls, v: int) -> int:
        if v != 16:
            raise ValueError("the decoder always predicts 16 candidates per token")
        return v

    @field_validator("mean_offset")
    @classmethod
    def _three(cls, v: List[float]) -> List[float]:
        if len(v) != 3:
            raise ValueError("mean_offset needs 3 values")
        return v

    @field_validator("rot6d_offset")
    @classmethod
    def _six(cls, v: List[float]) -> List[float]:
        if len(v) != 6:
            raise ValueError("rot6d_offset needs 6 values")
        return v

    def to_config(self) -> DecoderConfig:
        return DecoderConfig(
            tau=self.tau,
            num_candidates=self.num_candidates,
            mean_offset=tuple(self.mean_offset),
            log_scale_offset=self.log_scale_offset,
            opacity_offset=self.opacity_offset,
            rot6d_offset=tuple(self.rot6d_offset),
        )


class RendererSection(_Section):
    dilation: float = 0.3
    alpha_clamp: float = 0.99
    transmittance_cutoff: float = 1e-4
    sigma_extent: float = 3.0
    z_near: float = 0.01
    tile_size: int = 16
    min_scale: float = 1e-4
    max_scale: float = 1.0
    background: List[float] = [0.0, 0.0, 0.0]

    @field_validator("background")
    @classmethod
    def _rgb(cls, v: List[float]) -> List[float]:
        if len(v) != 3:
            raise ValueError("background needs 3 values")
        return v

    def to_settings(self, workers: Optional[int] = None) -> RenderSettings:
        values = self.model_dump(exclude={"background"})
        if workers is not None:
            values["workers"] = workers
        return RenderSettings(**values)


class LossesSection(_Section):
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

    @model_validator(mode="after")
    def _nonnegative(self):
        for name, value in self.model_dump().items():
            if value < 0:
                raise ValueError(f"{name} must be nonnegative")
        return self

    def to_weights(self) -> LossWeights:
        return LossWeights(**self.model_dump())


class TrainingSection(_Section):
    seed: int = 0
    total_steps: int = 2000
    warmup_steps: int = 100
    lr: float = 1e-3
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    context_views: int = 5
    target_views: int = 4
    total_sampled: int = 9
    window_min: int = 40
    window_max: int = 220
    consistency: bool = True
    use_curriculum: bool = True
    stage_boundaries: List[int] = [0, 100, 200, 500]
    transition_length: int = 20
    color_jitter: float = 0.0
    log_every: int = 10
    eval_every: int = 100
    checkpoint_every: int = 500
    num_blobs: int = 20
    num_frames: int = 240
    resolution: int = 64
    held_out_views: int = 4

    @field_validator("color_jitter")
    @classmethod
    def _no_jitter(cls, v: float) -> float:
        if v != 0:
            raise ValueError("color jitter augmentation is not implemented; keep it at 0")
        return v

    @model_validator(mode="after")
    def _counts(self):
        if self.consistency and self.total_sampled - self.target_views < 3:
            raise ValueError("consistency training needs at least 3 context views")
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ValueError("step counts must be nonnegative")
        return self

    def sample_spec(self) -> SampleSpec:
        return SampleSpec(
            context_views=self.context_views,
            target_views=self.target_views,
            window_min=self.window_min,
            window_max=self.window_max,
            total_sampled=self.total_sampled,
        )

    def schedule(self) -> StageSchedule:
        boundaries = tuple(self.stage_boundaries)
        fixed = -1 if self.use_curriculum else len(boundaries) - 1
        return StageSchedule(boundaries, self.transition_length, fixed)


class IoSection(_Section):
    run_dir: str = "runs/toy"
    dataset_dir: Optional[str] = None
    metrics_file: str = "metrics.jsonl"
    checkpoint_file: str = "model.ckpt"


class RunConfig(_Section):
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    decoder: DecoderSection = Field(default_factory=DecoderSection)
    renderer: RendererSection = Field(default_factory=RendererSection)
    losses: LossesSection = Field(default_factory=LossesSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    io: IoSection = Field(default_factory=IoSection)

    @classmethod
    def toy(cls) -> "RunConfig":
        """Desk-scale defaults"""
        return cls()

    @classmethod
    def full_scale(cls) -> "RunConfig":
        """Full-size architecture, sampler and curriculum"""
        return cls(
            encoder=EncoderSection(
                num_latents=2048, dim=512, blocks=4, heads=8, rgb_width=512, ray_width=256, camera_hidden=256
            ),
            training=TrainingSection(
                total_steps=220_000,
                warmup_steps=2000,
                lr=5e-4,
                context_views=13,
                target_views=12,
                total_sampled=24,
                stage_boundaries=[0, 10_000, 20_000, 50_000],
                transition_length=2000,
                resolution=256,
                log_every=100,
                eval_every=5000,
                checkpoint_every=10_000,
            ),
            io=IoSection(run_dir="runs/full"),
        )

    def config_hash(self) -> bytes:
        return hashlib.sha256(format_config(self).encode("utf-8")).digest()


# ---- text format ------------------------------------------------------------------------------


def _error_location(err: dict) -> str:
    return ".".join(str(p) for p in err.get("loc", ()))


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """
    Parse the sectioned text format

    Args:
        text: file contents
        source: name used in error messages

    Returns:
        RunConfig; missing keys take their defaults
    """
    data = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            if section in data:
                raise ConfigError(f"{source}:{lineno}: section [{section}] appears twice")
            data[section] = {}
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside of any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in data[section]:
            raise ConfigError(f"{source}:{lineno}: duplicate key {section}.{key}")
        try:
            data[section][key] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{lineno}: {section}.{key}: value is not a JSON literal ({exc.msg})") from exc

    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = _error_location(first)
        if first.get("type") == "extra_forbidden":
            raise ConfigError(f"{source}: unknown key {where}") from exc
        raise ConfigError(f"{source}: {where}: {first.get('msg')}") from exc


def format_config(config: RunConfig) -> str:
    """Serialize every key of every section (parse(format(c)) == c)"""
    lines = []
    dumped = config.model_dump()
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key, value in dumped[section].items():
            lines.append(f"{key} = {json.dumps(value)}")
        lines.append("")
    return "\n".join(lines)


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    return parse_config_text(path.read_text(), source=str(path))


def save_config(config: RunConfig, path: Union[str, Path]):
    write_atomic(path, format_config(config))
