"""
Training Loop
Model construction, feed-forward scene prediction and the end-to-end optimization loop
(view sampling, subset branches, curriculum stage, composed objective, AdamW, metrics, checkpoints)
"""

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from tqdm import tqdm

from checkpoint import Checkpoint, save_checkpoint
from decoder import GaussianScene, StagePoint, decode_candidates, decode_stage, init_head_params
from encoder import encode, init_encoder_params
from errors import NonFiniteError, TrainingError
from geometry import CameraView, NormalizedScene, canonicalize
from losses import LossReport, branch_objective, consistency_loss, total_objective
from metrics_log import MetricsLog
from param_store import ParamStore, lr_schedule, optimizer_step
from quality_metrics import psnr
from renderer import RenderOutput, render
from run_config import RunConfig, format_config
from sampling import sample_views, select, split_subsets, stage_at
from synthetic_data import load_posed_directory, make_synthetic_scene


# ---- model ------------------------------------------------------------------------------------


def build_model(config: RunConfig, seed: Optional[int] = None) -> ParamStore:
    """
    Fresh encoder and decoder-head parameters

    Args:
        config: run configuration (encoder sizes)
        seed: initialization seed, defaults to training.seed

    Returns:
        ParamStore with zeroed optimizer moments
    """
    seed = config.training.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    enc = config.encoder.to_config()
    store = ParamStore()
    init_encoder_params(store, rng, enc)
    init_head_params(store, rng, enc.dim, enc.init_std)
    logger.debug(f"Model initialized (seed {seed}): {len(store)} tensors, {store.num_values():,} values")
    return store


def final_point(config: RunConfig) -> StagePoint:
    """The stage a fully trained model is evaluated at"""
    return StagePoint(config.training.schedule().final_stage, 1.0)


def decode_scene(norm: NormalizedScene, store: ParamStore, config: RunConfig, point: StagePoint) -> GaussianScene:
    """Encode canonicalized views and expose the Gaussians of one curriculum stage"""
    latents = encode(norm, store, config.encoder.to_config())
    cands = decode_candidates(latents, store, config.decoder.to_config())
    return decode_stage(cands, point, config.decoder.tau)


def predict_scene(
    store: ParamStore,
    config: RunConfig,
    views: Sequence[CameraView],
    point: Optional[StagePoint] = None,
) -> Tuple[GaussianScene, NormalizedScene]:
    """
    Feed-forward reconstruction from posed views

    Args:
        store: trained parameters
        config: run configuration
        views: context views in world coordinates
        point: curriculum stage, defaults to the final one

    Returns:
        (scene in the canonical frame, the NormalizedScene defining that frame)
    """
    store.begin_step()
    norm = canonicalize(views)
    scene = decode_scene(norm, store, config, point or final_point(config))
    return scene, norm


def load_dataset(config: RunConfig):
    """Posed-image directory when io.dataset_dir is set, the seeded synthetic scene otherwise"""
    train = config.training
    if config.io.dataset_dir:
        return load_posed_directory(config.io.dataset_dir, resolution=train.resolution)
    return make_synthetic_scene(
        seed=train.seed,
        num_blobs=train.num_blobs,
        num_frames=train.num_frames,
        resolution=train.resolution,
        num_held_out=train.held_out_views,
        settings=config.renderer.to_settings(),
    )


def evenly_spaced(sequence_length: int, count: int) -> List[int]:
    """`count` frame indices spread over the whole sequence, first and last included"""
    count = max(1, min(count, sequence_length))
    return [int(round(x)) for x in np.linspace(0, sequence_length - 1, count)]


# ---- results ----------------------------------------------------------------------------------


@dataclass
class StepReport:
    step: int
    losses: Dict[str, float]
    lr: float
    stage: int
    lam: float
    grad_norm: float
    num_gaussians: int
    forward_passes: int
    seconds: float

    def record(self) -> Dict:
        row = dict(self.losses)
        row.update(
            lr=self.lr,
            stage=self.stage,
            **{"lambda": self.lam},
            grad_norm=self.grad_norm,
            gaussians=self.num_gaussians,
            seconds=self.seconds,
        )
        return row


@dataclass
class TrainResult:
    store: ParamStore
    steps: int
    history: List[StepReport] = field(default_factory=list)
    psnr_history: Dict[int, float] = field(default_factory=dict)
    checkpoint_path: Optional[Path] = None
    metrics_path: Optional[Path] = None


# ---- trainer ----------------------------------------------------------------------------------


class Trainer:
    """Runs the composed objective over sampled view sets, one step at a time"""

    def __init__(
        self,
        config: RunConfig,
        dataset=None,
        store: Optional[ParamStore] = None,
        start_step: int = 0,
        run_dir: Optional[Path] = None,
    ):
        """
        Initialize Trainer

        Args:
            config: run configuration
            dataset: SyntheticScene or PosedDirectory, built from the config when omitted
            store: parameters to continue from, fresh ones when omitted
            start_step: completed steps of `store`
            run_dir: output directory, defaults to io.run_dir
        """
        self.config = config
        self.dataset = dataset if dataset is not None else load_dataset(config)
        self.store = store if store is not None else build_model(config)
        self.step_index = start_step
        self.run_dir = Path(run_dir or config.io.run_dir)

        self.encoder_config = config.encoder.to_config()
        self.decoder_config = config.decoder.to_config()
        self.settings = config.renderer.to_settings()
        self.background = np.asarray(config.renderer.background, dtype=np.float64)
        self.weights = config.losses.to_weights()
        self.spec = config.training.sample_spec()
        self.schedule = config.training.schedule()
        self.config_text = format_config(config)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: RunConfig, dataset=None, run_dir=None) -> "Trainer":
        return cls(config, dataset=dataset, store=ckpt.store, start_step=ckpt.step, run_dir=run_dir)

    # ---- one step -------------------------------------------------------------------------

    def _render_targets(self, scene: GaussianScene, targets: Sequence[CameraView]) -> List[RenderOutput]:
        return [render(scene, t.pose, t.intrinsics, self.background, self.settings) for t in targets]

    def _branch(self, norm: NormalizedScene, targets: Sequence[CameraView], point: StagePoint):
        scene = decode_scene(norm, self.store, self.config, point)
        renders = self._render_targets(scene, targets)
        cameras = [(v.pose, v.intrinsics) for v in norm.views]
        report = branch_objective(renders, [t.image for t in targets], scene, cameras, self.weights)
        return report, renders, scene

    def _consistency(self, renders_a: Sequence[RenderOutput], renders_b: Sequence[RenderOutput]) -> LossReport:
        reports = [consistency_loss(a, b, self.weights) for a, b in zip(renders_a, renders_b)]
        n = float(len(reports))
        total = reports[0].total
        terms = dict(reports[0].terms)
        for rep in reports[1:]:
            total = total + rep.total
            terms = {name: terms[name] + rep.terms[name] for name in terms}
        return LossReport(total=total / n, terms={name: value / n for name, value in terms.items()})

    def compute_loss(self, step: int):
        """
        Forward pass of one training step (no parameter update)

        Returns:
            (LossReport, StagePoint, exposed Gaussian count, forward passes)
        """
        train = self.config.training
        rng = np.random.default_rng([train.seed, step])
        sample = sample_views(len(self.dataset), self.spec, rng, consistency=train.consistency)

        context = [self.dataset.view(i) for i in sample.context]
        norm = canonicalize(context)
        targets = [norm.canonical_view(self.dataset.view(i)) for i in sample.targets]

        self.store.begin_step()
        point = stage_at(step, self.schedule)

        if not train.consistency:
            report, _, scene = self._branch(norm, targets, point)
            return total_objective(report), point, scene.count, 1

        split = split_subsets(len(context))
        report_a, renders_a, scene = self._branch(norm.subset(split.subset_a), targets, point)
        report_b, renders_b, _ = self._branch(norm.subset(split.subset_b), targets, point)
        con = self._consistency(renders_a, renders_b)
        return total_objective(report_a, report_b, con), point, scene.count, 2

    def train_step(self) -> StepReport:
        """Sample, forward, backward and one clipped AdamW update"""
        step = self.step_index
        train = self.config.training
        started = time.perf_counter()

        report, point, count, passes = self.compute_loss(step)
        scalars = report.scalars()
        if not all(math.isfinite(v) for v in scalars.values()):
            raise TrainingError("Non-finite training loss", step=step, terms=scalars)

        report.total.backward()
        grads = self.store.gradients()
        lr = lr_schedule(step, train.total_steps, train.warmup_steps, train.lr)
        try:
            _, norm = optimizer_step(
                self.store,
                grads,
                lr,
                weight_decay=train.weight_decay,
                beta1=train.beta1,
                beta2=train.beta2,
                eps=train.eps,
                clip_norm=train.clip_norm,
                step=step + 1,
            )
        except NonFiniteError as exc:
            raise TrainingError(str(exc), step=step, terms=scalars) from exc

        self.step_index = step + 1
        return StepReport(
            step=step,
            losses=scalars,
            lr=lr,
            stage=point.stage,
            lam=point.lam,
            grad_norm=norm,
            num_gaussians=count,
            forward_passes=passes,
            seconds=time.perf_counter() - started,
        )

    # ---- evaluation -----------------------------------------------------------------------

    def held_out_psnr(self, point: Optional[StagePoint] = None) -> float:
        """Mean PSNR over the held-out views, reconstructed from evenly spaced context frames"""
        held_out = self.dataset.held_out_views()
        if not held_out:
            return float("nan")
        frames = evenly_spaced(len(self.dataset), self.config.training.context_views)
        scene, norm = predict_scene(self.store, self.config, [self.dataset.view(i) for i in frames], point)
        scores = []
        for view in held_out:
            cam = norm.canonical_view(view)
            out = render(scene.detached(), cam.pose, cam.intrinsics, self.background, self.settings)
            scores.append(psnr(out.color.data, view.image))
        self.store.begin_step()
        finite = [s for s in scores if math.isfinite(s)]
        return float(np.mean(finite)) if finite else float("inf")

    # ---- loop -----------------------------------------------------------------------------

    def save(self, path: Optional[Path] = None) -> Path:
        path = Path(path) if path else self.run_dir / self.config.io.checkpoint_file
        return save_checkpoint(path, self.store, self.config_text, self.step_index)

    def run(self, num_steps: Optional[int] = None, progress: bool = True) -> TrainResult:
        """
        Train until training.total_steps (or for `num_steps` more steps)

        Returns:
            TrainResult with the step history, held-out PSNR per evaluation and output paths
        """
        train = self.config.training
        end = train.total_steps if num_steps is None else self.step_index + num_steps
        self.run_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = self.run_dir / self.config.io.metrics_file
        result = TrainResult(store=self.store, steps=self.step_index, metrics_path=metrics_path)

        logger.info(
            f"Training steps {self.step_index}..{end} on {len(self.dataset)} frames "
            f"({self.store.num_values():,} parameters, consistency={'on' if train.consistency else 'off'})"
        )
        bar = tqdm(total=max(end - self.step_index, 0), disable=not progress, desc="train", unit="step")
        with MetricsLog(metrics_path, append=self.step_index > 0) as log:
            while self.step_index < end:
                step = self.step_index
                score = None
                if train.eval_every > 0 and step % train.eval_every == 0:
                    score = self.held_out_psnr(stage_at(step, self.schedule))
                    result.psnr_history[step] = score

                try:
                    rep = self.train_step()
                except TrainingError as exc:
                    logger.error(f"Training aborted: {exc}")
                    raise

                record = rep.record()
                if score is not None:
                    record["psnr"] = score
                log.write(step, record)
                result.history.append(rep)

                if train.log_every > 0 and step % train.log_every == 0:
                    logger.info(
                        f"step {step:>6} | loss {rep.losses['total']:.5f} | lr {rep.lr:.2e} "
                        f"| stage {rep.stage} lambda {rep.lam:.2f} | #G {rep.num_gaussians}"
                        + (f" | psnr {score:.2f}" if score is not None else "")
                    )
                    for name, value in rep.losses.items():
                        logger.debug(f"  {name:<12} {value:.6g}")
                if train.checkpoint_every > 0 and self.step_index % train.checkpoint_every == 0:
                    self.save()
                bar.update(1)
                bar.set_postfix(loss=f"{rep.losses['total']:.4f}", stage=rep.stage)
        bar.close()

        result.steps = self.step_index
        result.checkpoint_path = self.save()
        final = self.held_out_psnr()
        result.psnr_history[self.step_index] = final
        logger.info(f"Training finished at step {self.step_index}; held-out PSNR {final:.2f} dB")
        return result


def train(config: RunConfig, dataset=None, progress: bool = True) -> TrainResult:
    """Train a fresh model from a configuration; writes the checkpoint and metrics log to io.run_dir"""
    return Trainer(config, dataset=dataset).run(progress=progress)
