"""
View Sampling
Temporal-window view sampling, interleaved subset splits and the capacity curriculum
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from decoder import MAX_STAGE, StagePoint
from errors import ConfigError, DatasetError


@dataclass(frozen=True)
class SampleSpec:
    context_views: int = 13
    target_views: int = 12
    window_min: int = 40
    window_max: int = 220
    total_sampled: int = 24

    def __post_init__(self):
        if self.context_views < 1 or self.target_views < 1:
            raise ConfigError("Need at least one context and one target view")
        if self.window_min > self.window_max:
            raise ConfigError(f"Window bounds reversed: [{self.window_min}, {self.window_max}]")
        if self.total_sampled <= self.target_views:
            raise ConfigError("total_sampled must leave at least one context view")

    def sample_count(self, consistency: bool) -> int:
        """24-view protocol with consistency training, context + targets otherwise"""
        return self.total_sampled if consistency else self.context_views + self.target_views


@dataclass(frozen=True)
class ViewSample:
    start: int
    window: int
    context: Tuple[int, ...]
    targets: Tuple[int, ...]


@dataclass(frozen=True)
class SubsetSplit:
    subset_a: Tuple[int, ...]
    subset_b: Tuple[int, ...]

    @property
    def anchors(self) -> Tuple[int, int]:
        return self.subset_a[0], self.subset_a[-1]


@dataclass(frozen=True)
class StageSchedule:
    boundaries: Tuple[int, ...] = (0, 10_000, 20_000, 50_000)
    transition_length: int = 2000
    fixed_stage: int = -1  # >= 0 disables the curriculum

    def __post_init__(self):
        if not self.boundaries or self.boundaries[0] != 0:
            raise ConfigError("Stage boundaries must start at step 0")
        if list(self.boundaries) != sorted(self.boundaries):
            raise ConfigError(f"Stage boundaries must be increasing: {self.boundaries}")
        if len(self.boundaries) - 1 > MAX_STAGE:
            raise ConfigError(f"At most {MAX_STAGE + 1} stages")
        if self.transition_length < 0:
            raise ConfigError("transition_length must be nonnegative")

    @property
    def final_stage(self) -> int:
        return self.fixed_stage if self.fixed_stage >= 0 else len(self.boundaries) - 1


def sample_views(sequence_length: int, spec: SampleSpec, rng: np.random.Generator, consistency: bool = True) -> ViewSample:
    """
    Draw a temporal window, sample ordered views in it and pick the targets

    Args:
        sequence_length: frames available
        spec: sampling sizes
        rng: seeded generator
        consistency: use the total_sampled protocol

    Returns:
        ViewSample with disjoint, ordered context and target indices
    """
    count = spec.sample_count(consistency)
    shortest = max(spec.window_min, count)
    if sequence_length < shortest:
        raise DatasetError(f"Sequence of {sequence_length} frames is shorter than the minimum window {shortest}")

    longest = min(spec.window_max, sequence_length)
    window = int(rng.integers(shortest, longest + 1)) if longest > shortest else shortest
    start = int(rng.integers(0, sequence_length - window + 1))
    frames = np.sort(rng.choice(window, size=count, replace=False)) + start

    target_pos = np.sort(rng.choice(count, size=spec.target_views, replace=False))
    is_target = np.zeros(count, dtype=bool)
    is_target[target_pos] = True
    return ViewSample(
        start=start,
        window=window,
        context=tuple(int(f) for f in frames[~is_target]),
        targets=tuple(int(f) for f in frames[is_target]),
    )


def split_subsets(num_context: int) -> SubsetSplit:
    """
    Interleaved split sharing the first and last context views

    Args:
        num_context: number of ordered context views (>= 3)

    Returns:
        positions into the context list; odd intermediates go to A, even ones to B
    """
    if num_context < 3:
        raise DatasetError(f"Subset split needs at least 3 context views, got {num_context}")
    last = num_context - 1
    odd = [i for i in range(1, last) if i % 2 == 1]
    even = [i for i in range(1, last) if i % 2 == 0]
    return SubsetSplit(tuple([0] + odd + [last]), tuple([0] + even + [last]))


def select(items: Sequence, positions: Sequence[int]) -> List:
    return [items[i] for i in positions]


def stage_at(step: int, schedule: StageSchedule) -> StagePoint:
    """
    Curriculum stage and transition coefficient at a training step

    Args:
        step: training step (>= 0)
        schedule: stage boundaries and ramp length

    Returns:
        StagePoint; lambda ramps over the first transition_length steps of stages >= 1
    """
    if step < 0:
        raise ConfigError(f"Negative step {step}")
    if schedule.fixed_stage >= 0:
        return StagePoint(schedule.fixed_stage, 1.0)

    stage = 0
    for s, boundary in enumerate(schedule.boundaries):
        if step >= boundary:
            stage = s
    if stage == 0 or schedule.transition_length == 0:
        return StagePoint(stage, 1.0)
    progress = (step - schedule.boundaries[stage]) / schedule.transition_length
    return StagePoint(stage, float(min(max(progress, 0.0), 1.0)))
