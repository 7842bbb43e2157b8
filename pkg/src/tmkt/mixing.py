"""Probabilistic time-step mixup: ratio-to-probability solving, switch-point
sampling, sequence mixing, and the ablation schedules/layouts.

The core process: walk the sequence from t=1 and at each step draw
u_t ~ U(0,1); the first step with u_t < p becomes the switch point t*,
after which every frame comes from the event source. t* = T+1 means no
replacement. Two readings of the expected replaced-frame count are
supported:

* unconditional — the literal trigger process, where t* = T+1 outcomes
  count as zero replaced frames;
* conditional — expectation of the truncated geometric law on {1..T},
  which cannot fall below (T+1)/2 replaced frames and is therefore
  infeasible for small target ratios.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .data import FrameSeq
from .errors import DomainError, InfeasibleRatioError, PairingError

SOLVE_TOL = 1e-10
_MAX_BISECT = 200


class MixMode(str, enum.Enum):
    UNCONDITIONAL = "unconditional"
    CONDITIONAL = "conditional"


class Schedule(str, enum.Enum):
    PROBABILISTIC = "probabilistic"
    FIXED_RATIO = "fixed"
    DYNAMIC_LINEAR = "dynamic-linear"
    DYNAMIC_NONLINEAR = "dynamic-nonlinear"


class Layout(str, enum.Enum):
    RGB_TO_DVS = "r2d"     # event segment at the tail (default)
    DVS_TO_RGB = "d2r"     # event segment at the head
    MID_DVS = "mid"        # centered contiguous event window
    RAND_DVS = "rand"      # scattered event steps


def expected_replaced(timesteps: int, p: float, mode: MixMode = MixMode.UNCONDITIONAL) -> float:
    """Expected number of event (replaced) frames for trigger probability p."""
    if timesteps < 1:
        raise DomainError(f"timesteps must be >= 1, got {timesteps}")
    if not (0.0 < p <= 1.0) or not math.isfinite(p):
        raise DomainError(f"replacement probability must be in (0,1], got {p}")
    q = 1.0 - p
    if mode == MixMode.UNCONDITIONAL:
        # sum_t Pr(t* <= t) = T - ((1-p) - (1-p)^(T+1)) / p
        return timesteps - (q - q ** (timesteps + 1)) / p
    t = np.arange(1, timesteps + 1, dtype=np.float64)
    pmf = q ** (t - 1) * p
    denom = 1.0 - q ** timesteps
    return float(np.sum((timesteps + 1 - t) * pmf) / denom)


def conditional_ratio_floor(timesteps: int) -> float:
    """Smallest feasible mixup ratio in conditional mode (open bound)."""
    return (timesteps + 1) / (2.0 * timesteps)


def solve_p(timesteps: int, r_m: float, mode: MixMode = MixMode.UNCONDITIONAL) -> float:
    """Solve expected_replaced(T, p, mode) = T * r_m for p by bisection."""
    if not (0.0 < r_m <= 1.0):
        raise DomainError(f"mixup ratio must be in (0,1], got {r_m}")
    if r_m == 1.0:
        return 1.0
    if mode == MixMode.CONDITIONAL:
        floor = conditional_ratio_floor(timesteps)
        if r_m <= floor:
            raise InfeasibleRatioError(
                f"conditional mode cannot reach r_m={r_m} for T={timesteps}; "
                f"the expectation is bounded below by {floor} (exclusive)"
            )

    target = timesteps * r_m

    def gap(p):
        return expected_replaced(timesteps, p, mode) - target

    lo = 1e-12
    if gap(lo) >= 0.0:
        # conditional mode just above the floor: the root is below numerical reach
        raise InfeasibleRatioError(
            f"r_m={r_m} is numerically unreachable for T={timesteps} in {mode.value} mode"
        )
    p = optimize.bisect(gap, lo, 1.0, xtol=1e-15, maxiter=_MAX_BISECT)
    if abs(gap(p)) > SOLVE_TOL:
        raise DomainError(f"bisection failed to converge: residual {gap(p):.3e}")
    return float(p)


@dataclass
class MixSpec:
    """Mixing configuration; p is derived from (T, r_m, mode) on construction."""

    timesteps: int
    r_m: float
    mode: MixMode = MixMode.UNCONDITIONAL
    schedule: Schedule = Schedule.PROBABILISTIC
    layout: Layout = Layout.RGB_TO_DVS
    p: float = field(init=False)

    def __post_init__(self):
        self.mode = MixMode(self.mode)
        self.schedule = Schedule(self.schedule)
        self.layout = Layout(self.layout)
        self.p = solve_p(self.timesteps, self.r_m, self.mode)


@dataclass
class MixedSample:
    """A realized mixed sequence with its supervision targets.

    ``t_star`` is the 1-based switch point for contiguous tail mixes
    (T+1 = all static) and None for the non-tail layouts, where only the
    per-frame modality labels describe the mix. ``static_ratio_target``
    always equals mean(modality_labels).
    """

    frames: np.ndarray          # (T, C, H, W)
    modality_labels: np.ndarray  # (T,) uint8, 1 = static
    static_ratio_target: float
    label: int
    t_star: int | None = None


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def sample_t_star(spec: MixSpec, seed_or_rng) -> int:
    """Draw the switch point t* in [1, T+1] (T+1 = no replacement)."""
    rng = _rng(seed_or_rng)
    T, p = spec.timesteps, spec.p
    if spec.mode == MixMode.UNCONDITIONAL:
        hits = np.flatnonzero(rng.random(T) < p)
        return int(hits[0]) + 1 if hits.size else T + 1
    t = np.arange(1, T + 1, dtype=np.float64)
    pmf = (1.0 - p) ** (t - 1) * p
    cdf = np.cumsum(pmf / pmf.sum())
    return int(np.searchsorted(cdf, rng.random())) + 1


def mix_sequence(static_seq: FrameSeq, event_seq: FrameSeq, t_star: int) -> MixedSample:
    """Splice static frames before t* with event frames from t* onward."""
    if static_seq.data.shape != event_seq.data.shape:
        raise PairingError(
            f"shape mismatch: static {static_seq.data.shape} vs event {event_seq.data.shape}"
        )
    if static_seq.label != event_seq.label:
        raise PairingError(
            f"label mismatch: static {static_seq.label} vs event {event_seq.label}"
        )
    T = static_seq.timesteps
    if not (1 <= t_star <= T + 1):
        raise DomainError(f"t_star must be in [1, {T + 1}], got {t_star}")
    labels = (np.arange(1, T + 1) < t_star).astype(np.uint8)
    frames = np.where(labels[:, None, None, None].astype(bool),
                      static_seq.data, event_seq.data)
    return MixedSample(
        frames=frames.astype(np.float32),
        modality_labels=labels,
        static_ratio_target=float(labels.mean()),
        label=static_seq.label,
        t_star=int(t_star),
    )


def mix_with_mask(static_seq: FrameSeq, event_seq: FrameSeq, event_mask: np.ndarray) -> MixedSample:
    """Mix by an arbitrary per-step event mask (for mid/random layouts)."""
    if static_seq.data.shape != event_seq.data.shape:
        raise PairingError(
            f"shape mismatch: static {static_seq.data.shape} vs event {event_seq.data.shape}"
        )
    if static_seq.label != event_seq.label:
        raise PairingError(
            f"label mismatch: static {static_seq.label} vs event {event_seq.label}"
        )
    mask = np.asarray(event_mask, dtype=bool)
    T = static_seq.timesteps
    if mask.shape != (T,):
        raise DomainError(f"event mask must have shape ({T},), got {mask.shape}")
    labels = (~mask).astype(np.uint8)
    frames = np.where(mask[:, None, None, None], event_seq.data, static_seq.data)
    # recover t* when the mask is a contiguous tail (includes all-static/all-event)
    k = int(mask.sum())
    t_star = T - k + 1 if k == 0 or mask[T - k:].all() and not mask[:T - k].any() else None
    return MixedSample(
        frames=frames.astype(np.float32),
        modality_labels=labels,
        static_ratio_target=float(labels.mean()),
        label=static_seq.label,
        t_star=t_star,
    )


def _round_half_to_event(x: float) -> int:
    # ties go toward more event frames
    return int(math.floor(x + 0.5))


def scheduled_event_count(
    schedule: Schedule,
    spec: MixSpec,
    batch_index: int,
    batches_per_epoch: int,
    epoch: int,
    max_epochs: int,
    seed_or_rng,
) -> int:
    """Number of event steps this sample should receive under a schedule."""
    T = spec.timesteps
    if not (0 <= batch_index < batches_per_epoch):
        raise DomainError(f"batch index {batch_index} out of range [0, {batches_per_epoch})")
    if not (0 <= epoch <= max_epochs):
        raise DomainError(f"epoch {epoch} out of range [0, {max_epochs}]")
    if schedule == Schedule.PROBABILISTIC:
        return T + 1 - sample_t_star(spec, seed_or_rng)
    if schedule == Schedule.FIXED_RATIO:
        return int(math.floor(T * spec.r_m))
    if schedule == Schedule.DYNAMIC_LINEAR:
        frac = epoch / max_epochs
    else:  # DYNAMIC_NONLINEAR
        frac = ((batch_index + epoch * batches_per_epoch) / (max_epochs * batches_per_epoch)) ** 3
    return _round_half_to_event(T * min(frac, 1.0))


def schedule_event_mask(
    spec: MixSpec,
    batch_index: int,
    batches_per_epoch: int,
    epoch: int,
    max_epochs: int,
    seed_or_rng,
) -> np.ndarray:
    """Per-step event mask for the configured schedule and handoff layout."""
    rng = _rng(seed_or_rng)
    T = spec.timesteps
    k = scheduled_event_count(
        spec.schedule, spec, batch_index, batches_per_epoch, epoch, max_epochs, rng
    )
    mask = np.zeros(T, dtype=bool)
    if k <= 0:
        return mask
    k = min(k, T)
    if spec.layout == Layout.RGB_TO_DVS:
        mask[T - k:] = True
    elif spec.layout == Layout.DVS_TO_RGB:
        mask[:k] = True
    elif spec.layout == Layout.MID_DVS:
        start = (T - k) // 2
        mask[start:start + k] = True
    else:  # RAND_DVS
        mask[rng.choice(T, size=k, replace=False)] = True
    return mask


def schedule_t_star(
    spec: MixSpec,
    batch_index: int,
    batches_per_epoch: int,
    epoch: int,
    max_epochs: int,
    seed_or_rng,
) -> int:
    """Switch point for tail-layout schedules: last k frames replaced."""
    k = scheduled_event_count(
        spec.schedule, spec, batch_index, batches_per_epoch, epoch, max_epochs, seed_or_rng
    )
    return spec.timesteps - min(k, spec.timesteps) + 1
