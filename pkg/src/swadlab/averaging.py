"""Weight averaging over a training trajectory: SWAD, its ablations, SWA and ERM baselines.

Validation checkpoints are numbered from 1. Checkpoint ``c`` closes the
segment of raw iterations ``((c-1)*eval_freq, c*eval_freq]``; the segment's
weights are folded into a :class:`SegmentMean` as they arrive, so dense
averaging over any run of whole checkpoints is exact without storing raw
iterates.

Every strategy exposes ``observe(iteration, theta, val_loss=None)`` and
``finalize()``. A non-None ``val_loss`` marks ``iteration`` as the end of a
checkpoint segment. Iteration 0 (the initial weights) only seeds the
"last weights" fallback and the EMA shadow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .params import RunningMean, mean_of

VARIANTS = (
    "swad",
    "swad_no_dense",
    "swad_no_overfit",
    "swad_no_opt_overfit",
    "swad_fit_on_val",
    "swa_cyclic",
    "swa_constant",
    "erm_last",
    "erm_best_val",
    "ema",
)


@dataclass(frozen=True)
class SwadConfig:
    n_s: int = 3
    n_e: int = 6
    r: float = 1.3
    eval_freq: int = 20

    def __post_init__(self):
        if self.n_s < 1 or self.n_e < 1:
            raise ValueError("patience parameters n_s and n_e must be >= 1")
        if not self.r > 1.0:
            raise ValueError(f"tolerance rate r must be > 1, got {self.r}")
        if self.eval_freq < 1:
            raise ValueError("eval_freq must be >= 1")


class ValTrace:
    """Validation losses at checkpoints 1, 2, ... in order."""

    def __init__(self, losses: Sequence[float] = ()):
        self.losses: list[float] = []
        for x in losses:
            self.append(x)

    def append(self, loss: float) -> int:
        loss = float(loss)
        if not math.isfinite(loss):
            raise ValueError(f"validation loss must be finite, got {loss}")
        self.losses.append(loss)
        return len(self.losses)

    def __len__(self) -> int:
        return len(self.losses)

    def __getitem__(self, checkpoint: int) -> float:
        if not 1 <= checkpoint <= len(self.losses):
            raise IndexError(f"checkpoint {checkpoint} out of range 1..{len(self.losses)}")
        return self.losses[checkpoint - 1]


def _losses(trace) -> list[float]:
    return trace.losses if isinstance(trace, ValTrace) else [float(x) for x in trace]


@dataclass(frozen=True)
class AveragingInterval:
    t_s: int
    t_e: int
    l: float | None = None

    def __post_init__(self):
        if not 1 <= self.t_s <= self.t_e:
            raise ValueError(f"invalid averaging interval t_s={self.t_s}, t_e={self.t_e}")


def detect_start(trace, n_s: int, r: float) -> tuple[int, float] | None:
    """First checkpoint after which the loss stops decreasing for ``n_s`` checkpoints.

    Scans ``i = n_s, n_s+1, ...``; fires when the oldest loss of the window
    ending at ``i`` equals the window minimum (ties count as the oldest).
    Returns ``(t_s, l)`` with ``t_s = i - n_s + 1`` and ``l = r * mean(window)``.
    """
    losses = _losses(trace)
    for i in range(n_s, len(losses) + 1):
        window = losses[i - n_s:i]
        if window[0] == min(window):
            return i - n_s + 1, (r / n_s) * math.fsum(window)
    return None


def detect_end(trace, l: float, start_scan: int, n_e: int) -> int | None:
    """First ``i >= max(start_scan, n_e)`` whose last ``n_e`` losses all exceed ``l``.

    Returns ``t_e = i - n_e`` or None if the threshold is never crossed.
    """
    losses = _losses(trace)
    for i in range(max(start_scan, n_e), len(losses) + 1):
        if l < min(losses[i - n_e:i]):
            return i - n_e
    return None


def detect_interval(trace, n_s: int, n_e: int, r: float) -> tuple[AveragingInterval, bool, bool]:
    """Full detector: returns the interval plus whether start/end actually fired.

    Unfired detections default to the first and final checkpoints.
    """
    losses = _losses(trace)
    if not losses:
        raise ValueError("validation trace is empty")
    start = detect_start(losses, n_s, r)
    if start is None:
        return AveragingInterval(1, len(losses), None), False, False
    t_s, l = start
    t_e = detect_end(losses, l, t_s + n_s, n_e)
    if t_e is None:
        return AveragingInterval(t_s, len(losses), l), True, False
    return AveragingInterval(t_s, t_e, l), True, True


@dataclass
class SegmentMean:
    checkpoint_index: int
    mean: RunningMean = field(default_factory=RunningMean)


def swad_average(segments: Mapping[int, SegmentMean] | Sequence[SegmentMean],
                 interval: AveragingInterval) -> np.ndarray:
    """Mean of every raw iterate in checkpoints ``t_s..t_e`` via count-weighted merging."""
    if not isinstance(segments, Mapping):
        segments = {s.checkpoint_index: s for s in segments}
    acc = RunningMean()
    for c in range(interval.t_s, interval.t_e + 1):
        seg = segments.get(c)
        if seg is None or seg.mean.count == 0:
            raise KeyError(f"no segment mean recorded for checkpoint {c}")
        acc = acc.merge(seg.mean)
    return acc.value()


def swa_sparse_average(snapshots: Sequence[np.ndarray]) -> np.ndarray:
    if len(snapshots) == 0:
        raise ValueError("SWA needs at least one snapshot")
    return mean_of(snapshots)


def swa_sample_checkpoints(n_checkpoints: int, mode: str, k: int, start: int) -> list[int]:
    """Checkpoints at which SWA takes a snapshot.

    ``constant``: every ``k`` checkpoints beginning at ``start``.
    ``cyclic``: checkpoints at or after ``start`` that end a cycle of ``k``
    checkpoints, i.e. ``c % k == 0``.
    """
    if k < 1:
        raise ValueError("SWA sampling period must be >= 1")
    start = max(1, start)
    if mode == "constant":
        return list(range(start, n_checkpoints + 1, k))
    if mode == "cyclic":
        return [c for c in range(start, n_checkpoints + 1) if c % k == 0]
    raise ValueError(f"unknown SWA mode {mode!r}")


def start_checkpoint(n_checkpoints: int, fraction: float) -> int:
    """First checkpoint after the leading ``fraction`` of training."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("start fraction must lie in [0, 1)")
    return min(n_checkpoints, int(math.floor(fraction * n_checkpoints)) + 1)


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------

class AveragingStrategy:
    """Trajectory observer; subclasses decide which weights to return."""

    kind = "base"

    def __init__(self, eval_freq: int = 1):
        self.eval_freq = eval_freq
        self.trace = ValTrace()
        self.last: np.ndarray | None = None
        self._iteration = -1

    def observe(self, iteration: int, theta: np.ndarray, val_loss: float | None = None) -> None:
        if iteration <= self._iteration:
            raise ValueError(f"iterations must increase: got {iteration} after {self._iteration}")
        self._iteration = iteration
        self.last = np.array(theta, dtype=np.float64)
        if iteration == 0:
            self._on_init(self.last)
            return
        self._on_iterate(iteration, self.last)
        if val_loss is not None:
            c = self.trace.append(val_loss)
            self._on_checkpoint(c, iteration, self.last, float(val_loss))

    def _on_init(self, theta):
        pass

    def _on_iterate(self, iteration, theta):
        pass

    def _on_checkpoint(self, checkpoint, iteration, theta, val_loss):
        pass

    @property
    def n_checkpoints(self) -> int:
        return len(self.trace)

    def finalize(self) -> np.ndarray:
        raise NotImplementedError

    def report(self) -> dict:
        return {
            "variant": self.kind,
            "t_s": None,
            "t_e": None,
            "l": None,
            "eval_freq": self.eval_freq,
            "n_checkpoints": self.n_checkpoints,
        }

    def _require_observed(self):
        if self.last is None:
            raise ValueError(f"{self.kind}: no weights observed")


class ErmLast(AveragingStrategy):
    kind = "erm_last"

    def finalize(self):
        self._require_observed()
        return self.last.copy()


class ErmBestVal(AveragingStrategy):
    """Weights at the checkpoint with the lowest validation loss (earliest on ties)."""

    kind = "erm_best_val"

    def __init__(self, eval_freq=1):
        super().__init__(eval_freq)
        self.best: tuple[float, int, np.ndarray] | None = None

    def _on_checkpoint(self, checkpoint, iteration, theta, val_loss):
        if self.best is None or val_loss < self.best[0]:
            self.best = (val_loss, checkpoint, theta.copy())

    def finalize(self):
        self._require_observed()
        return self.last.copy() if self.best is None else self.best[2].copy()

    def report(self):
        rep = super().report()
        if self.best is not None:
            rep["t_s"] = rep["t_e"] = self.best[1]
        return rep


class Ema(AveragingStrategy):
    kind = "ema"

    def __init__(self, eval_freq=1, decay: float = 0.99):
        super().__init__(eval_freq)
        if not 0.0 < decay < 1.0:
            raise ValueError(f"EMA decay must lie in (0, 1), got {decay}")
        self.decay = decay
        self.shadow: np.ndarray | None = None

    def _on_init(self, theta):
        self.shadow = theta.copy()

    def _on_iterate(self, iteration, theta):
        if self.shadow is None:
            self.shadow = theta.copy()
        else:
            self.shadow = self.decay * self.shadow + (1.0 - self.decay) * theta

    def finalize(self):
        self._require_observed()
        return self.shadow.copy()


class _CheckpointRecorder(AveragingStrategy):
    """Keeps per-checkpoint segment means (dense) and checkpoint snapshots (sparse)."""

    def __init__(self, eval_freq=1, dense=True):
        super().__init__(eval_freq)
        self.dense = dense
        self.segments: dict[int, SegmentMean] = {}
        self.snapshots: dict[int, np.ndarray] = {}
        self._open = RunningMean()
        self.everything = RunningMean()

    def _on_iterate(self, iteration, theta):
        self.everything.update(theta)
        if self.dense:
            self._open.update(theta)

    def _on_checkpoint(self, checkpoint, iteration, theta, val_loss):
        if self.dense:
            self.segments[checkpoint] = SegmentMean(checkpoint, self._open)
            self._open = RunningMean()
        else:
            self.snapshots[checkpoint] = theta.copy()

    def average(self, interval: AveragingInterval) -> np.ndarray:
        return swad_average(self.segments, interval)


class SwaSparse(_CheckpointRecorder):
    """Plain SWA: average snapshots taken every ``k`` checkpoints after a warm-up fraction."""

    def __init__(self, eval_freq=1, mode="constant", k: int = 5, start_fraction: float = 0.5):
        super().__init__(eval_freq, dense=False)
        self.mode = mode
        self.kind = f"swa_{mode}"
        self.k = k
        self.start_fraction = start_fraction
        self.sampled: list[int] = []

    def finalize(self):
        self._require_observed()
        if self.n_checkpoints == 0:
            self.sampled = []
            return self.last.copy()
        start = start_checkpoint(self.n_checkpoints, self.start_fraction)
        self.sampled = swa_sample_checkpoints(self.n_checkpoints, self.mode, self.k, start)
        if not self.sampled:
            self.sampled = [self.n_checkpoints]
        return swa_sparse_average([self.snapshots[c] for c in self.sampled])

    def report(self):
        rep = super().report()
        if self.sampled:
            rep["t_s"], rep["t_e"] = self.sampled[0], self.sampled[-1]
        rep["n_snapshots"] = len(self.sampled)
        return rep


class Swad(_CheckpointRecorder):
    """Dense, overfit-aware averaging and the ablations that switch parts of it off.

    ``dense=False`` swaps the dense segment mean for snapshots every ``k``
    checkpoints inside the detected interval. ``detect_end=False`` forces the
    end to the final checkpoint. ``fixed_start`` (a training fraction) skips
    both detections.
    """

    kind = "swad"

    def __init__(self, config: SwadConfig = SwadConfig(), dense=True, detect_end=True,
                 fixed_start: float | None = None, k: int = 5, kind: str = "swad"):
        super().__init__(config.eval_freq, dense=dense)
        self.config = config
        self.use_end = detect_end
        self.fixed_start = fixed_start
        self.k = k
        self.kind = kind
        self.interval: AveragingInterval | None = None
        self.fired = (False, False)

    def select_interval(self) -> AveragingInterval:
        T = self.n_checkpoints
        cfg = self.config
        if self.fixed_start is not None:
            self.fired = (False, False)
            return AveragingInterval(start_checkpoint(T, self.fixed_start), T, None)
        interval, s_fired, e_fired = detect_interval(self.trace, cfg.n_s, cfg.n_e, cfg.r)
        if not self.use_end:
            interval = AveragingInterval(interval.t_s, T, interval.l)
            e_fired = False
        self.fired = (s_fired, e_fired)
        return interval

    def finalize(self):
        self._require_observed()
        if self.n_checkpoints == 0:
            return self.last.copy()
        self.interval = self.select_interval()
        if self.dense:
            return self.average(self.interval)
        picks = range(self.interval.t_s, self.interval.t_e + 1, self.k)
        return swa_sparse_average([self.snapshots[c] for c in picks])

    def report(self):
        rep = super().report()
        if self.interval is not None:
            rep.update(t_s=self.interval.t_s, t_e=self.interval.t_e, l=self.interval.l)
            rep["start_detected"], rep["end_detected"] = self.fired
        return rep


class SwadFitOnVal(_CheckpointRecorder):
    """Oracle-style ablation: pick the checkpoint range whose dense average scores best on validation.

    ``val_eval(theta) -> (loss, accuracy)``. Candidates are all ``(t_s, t_e)``
    with ``t_e - t_s <= max_span``; higher accuracy wins, then lower loss,
    then the earliest pair.
    """

    kind = "swad_fit_on_val"

    def __init__(self, val_eval: Callable[[np.ndarray], tuple[float, float]], eval_freq=1,
                 max_span: int = 20):
        super().__init__(eval_freq, dense=True)
        self.val_eval = val_eval
        self.max_span = max_span
        self.interval: AveragingInterval | None = None
        self.best_score: tuple[float, float] | None = None

    def finalize(self):
        self._require_observed()
        T = self.n_checkpoints
        if T == 0:
            return self.last.copy()
        dim = self.last.size
        sums = np.zeros((T + 1, dim))
        counts = np.zeros(T + 1)
        for c in range(1, T + 1):
            seg = self.segments[c].mean
            sums[c] = sums[c - 1] + seg.mean * seg.count
            counts[c] = counts[c - 1] + seg.count
        best = None
        for t_s in range(1, T + 1):
            for t_e in range(t_s, min(T, t_s + self.max_span) + 1):
                theta = (sums[t_e] - sums[t_s - 1]) / (counts[t_e] - counts[t_s - 1])
                loss, acc = self.val_eval(theta)
                key = (-acc, loss)
                if best is None or key < best[0]:
                    best = (key, t_s, t_e)
        (neg_acc, loss), t_s, t_e = best
        self.best_score = (-neg_acc, loss)
        self.interval = AveragingInterval(t_s, t_e, None)
        return self.average(self.interval)

    def report(self):
        rep = super().report()
        if self.interval is not None:
            rep.update(t_s=self.interval.t_s, t_e=self.interval.t_e)
            rep["val_accuracy"], rep["val_loss"] = self.best_score
        return rep


def make_variant(kind: str, *, swad: SwadConfig = SwadConfig(), k: int = 5,
                 start_fraction: float = 0.5, decay: float = 0.99, max_span: int = 20,
                 val_eval: Callable[[np.ndarray], tuple[float, float]] | None = None
                 ) -> AveragingStrategy:
    """Build the averaging strategy named ``kind``.

    ``k`` is the sparse sampling period in checkpoints (for ``swa_cyclic`` it
    is the cycle length in checkpoints). ``start_fraction`` is the warm-up
    share of training skipped by SWA and by ``swad_no_opt_overfit``.
    """
    f = swad.eval_freq
    if kind == "swad":
        return Swad(swad, kind=kind)
    if kind == "swad_no_dense":
        return Swad(swad, dense=False, k=k, kind=kind)
    if kind == "swad_no_overfit":
        return Swad(swad, detect_end=False, kind=kind)
    if kind == "swad_no_opt_overfit":
        return Swad(swad, fixed_start=start_fraction, kind=kind)
    if kind == "swad_fit_on_val":
        if val_eval is None:
            raise ValueError("swad_fit_on_val needs a validation evaluator")
        return SwadFitOnVal(val_eval, eval_freq=f, max_span=max_span)
    if kind == "swa_cyclic":
        return SwaSparse(f, mode="cyclic", k=k, start_fraction=start_fraction)
    if kind == "swa_constant":
        return SwaSparse(f, mode="constant", k=k, start_fraction=start_fraction)
    if kind == "erm_last":
        return ErmLast(f)
    if kind == "erm_best_val":
        return ErmBestVal(f)
    if kind == "ema":
        return Ema(f, decay=decay)
    raise ValueError(f"unknown averaging variant {kind!r}; expected one of {', '.join(VARIANTS)}")
