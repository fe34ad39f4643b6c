"""Score-to-performance alignment by dynamic time warping.

The score is rendered with :mod:`scorealign.synth`, both signals are
featurized, and the frame-to-frame cost is a norm of the feature
difference restricted to the lowest ``cutoff_dims`` bins. The warping path
uses the step set {(1, 0), (0, 1), (1, 1)} and runs corner to corner.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from .audio_io import CANONICAL_RATE, AudioBuffer, require_rate
from .dataset import LabelRecord, LabelSet
from .dsp import FeatureKind, FeatureMatrix, featurize
from .score import Score
from .synth import SynthConfig, synthesize

logger = logging.getLogger(__name__)

NORMS = {"L1": "cityblock", "L2": "euclidean", "LINF": "chebyshev"}


class MemoryBudgetError(MemoryError):
    def __init__(self, required: int, budget: int):
        self.required = required
        self.budget = budget
        super().__init__(
            f"alignment needs {required} bytes for its cost and accumulation "
            f"matrices, over the budget of {budget} bytes"
        )


@dataclass(frozen=True)
class AlignConfig:
    window: int = 2048
    stride: int = 512
    cutoff_dims: int = 50
    feature_kind: FeatureKind = FeatureKind.LOG_SPECTROGRAM
    norm: str = "L2"
    sample_rate: int = CANONICAL_RATE
    band_radius: Optional[int] = None
    memory_budget_bytes: int = 2 * 1024 ** 3
    # half-width, in score frames, of the slope estimate
    tempo_window: int = 43
    # "path": map offsets through the warping path; "scaled": onset plus
    # score duration times the local tempo ratio
    offset_mode: str = "path"
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        object.__setattr__(self, "feature_kind", FeatureKind.parse(self.feature_kind))
        object.__setattr__(self, "norm", self.norm.upper())
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}; choose L1, L2 or Linf")
        if self.cutoff_dims < 1 or self.cutoff_dims > self.window // 2 + 1:
            raise ValueError(
                f"cutoff_dims must lie in 1..{self.window // 2 + 1}, got {self.cutoff_dims}"
            )
        if self.offset_mode not in ("path", "scaled"):
            raise ValueError(f"unknown offset mode {self.offset_mode!r}")


@dataclass(frozen=True)
class WarpPath:
    """Monotone ``(score_frame, performance_frame)`` pairs from (0, 0) to
    (n-1, m-1)."""

    pairs: np.ndarray  # k x 2 int
    total_cost: float

    def __len__(self) -> int:
        return self.pairs.shape[0]

    @property
    def shape(self):
        return int(self.pairs[-1, 0]) + 1, int(self.pairs[-1, 1]) + 1

    def first_performance_frame(self) -> np.ndarray:
        """For each score frame, the first performance frame paired with it."""
        n = self.shape[0]
        out = np.full(n, -1, dtype=np.int64)
        i = self.pairs[:, 0]
        # pairs are sorted by score frame, so the first occurrence wins
        first = np.r_[True, i[1:] != i[:-1]]
        out[i[first]] = self.pairs[first, 1]
        return out

    def mean_performance_frame(self) -> np.ndarray:
        n = self.shape[0]
        sums = np.bincount(self.pairs[:, 0], weights=self.pairs[:, 1], minlength=n)
        counts = np.bincount(self.pairs[:, 0], minlength=n)
        return sums / counts


def frame_cost(x, y, config: AlignConfig = AlignConfig()) -> float:
    """Norm of ``x - y`` over the first ``cutoff_dims`` coordinates."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    c = config.cutoff_dims
    if x.shape[-1] < c or y.shape[-1] < c:
        raise ValueError(
            f"frames have {x.shape[-1]} and {y.shape[-1]} dims, cutoff needs {c}"
        )
    d = np.abs(x[:c] - y[:c])
    if config.norm == "L1":
        return float(d.sum())
    if config.norm == "LINF":
        return float(d.max())
    return float(np.sqrt(np.sum(d * d)))


def cost_matrix(score_features, performance_features,
                config: AlignConfig = AlignConfig()) -> np.ndarray:
    """Pairwise frame costs, rows indexed by score frame."""
    a = _as_array(score_features)
    b = _as_array(performance_features)
    c = config.cutoff_dims
    if a.shape[1] < c or b.shape[1] < c:
        raise ValueError(f"features have fewer than cutoff_dims={c} dims")
    return cdist(a[:, :c], b[:, :c], metric=NORMS[config.norm])


def _as_array(features) -> np.ndarray:
    if isinstance(features, FeatureMatrix):
        return features.data
    return np.asarray(features, dtype=np.float64)


def band_mask(n: int, m: int, radius: int) -> np.ndarray:
    """Cells within ``radius`` performance frames of the corner-to-corner line."""
    i = np.arange(n)[:, None]
    j = np.arange(m)[None, :]
    slope = (m - 1) / (n - 1) if n > 1 else 0.0
    return np.abs(j - i * slope) <= radius + 0.5 * max(slope, 1.0)


def accumulate(cost: np.ndarray) -> np.ndarray:
    """Accumulated DTW cost, filled one anti-diagonal at a time."""
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    acc[0, 0] = cost[0, 0]
    for d in range(1, n + m - 1):
        i = np.arange(max(0, d - m + 1), min(n - 1, d) + 1)
        j = d - i
        best = np.full(i.size, np.inf)
        has_up = i > 0
        has_left = j > 0
        both = has_up & has_left
        best[has_up] = acc[i[has_up] - 1, j[has_up]]
        best[has_left] = np.minimum(best[has_left], acc[i[has_left], j[has_left] - 1])
        best[both] = np.minimum(best[both], acc[i[both] - 1, j[both] - 1])
        acc[i, j] = cost[i, j] + best
    return acc


def backtrack(acc: np.ndarray) -> np.ndarray:
    """Trace back from the far corner; ties prefer the diagonal step, then
    the performance-advance step, then the score-advance step."""
    i, j = acc.shape[0] - 1, acc.shape[1] - 1
    path = [(i, j)]
    while i > 0 or j > 0:
        options = []
        if i > 0 and j > 0:
            options.append((acc[i - 1, j - 1], i - 1, j - 1))
        if j > 0:
            options.append((acc[i, j - 1], i, j - 1))
        if i > 0:
            options.append((acc[i - 1, j], i - 1, j))
        best = options[0]
        for option in options[1:]:
            if option[0] < best[0]:
                best = option
        _, i, j = best
        path.append((i, j))
    path.reverse()
    return np.array(path, dtype=np.int64)


def dtw(cost, band_radius: Optional[int] = None) -> WarpPath:
    """Minimum-cost monotone corner-to-corner path through ``cost``."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] == 0 or cost.shape[1] == 0:
        raise ValueError(f"cost matrix must be non-empty 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    if np.any(cost < 0):
        raise ValueError("cost matrix contains negative entries")
    if band_radius is not None:
        cost = np.where(band_mask(*cost.shape, band_radius), cost, np.inf)
    acc = accumulate(cost)
    total = float(acc[-1, -1])
    if not np.isfinite(total):
        raise ValueError("no path fits inside the band; increase band_radius")
    return WarpPath(backtrack(acc), total)


def tempo_ratios(path: WarpPath, half_width: int = 43) -> np.ndarray:
    """Instantaneous performance/score tempo ratio along the score axis,
    estimated as the path slope over ``2 * half_width`` score frames."""
    position = path.mean_performance_frame()
    n = position.size
    if n < 2:
        return np.ones(n)
    k = np.arange(n)
    lo = np.clip(k - half_width, 0, n - 1)
    hi = np.clip(k + half_width, 0, n - 1)
    return (position[hi] - position[lo]) / (hi - lo)


@dataclass
class AlignmentResult:
    path: WarpPath
    tempo_ratio: np.ndarray
    score_frames: int
    performance_frames: int
    cost: Optional[np.ndarray] = None

    @property
    def total_cost(self) -> float:
        return self.path.total_cost

    @property
    def mean_tempo_ratio(self) -> float:
        return float(np.mean(self.tempo_ratio))

    @property
    def median_tempo_ratio(self) -> float:
        return float(np.median(self.tempo_ratio))


def align(performance: AudioBuffer, score: Score,
          config: AlignConfig = AlignConfig()) -> AlignmentResult:
    """Align ``performance`` to a synthesis of ``score``."""
    require_rate(performance, config.sample_rate)
    if len(score) == 0:
        raise ValueError("cannot align an empty score")
    rendered = synthesize(score, config.sample_rate, config.synth)
    if len(rendered) < config.window:
        # very short scores still need one full frame
        rendered = AudioBuffer(
            np.pad(rendered.samples, (0, config.window - len(rendered))),
            rendered.sample_rate,
        )
    score_feats = featurize(rendered, config.feature_kind, config.window, config.stride)
    perf_feats = featurize(performance, config.feature_kind, config.window, config.stride)
    n, m = score_feats.frames, perf_feats.frames
    required = 2 * n * m * 8
    if required > config.memory_budget_bytes:
        raise MemoryBudgetError(required, config.memory_budget_bytes)
    logger.info("aligning %d score frames to %d performance frames", n, m)
    cost = cost_matrix(score_feats, perf_feats, config)
    path = dtw(cost, config.band_radius)
    return AlignmentResult(path, tempo_ratios(path, config.tempo_window), n, m, cost)


def _frame_of(seconds: float, config: AlignConfig) -> float:
    return (seconds * config.sample_rate - config.window / 2) / config.stride


def _frame_center(j, config: AlignConfig):
    return (j * config.stride + config.window / 2) / config.sample_rate


def transfer_times(path: WarpPath, score: Score,
                   config: AlignConfig = AlignConfig()):
    """Performance ``(starts, ends)`` in seconds for each score event, in
    score event order."""
    n, _ = path.shape
    first = path.first_performance_frame()
    ratios = tempo_ratios(path, config.tempo_window)
    # onsets may sit up to half a window past the last frame center
    slack = config.window / (2 * config.stride) + 1
    min_len = config.stride / config.sample_rate
    starts = np.empty(len(score.events))
    ends = np.empty(len(score.events))
    for k, event in enumerate(score.events):
        raw = _frame_of(event.onset_seconds, config)
        if raw > n - 1 + slack:
            raise ValueError(
                f"event {event.midi_note} at {event.onset_seconds:.3f}s lies beyond "
                f"the aligned region of {n} score frames"
            )
        i_on = int(np.clip(np.round(raw), 0, n - 1))
        start = float(_frame_center(first[i_on], config))
        if config.offset_mode == "path":
            i_off = int(np.clip(np.round(_frame_of(event.offset_seconds, config)), 0, n - 1))
            end = float(_frame_center(first[i_off], config))
        else:
            end = start + event.duration_seconds * float(ratios[i_on])
        starts[k] = start
        ends[k] = max(end, start + min_len)
    return starts, ends


def transfer_labels(path: WarpPath, score: Score,
                    config: AlignConfig = AlignConfig()) -> LabelSet:
    """Move score events onto performance time through ``path``."""
    starts, ends = transfer_times(path, score, config)
    return LabelSet(
        LabelRecord(
            start_s=float(start),
            end_s=float(end),
            midi_note=event.midi_note,
            instrument=event.instrument,
            measure=event.measure,
            beat=event.beat,
            note_value=event.note_value,
        )
        for event, start, end in zip(score.events, starts, ends)
    )


def write_alignment_report(result: AlignmentResult, path):
    """CSV of path cells preceded by ``#`` summary lines."""
    cost = result.cost
    with open(path, "w") as fh:
        fh.write(f"# total_cost={result.total_cost!r}\n")
        fh.write(f"# mean_tempo_ratio={result.mean_tempo_ratio!r}\n")
        fh.write(f"# median_tempo_ratio={result.median_tempo_ratio!r}\n")
        fh.write(f"# score_frames={result.score_frames}\n")
        fh.write(f"# performance_frames={result.performance_frames}\n")
        fh.write("score_frame,performance_frame,cost\n")
        for i, j in result.path.pairs:
            c = repr(float(cost[i, j])) if cost is not None else ""
            fh.write(f"{i},{j},{c}\n")
