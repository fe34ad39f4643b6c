"""Additive synthesis of scores and sine-tone validation mixes.

Each note is rendered as a sum of harmonics ``h = 1..H`` with amplitude
``1 / h**decay`` under a linear attack/release envelope. Harmonics at or
above the Nyquist frequency are dropped, never aliased.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .audio_io import CANONICAL_RATE, AudioBuffer
from .score import Score, note_frequency

logger = logging.getLogger(__name__)

PEAK_LEVEL = 0.9


@dataclass(frozen=True)
class SynthConfig:
    harmonics: int = 8
    amplitude_decay: float = 1.0
    # explicit per-harmonic amplitudes; overrides the 1/h**decay rule
    harmonic_weights: Optional[Sequence[float]] = None
    attack_s: float = 0.01
    release_s: float = 0.05
    # None: peak-normalize to PEAK_LEVEL; otherwise a fixed linear gain
    gain: Optional[float] = None
    tail_s: float = 0.0

    def __post_init__(self):
        if self.harmonics < 1:
            raise ValueError("harmonics must be >= 1")
        if self.attack_s < 0 or self.release_s < 0 or self.tail_s < 0:
            raise ValueError("envelope times must be non-negative")
        if self.gain is not None and self.gain <= 0:
            raise ValueError("gain must be positive")
        if self.harmonic_weights is not None:
            object.__setattr__(self, "harmonic_weights", tuple(self.harmonic_weights))

    def weights(self) -> np.ndarray:
        if self.harmonic_weights is not None:
            w = np.zeros(self.harmonics)
            given = np.asarray(self.harmonic_weights[: self.harmonics], dtype=float)
            w[: given.size] = given
            return w
        h = np.arange(1, self.harmonics + 1, dtype=np.float64)
        return 1.0 / h ** self.amplitude_decay


def envelope(n: int, sample_rate: int, attack_s: float, release_s: float) -> np.ndarray:
    """Linear attack/release over ``n`` samples; ramps are cut, not
    rescaled, when the note is shorter than ``attack_s + release_s``."""
    t = np.arange(n, dtype=np.float64)
    env = np.ones(n)
    attack = attack_s * sample_rate
    release = release_s * sample_rate
    if attack > 0:
        env = np.minimum(env, (t + 1) / attack)
    if release > 0:
        env = np.minimum(env, (n - t) / release)
    return np.clip(env, 0.0, 1.0)


def render_note(
    midi_note: int, n: int, sample_rate: int, config: SynthConfig
) -> np.ndarray:
    f0 = note_frequency(midi_note)
    weights = config.weights()
    t = np.arange(n, dtype=np.float64) / sample_rate
    out = np.zeros(n)
    for h, w in enumerate(weights, start=1):
        if h * f0 >= sample_rate / 2:
            break
        if w != 0.0:
            out += w * np.sin(2.0 * np.pi * h * f0 * t)
    return out * envelope(n, sample_rate, config.attack_s, config.release_s)


def synthesize_raw(
    score: Score, sample_rate: int = CANONICAL_RATE, config: SynthConfig = SynthConfig()
) -> np.ndarray:
    """Sum of rendered notes before any gain is applied."""
    total = int(np.ceil((score.end_seconds + config.tail_s) * sample_rate))
    out = np.zeros(total)
    for event in score.events:
        start = int(round(event.onset_seconds * sample_rate))
        stop = min(int(round(event.offset_seconds * sample_rate)), total)
        if stop <= start:
            continue
        out[start:stop] += render_note(event.midi_note, stop - start, sample_rate, config)
    return out


def synthesize(
    score: Score, sample_rate: int = CANONICAL_RATE, config: SynthConfig = SynthConfig()
) -> AudioBuffer:
    """Render ``score`` to audio, peak-normalized to 0.9 unless a fixed gain
    is configured."""
    raw = synthesize_raw(score, sample_rate, config)
    peak = float(np.max(np.abs(raw))) if raw.size else 0.0
    if config.gain is None:
        if peak > 0:
            raw *= PEAK_LEVEL / peak
    else:
        raw *= config.gain
        if raw.size and np.max(np.abs(raw)) > 1.0:
            raise ValueError(
                f"fixed gain {config.gain} drives the peak to {peak * config.gain:.3f}"
            )
    return AudioBuffer(raw, sample_rate)


def mix_validation(
    performance: AudioBuffer,
    labels,
    tone_s: float = 0.1,
    tone_gain: float = 0.2,
    fade_s: float = 0.005,
):
    """Overlay a short sine at each label's pitch and start time.

    Returns ``(mixed_buffer, clipped_count)``; samples beyond +-1 are
    saturated and counted.
    """
    sr = performance.sample_rate
    out = np.array(performance.samples, dtype=np.float64)
    duration = len(performance) / sr
    n_tone = int(round(tone_s * sr))
    for record in labels:
        if record.start_s > duration:
            raise ValueError(
                f"label at {record.start_s:.3f}s lies beyond the audio end "
                f"({duration:.3f}s)"
            )
        start = int(round(record.start_s * sr))
        stop = min(start + n_tone, len(out))
        if stop <= start or tone_gain == 0:
            continue
        t = np.arange(stop - start) / sr
        tone = tone_gain * np.sin(2 * np.pi * note_frequency(record.midi_note) * t)
        out[start:stop] += tone * envelope(n_tone, sr, fade_s, fade_s)[: stop - start]
    clipped = int(np.count_nonzero(np.abs(out) > 1.0))
    if clipped:
        logger.warning("validation mix saturated %d samples", clipped)
        np.clip(out, -1.0, 1.0, out=out)
    return AudioBuffer(out, sr), clipped
