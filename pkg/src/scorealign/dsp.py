"""Frame-level spectral features: spectrogram, log-spectrogram, ReLUgram.

Every frame is a rectangular (unwindowed) slice of the signal. For a frame
``x`` of length ``t`` and bin ``k`` in ``0..t/2``:

    spectrogram  = (sum_s cos(2 pi k s / t) x_s)^2 + (sum_s sin(2 pi k s / t) x_s)^2
    ReLUgram     = |sum_s cos(2 pi k s / t) x_s| + |sum_s sin(2 pi k s / t) x_s|

The log kinds apply ``y -> log(1 + y)`` elementwise.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio_io import AudioBuffer

ALLOWED_WINDOWS = (512, 1024, 2048, 4096, 8192, 16384)

FEATURE_MAGIC = b"FMAT"
FEATURE_VERSION = 1

# frames per rfft call; bounds peak memory for long recordings
_CHUNK_FRAMES = 2048


class FeatureKind(enum.IntEnum):
    SPECTROGRAM = 0
    LOG_SPECTROGRAM = 1
    RELUGRAM = 2
    LOG_RELUGRAM = 3
    RAW = 4

    @classmethod
    def parse(cls, value) -> "FeatureKind":
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        key = str(value).strip().replace("-", "_").upper()
        aliases = {"LOGSPECTROGRAM": "LOG_SPECTROGRAM", "LOGRELUGRAM": "LOG_RELUGRAM"}
        key = aliases.get(key, key)
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown feature kind {value!r}") from None

    @property
    def is_log(self) -> bool:
        return self in (FeatureKind.LOG_SPECTROGRAM, FeatureKind.LOG_RELUGRAM)


@dataclass(frozen=True)
class FeatureMatrix:
    data: np.ndarray  # frames x dims
    kind: FeatureKind
    window: int
    stride: int
    sample_rate: int

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> int:
        return self.data.shape[1]

    def frame_center_seconds(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=np.float64)
        return (index * self.stride + self.window / 2) / self.sample_rate


def _check_window(t: int) -> None:
    if t < 2 or t % 2:
        raise ValueError(f"window length must be even and >= 2, got {t}")


def spec_window(x) -> np.ndarray:
    """Power spectrum of one frame, bins ``0..t/2``."""
    x = np.asarray(x, dtype=np.float64)
    _check_window(x.shape[-1])
    spectrum = np.fft.rfft(x)
    return spectrum.real ** 2 + spectrum.imag ** 2


def relugram_window(x) -> np.ndarray:
    """Sum of absolute cosine and sine projections of one frame."""
    x = np.asarray(x, dtype=np.float64)
    _check_window(x.shape[-1])
    spectrum = np.fft.rfft(x)
    return np.abs(spectrum.real) + np.abs(spectrum.imag)


def bin_frequency(k, window: int, sample_rate: int = 44100) -> float:
    """Center frequency in Hz of spectral bin ``k``."""
    if not 0 <= k <= window // 2:
        raise ValueError(f"bin {k} out of range 0..{window // 2}")
    return k * sample_rate / window


def frame_count(length: int, window: int, stride: int) -> int:
    if length < window:
        return 0
    return (length - window) // stride + 1


def frame_features(frames, kind=FeatureKind.LOG_SPECTROGRAM) -> np.ndarray:
    """Features of a stack of frames, one row per frame."""
    kind = FeatureKind.parse(kind)
    if kind is FeatureKind.RAW:
        return np.array(frames, dtype=np.float64)
    if kind in (FeatureKind.SPECTROGRAM, FeatureKind.LOG_SPECTROGRAM):
        out = spec_window(frames)
    else:
        out = relugram_window(frames)
    if kind.is_log:
        out = np.log1p(out)
    return out


def featurize(
    audio: AudioBuffer,
    kind=FeatureKind.LOG_SPECTROGRAM,
    window: int = 2048,
    stride: int = 512,
) -> FeatureMatrix:
    """Frame ``audio`` with the given window/stride and compute ``kind``.

    Frame ``f`` covers samples ``[f * stride, f * stride + window)``.
    """
    kind = FeatureKind.parse(kind)
    if window not in ALLOWED_WINDOWS:
        raise ValueError(f"window {window} not in {ALLOWED_WINDOWS}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n = frame_count(len(audio), window, stride)
    if n == 0:
        raise ValueError(
            f"audio of {len(audio)} samples is shorter than the {window}-sample window"
        )
    frames = sliding_window_view(audio.samples, window)[::stride][:n]
    dims = window if kind is FeatureKind.RAW else window // 2 + 1
    data = np.empty((n, dims), dtype=np.float64)
    for start in range(0, n, _CHUNK_FRAMES):
        stop = min(start + _CHUNK_FRAMES, n)
        data[start:stop] = frame_features(frames[start:stop], kind)
    return FeatureMatrix(data, kind, window, stride, audio.sample_rate)


def save_features(features: FeatureMatrix, path) -> None:
    """Write the FMAT container: 8 little-endian uint32 header fields
    (magic, version, kind, window, stride, rate, frames, dims) + float32 rows."""
    header = FEATURE_MAGIC + struct.pack(
        "<7I",
        FEATURE_VERSION,
        int(features.kind),
        features.window,
        features.stride,
        features.sample_rate,
        features.frames,
        features.dims,
    )
    body = np.ascontiguousarray(features.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_features(path) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC or len(raw) < 32:
        raise ValueError("not an FMAT feature file")
    version, kind, window, stride, rate, frames, dims = struct.unpack("<7I", raw[4:32])
    if version != FEATURE_VERSION:
        raise ValueError(f"unsupported FMAT version {version}")
    expected = frames * dims * 4
    if len(raw) - 32 != expected:
        raise ValueError(f"FMAT body holds {len(raw) - 32} bytes, expected {expected}")
    data = np.frombuffer(raw[32:], dtype="<f4").reshape(frames, dims).astype(np.float64)
    return FeatureMatrix(data, FeatureKind(kind), window, stride, rate)
