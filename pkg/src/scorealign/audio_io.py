"""WAV input/output and the in-memory mono signal type.

Only RIFF/WAVE with 16-bit PCM or 32-bit IEEE float samples is handled.
Stereo files are mixed down to mono by averaging the two channels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CANONICAL_RATE = 44100

WAVE_FORMAT_PCM = 1
WAVE_FORMAT_IEEE_FLOAT = 3


class WavFormatError(ValueError):
    """Raised for malformed or unsupported WAV data."""


class SampleRateError(ValueError):
    """Raised when a buffer does not have the required sample rate."""


@dataclass(frozen=True)
class AudioBuffer:
    """Mono audio signal with amplitudes in [-1, 1].

    The samples array is stored read-only so buffers can be shared freely.
    """

    samples: np.ndarray
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64, copy=True).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio samples must be finite")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    def __eq__(self, other):
        if not isinstance(other, AudioBuffer):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(
            self.samples, other.samples
        )

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def require_rate(buffer: AudioBuffer, rate: int = CANONICAL_RATE) -> AudioBuffer:
    """Return ``buffer`` unchanged if it is sampled at ``rate``; never resamples."""
    if buffer.sample_rate != rate:
        raise SampleRateError(
            f"sample rate mismatch: buffer is {buffer.sample_rate} Hz, "
            f"required {rate} Hz"
        )
    return buffer


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(
                f"chunk {chunk_id!r} at offset {pos} truncated "
                f"({len(body)} of {size} bytes)"
            )
        yield chunk_id, body
        # chunks are word aligned
        pos += 8 + size + (size & 1)


def decode_wav(data: bytes) -> AudioBuffer:
    """Decode an in-memory WAV file."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("not a RIFF/WAVE file")

    fmt = None
    payload = None
    for chunk_id, body in _iter_chunks(data):
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise WavFormatError("fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            payload = body
    if fmt is None:
        raise WavFormatError("missing fmt chunk")
    if payload is None:
        raise WavFormatError("missing data chunk")

    code, channels, rate, _byte_rate, block_align, bits = fmt
    if channels not in (1, 2):
        raise WavFormatError(f"unsupported channel count {channels}")
    if code == WAVE_FORMAT_PCM and bits == 16:
        dtype = np.dtype("<i2")
    elif code == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype = np.dtype("<f4")
    else:
        raise WavFormatError(f"unsupported codec {code} with {bits}-bit samples")
    if block_align != channels * dtype.itemsize:
        raise WavFormatError(f"inconsistent block align {block_align}")
    if len(payload) == 0:
        raise WavFormatError("zero-length data chunk")

    usable = len(payload) - len(payload) % block_align
    frames = np.frombuffer(payload[:usable], dtype=dtype).reshape(-1, channels)
    if dtype.kind == "i":
        frames = frames.astype(np.float64) / 32768.0
    else:
        frames = frames.astype(np.float64)
    mono = frames.mean(axis=1) if channels == 2 else frames[:, 0]
    return AudioBuffer(mono, rate)


def read_wav(path) -> AudioBuffer:
    """Read a PCM-16 or float-32 WAV file as a mono buffer."""
    return decode_wav(Path(path).read_bytes())


def encode_wav(buffer: AudioBuffer, format: str = "pcm16") -> bytes:
    """Encode ``buffer`` as a canonical 44-byte-header WAV file."""
    samples = buffer.samples
    if samples.size and np.max(np.abs(samples)) > 1.0:
        worst = int(np.argmax(np.abs(samples)))
        raise ValueError(
            f"sample {worst} out of range [-1, 1]: {samples[worst]!r}"
        )
    if format == "pcm16":
        code, bits = WAVE_FORMAT_PCM, 16
        ints = np.clip(np.round(samples * 32768.0), -32768, 32767)
        payload = ints.astype("<i2").tobytes()
    elif format == "float32":
        code, bits = WAVE_FORMAT_IEEE_FLOAT, 32
        payload = samples.astype("<f4").tobytes()
    else:
        raise ValueError(f"unknown WAV format {format!r}")

    block_align = bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH",
        16,
        code,
        1,
        buffer.sample_rate,
        buffer.sample_rate * block_align,
        block_align,
        bits,
    )
    header += b"data" + struct.pack("<I", len(payload))
    return header + payload


def write_wav(buffer: AudioBuffer, path, format: str = "pcm16") -> None:
    """Write ``buffer`` to ``path``; ``format`` is ``pcm16`` or ``float32``."""
    Path(path).write_bytes(encode_wav(buffer, format))
