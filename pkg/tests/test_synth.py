import numpy as np
import pytest
from scipy.signal import find_peaks

from scorealign.audio_io import AudioBuffer
from scorealign.dataset import LabelRecord, LabelSet
from scorealign.dsp import featurize, spec_window
from scorealign.score import Score, build_score, score_from_beats
from scorealign.synth import (
    SynthConfig,
    envelope,
    mix_validation,
    render_note,
    synthesize,
    synthesize_raw,
)


def test_empty_score_is_silent():
    assert len(synthesize(Score())) == 0
    tail = synthesize(Score(), config=SynthConfig(tail_s=0.5))
    assert len(tail) == 22050 and not tail.samples.any()


def test_single_a4_peak_bin():
    audio = synthesize(score_from_beats([(69, 0, 2)]))
    assert audio.duration == pytest.approx(1.0, abs=1e-4)
    feats = featurize(audio, "spectrogram", 2048, 512)
    assert set(np.argmax(feats.data[1:-1], axis=1)) <= {20, 21}


def test_two_note_peaks():
    audio = synthesize(score_from_beats([(60, 0, 2), (67, 0, 2)]))
    frame = featurize(audio, "log_spectrogram", 2048, 512).data[20]
    peaks, _ = find_peaks(frame)
    for f0 in (261.6, 392.0):
        k = f0 * 2048 / 44100
        assert np.any(np.abs(peaks - k) <= 1.5), f0


def test_peak_normalized():
    audio = synthesize(score_from_beats([(60, 0, 1), (64, 0, 1), (67, 0, 1)]))
    assert np.max(np.abs(audio.samples)) == pytest.approx(0.9)


def test_fixed_gain_overflow_rejected():
    with pytest.raises(ValueError):
        synthesize(score_from_beats([(60, 0, 1), (64, 0, 1), (67, 0, 1)]),
                   config=SynthConfig(gain=10.0))


def test_linearity_on_disjoint_events():
    a = build_score([(60, 0, 480, 0, 0, 0)])
    b = build_score([(67, 960, 480, 0, 0, 0)])
    ab = build_score([(60, 0, 480, 0, 0, 0), (67, 960, 480, 0, 0, 0)])
    ra, rb, rab = (synthesize_raw(s) for s in (a, b, ab))
    total = np.zeros(len(rab))
    total[: len(ra)] += ra
    total[: len(rb)] += rb
    np.testing.assert_allclose(rab, total, atol=1e-9)


def test_harmonics_above_nyquist_dropped():
    # 127 -> 12543.9 Hz; only h = 1 stays below 22050 Hz
    note = render_note(127, 4096, 44100, SynthConfig(harmonics=8, attack_s=0, release_s=0))
    f0 = 440 * 2 ** ((127 - 69) / 12)
    np.testing.assert_allclose(note, np.sin(2 * np.pi * f0 * np.arange(4096) / 44100), atol=1e-9)


def test_envelope_shape():
    env = envelope(1000, 1000, 0.1, 0.2)
    assert env[0] == pytest.approx(0.01)
    assert env[500] == 1.0
    assert env[-1] == pytest.approx(1 / 200)
    assert np.all((env >= 0) & (env <= 1))
    short = envelope(10, 1000, 0.1, 0.2)
    assert np.all(short < 1)


def test_mix_validation_identity_cases(rng):
    perf = AudioBuffer(rng.uniform(-0.5, 0.5, 44100 * 2))
    out, clipped = mix_validation(perf, LabelSet([]))
    assert out == perf and clipped == 0
    labels = LabelSet([LabelRecord(1.0, 1.5, 69)])
    out, _ = mix_validation(perf, labels, tone_gain=0.0)
    assert out == perf


def test_mix_validation_locality_and_pitch():
    perf = AudioBuffer(np.zeros(44100 * 2))
    out, clipped = mix_validation(perf, LabelSet([LabelRecord(1.0, 1.5, 69)]))
    assert len(out) == len(perf) and clipped == 0
    changed = np.flatnonzero(out.samples != perf.samples)
    assert changed.min() >= 44100 and changed.max() < 44100 + 4410
    window = out.samples[44100:44100 + 4096]
    k = np.argmax(spec_window(window))
    assert k == round(440 * 4096 / 44100)


def test_mix_validation_clip_count():
    perf = AudioBuffer(np.full(44100, 0.95))
    out, clipped = mix_validation(perf, LabelSet([LabelRecord(0.2, 0.3, 69)]))
    raw = np.array(perf.samples)
    # recompute without saturation to count directly
    t = np.arange(4410) / 44100
    env = envelope(4410, 44100, 0.005, 0.005)
    raw[8820:8820 + 4410] += 0.2 * np.sin(2 * np.pi * 440 * t) * env
    assert clipped == int(np.count_nonzero(np.abs(raw) > 1))
    assert clipped > 0 and np.max(out.samples) <= 1.0


def test_mix_validation_rejects_late_label():
    with pytest.raises(ValueError):
        mix_validation(AudioBuffer(np.zeros(100)), LabelSet([LabelRecord(1.0, 1.2, 60)]))
