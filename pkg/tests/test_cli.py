import hashlib

import numpy as np
import pytest

from scorealign.audio_io import AudioBuffer, read_wav, write_wav
from scorealign.cli import main, parse_config_lines, resolve_config
from scorealign.dataset import LabelRecord, LabelSet, export_csv, import_csv
from scorealign.experiments import ConstantWarp, SyntheticSpec, generate_score, warp_score
from scorealign.score import Score, write_midi
from scorealign.synth import synthesize


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def midi(tmp_path):
    score = generate_score(SyntheticSpec(duration_s=6, polyphony=2, seed=2))
    path = tmp_path / "score.mid"
    path.write_bytes(write_midi(score))
    return path


@pytest.fixture
def recordings(tmp_path):
    """Two short rendered recordings with score-timed labels."""
    lines = []
    for seed in (1, 2):
        spec = SyntheticSpec(duration_s=4, pitches=(57, 60, 64), seed=seed)
        score = generate_score(spec)
        write_wav(synthesize(score), tmp_path / f"r{seed}.wav")
        (tmp_path / f"r{seed}.mid").write_bytes(write_midi(score))
        assert main(["export", str(tmp_path / f"r{seed}.mid"), str(tmp_path / f"r{seed}.csv")]) == 0
        lines.append(f"r{seed}.wav r{seed}.csv")
    (tmp_path / "train.txt").write_text(lines[0] + "\n")
    (tmp_path / "test.txt").write_text(lines[1] + "\n")
    return tmp_path


def test_synth_then_align_self(midi, tmp_path, capsys):
    wav = tmp_path / "perf.wav"
    assert main(["synth", str(midi), str(wav)]) == 0
    assert read_wav(wav).duration >= 5.5
    out = tmp_path / "labels.csv"
    assert main(["align", str(wav), str(midi), str(out), "--report", str(tmp_path / "r.csv")]) == 0
    text = capsys.readouterr().out
    assert "total cost" in text and "mean tempo ratio" in text
    median_ms = float(text.split("median onset offset from score timing:")[1].split()[0])
    assert median_ms < 12
    assert len(import_csv(out)) > 0


def test_half_tempo_ratio_reported(tmp_path, capsys):
    score = generate_score(SyntheticSpec(duration_s=8, polyphony=2, seed=4))
    (tmp_path / "s.mid").write_bytes(write_midi(score))
    write_wav(synthesize(warp_score(score, ConstantWarp(2.0))), tmp_path / "slow.wav")
    assert main(["align", str(tmp_path / "slow.wav"), str(tmp_path / "s.mid"),
                 str(tmp_path / "l.csv")]) == 0
    ratio = float(capsys.readouterr().out.split("mean tempo ratio:")[1].split()[0])
    assert 1.9 <= ratio <= 2.1


def test_empty_midi_gives_empty_wav(tmp_path):
    (tmp_path / "e.mid").write_bytes(write_midi(Score()))
    assert main(["synth", str(tmp_path / "e.mid"), str(tmp_path / "e.wav")]) == 0
    assert len((tmp_path / "e.wav").read_bytes()) == 44


def test_corrupt_midi_exit_2(tmp_path, capsys):
    (tmp_path / "bad.mid").write_bytes(b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x01\xe0MTrk\x00\x00\x00\x08\x00\x90")
    assert main(["synth", str(tmp_path / "bad.mid"), str(tmp_path / "o.wav")]) == 2
    assert "offset" in capsys.readouterr().err


def test_missing_file_exit_3(tmp_path, midi):
    assert main(["align", str(tmp_path / "nope.wav"), str(midi), str(tmp_path / "l.csv")]) == 3


def test_validate(tmp_path):
    write_wav(AudioBuffer(np.zeros(44100 * 2)), tmp_path / "p.wav")
    export_csv(LabelSet(), tmp_path / "empty.csv")
    assert main(["validate", str(tmp_path / "p.wav"), str(tmp_path / "empty.csv"), str(tmp_path / "o.wav")]) == 0
    assert (tmp_path / "o.wav").read_bytes()[44:] == (tmp_path / "p.wav").read_bytes()[44:]
    export_csv(LabelSet([LabelRecord(1.0, 1.2, 69)]), tmp_path / "one.csv")
    assert main(["validate", str(tmp_path / "p.wav"), str(tmp_path / "one.csv"), str(tmp_path / "o2.wav")]) == 0
    assert len(read_wav(tmp_path / "o2.wav")) == 44100 * 2


def test_validate_reports_clipping(tmp_path, capsys):
    write_wav(AudioBuffer(np.full(44100, 0.95)), tmp_path / "p.wav")
    export_csv(LabelSet([LabelRecord(0.5, 0.6, 69)]), tmp_path / "l.csv")
    assert main(["validate", str(tmp_path / "p.wav"), str(tmp_path / "l.csv"), str(tmp_path / "o.wav")]) == 0
    count = int(capsys.readouterr().out.split("clipped samples:")[1])
    mixed = read_wav(tmp_path / "o.wav").samples
    assert count > 0 and np.count_nonzero(mixed >= 32767 / 32768) >= count


def test_featurize(tmp_path):
    write_wav(AudioBuffer(np.zeros(10000)), tmp_path / "a.wav")
    assert main(["featurize", str(tmp_path / "a.wav"), str(tmp_path / "a.fmat"), "--kind", "relugram"]) == 0
    assert (tmp_path / "a.fmat").read_bytes()[:4] == b"FMAT"


def test_segments(recordings):
    out = recordings / "idx.csv"
    assert main(["segments", str(recordings / "train.txt"), str(out),
                 "--set", "segments.end_s=3.0"]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "recording,center_sample,midpoint_s,notes"
    centers = [int(r.split(",")[1]) for r in rows[1:]]
    assert set(np.diff(centers)) == {512}


def test_train_eval_and_determinism(recordings, capsys):
    model = recordings / "m.nmdl"
    args = ["train", str(recordings / "train.txt"), "linear", str(model), "--threads", "1",
            "--set", "train.epochs=3", "--set", "segments.end_s=3.0", "--seed", "5"]
    assert main(args) == 0
    first = digest(model)
    assert main(args) == 0
    assert digest(model) == first
    assert (recordings / "m.nmdl.trace.csv").read_text().count("\n") == 4
    report = recordings / "rep.csv"
    assert main(["eval", str(model), str(recordings / "test.txt"), str(report),
                 "--validation", str(recordings / "train.txt"), "--set", "segments.end_s=3.0"]) == 0
    out = capsys.readouterr().out
    assert "average_precision" in out and "mirex:" in out and "e_sub" in out
    assert report.read_text().startswith("threshold,precision,recall")
    assert main(["eval", str(model), str(recordings / "test.txt"), str(report),
                 "--threshold", "0.5", "--poly", "1", "--set", "segments.end_s=3.0"]) == 0
    assert "subset: Mono" in capsys.readouterr().out


def test_divergent_training_exit_4(recordings, capsys):
    args = ["train", str(recordings / "train.txt"), "mlp", str(recordings / "d.nmdl"),
            "--set", "train.learning_rate=1e6", "--set", "train.epochs=2",
            "--set", "model.hidden=4", "--set", "segments.end_s=3.0"]
    assert main(args) == 4
    assert "epoch" in capsys.readouterr().err


def test_eval_requires_threshold_source(recordings):
    model = recordings / "m.nmdl"
    assert main(["train", str(recordings / "train.txt"), "linear", str(model),
                 "--set", "train.epochs=1", "--set", "segments.end_s=3.0"]) == 0
    assert main(["eval", str(model), str(recordings / "test.txt"), str(recordings / "r.csv")]) == 2


def test_config_file_and_overrides(tmp_path, monkeypatch):
    (tmp_path / "c.cfg").write_text("# sweep\nalign.norm = L1\nalign.cutoff_dims = 40\ntrain.epochs=7\n")
    layers = [parse_config_lines((tmp_path / "c.cfg").read_text().splitlines()),
              parse_config_lines(["align.cutoff_dims=30"])]
    cfg = resolve_config(layers)
    assert (cfg["align"].norm, cfg["align"].cutoff_dims, cfg["train"].epochs) == ("L1", 30, 7)


def test_unknown_keys_rejected(midi, tmp_path):
    assert main(["synth", str(midi), str(tmp_path / "o.wav"), "--set", "align.bogus=1"]) == 2
    assert main(["synth", str(midi), str(tmp_path / "o.wav"), "--set", "nosuch.key=1"]) == 2


def test_thread_env_default(monkeypatch, midi, tmp_path):
    monkeypatch.setenv("SCOREALIGN_THREADS", "2")
    from scorealign import cli

    seen = {}
    real = cli.threadpool_limits

    def spy(limits):
        seen["limits"] = limits
        return real(limits)

    monkeypatch.setattr(cli, "threadpool_limits", spy)
    assert main(["synth", str(midi), str(tmp_path / "o.wav")]) == 0
    assert seen["limits"] == 2
    assert main(["synth", str(midi), str(tmp_path / "o.wav"), "--threads", "1"]) == 0
    assert seen["limits"] == 1


def test_align_hash_is_stable(midi, tmp_path):
    wav = tmp_path / "p.wav"
    assert main(["synth", str(midi), str(wav)]) == 0
    hashes = []
    for k in range(2):
        out = tmp_path / f"l{k}.csv"
        assert main(["align", str(wav), str(midi), str(out), "--threads", "1"]) == 0
        hashes.append(digest(out))
    assert hashes[0] == hashes[1]
