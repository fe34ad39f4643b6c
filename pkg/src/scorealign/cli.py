"""Command-line front end.

    scorealign synth score.mid out.wav
    scorealign align perf.wav score.mid labels.csv --report path.csv
    scorealign validate perf.wav labels.csv out.wav
    scorealign featurize perf.wav out.fmat --kind log_spectrogram
    scorealign segments recordings.txt index.csv
    scorealign train recordings.txt mlp out.model
    scorealign eval out.model test.txt report.csv --validation val.txt
    scorealign export score.mid labels.csv

A recordings list holds one ``audio.wav labels.csv`` pair per line; paths
are relative to the list file. Settings come from ``--config FILE`` (lines
of ``section.key = value``) and ``--set section.key=value`` flags, flags
winning.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import shlex
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .align import (
    AlignConfig,
    MemoryBudgetError,
    align,
    transfer_labels,
    transfer_times,
    write_alignment_report,
)
from .audio_io import WavFormatError, read_wav, write_wav
from .dataset import (
    LabelFormatError,
    SegmentSpec,
    export_csv,
    import_csv,
    make_segments,
    score_labels,
)
from .dsp import FeatureKind, featurize, save_features
from .evaluation import evaluate, write_pr_curve, write_report_csv
from .models import (
    ConvModel,
    DimensionError,
    LinearModel,
    MLPModel,
    ModelFormatError,
    TrainConfig,
    TrainingDiverged,
    load_model,
    model_inputs,
    save_model,
    select_threshold,
    train,
    write_trace_csv,
)
from .score import MidiFormatError, read_midi
from .synth import SynthConfig, mix_validation, synthesize

logger = logging.getLogger("scorealign")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_FORMAT = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

THREADS_ENV = "SCOREALIGN_THREADS"


# --- configuration ---------------------------------------------------------


@dataclasses.dataclass
class ModelConfig:
    kind: str = "linear"
    feature_kind: str = "log_spectrogram"
    hidden: int = 500
    window: int = 2048
    receptive_field: int = 2048
    conv_stride: int = 8
    input_length: int = 16384
    pool_width: int = 16
    pool_stride: int = 8
    pool_kind: str = "average"


@dataclasses.dataclass
class EvalConfig:
    grid_size: int = 512


@dataclasses.dataclass
class RunSettings:
    seed: int = 0
    threads: int = 1
    audio_format: str = "pcm16"


SECTIONS = {
    "align": AlignConfig,
    "synth": SynthConfig,
    "segments": SegmentSpec,
    "train": TrainConfig,
    "model": ModelConfig,
    "eval": EvalConfig,
    "run": RunSettings,
}


class ConfigError(ValueError):
    pass


def _coerce(raw: str, default):
    text = raw.strip()
    if text.lower() in ("none", "null"):
        return None
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, FeatureKind):
        return FeatureKind.parse(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, (tuple, list)) or default is None and "," in text:
        return tuple(float(v) for v in text.split(",") if v.strip())
    if default is None:
        # optional numeric fields
        try:
            return int(text)
        except ValueError:
            return float(text)
    return text


def parse_config_lines(lines, source: str = "<config>") -> dict:
    """``{section: {key: raw_value}}`` from ``section.key = value`` lines."""
    out = {}
    for number, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected 'section.key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{source}:{number}: key {key!r} lacks a section")
        section, name = key.split(".", 1)
        out.setdefault(section, {})[name] = value
    return out


def resolve_config(layers) -> dict:
    """Apply raw ``{section: {key: value}}`` layers over the defaults.

    Unknown sections or keys raise :class:`ConfigError`.
    """
    merged = {}
    for layer in layers:
        for section, values in layer.items():
            merged.setdefault(section, {}).update(values)
    resolved = {}
    for section, cls in SECTIONS.items():
        defaults = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        given = merged.pop(section, {})
        unknown = sorted(set(given) - known)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
        kwargs = {}
        for name, raw in given.items():
            try:
                kwargs[name] = _coerce(raw, getattr(defaults, name))
            except ValueError as exc:
                raise ConfigError(f"{section}.{name}: {exc}") from None
        try:
            resolved[section] = dataclasses.replace(defaults, **kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    if merged:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(merged))}")
    resolved["align"] = dataclasses.replace(resolved["align"], synth=resolved["synth"])
    return resolved


def config_text(resolved: dict) -> str:
    lines = []
    for section, obj in resolved.items():
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if dataclasses.is_dataclass(value):
                continue
            if isinstance(value, FeatureKind):
                value = value.name.lower()
            lines.append(f"{section}.{f.name} = {value}")
    return "\n".join(lines)


def load_config(args) -> dict:
    layers = []
    if THREADS_ENV in os.environ:
        # environment default sits below the config file and flags
        layers.append(parse_config_lines([f"run.threads={os.environ[THREADS_ENV]}"], THREADS_ENV))
    if args.config:
        path = Path(args.config)
        layers.append(parse_config_lines(path.read_text().splitlines(), str(path)))
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides += [f"run.seed={args.seed}", f"train.seed={args.seed}"]
    if args.threads is not None:
        overrides.append(f"run.threads={args.threads}")
    layers.append(parse_config_lines(overrides, "--set"))
    resolved = resolve_config(layers)
    logger.info("resolved configuration:\n%s", config_text(resolved))
    return resolved


# --- recordings ------------------------------------------------------------


def read_recording_list(path) -> list:
    path = Path(path)
    pairs = []
    for number, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = shlex.split(line)
        if len(parts) != 2:
            raise LabelFormatError(f"{path}:{number}: expected 'audio.wav labels.csv'")
        pairs.append(tuple(path.parent / p for p in parts))
    if not pairs:
        raise LabelFormatError(f"{path}: no recordings listed")
    return pairs


def load_segments(list_path, spec: SegmentSpec) -> list:
    """Segment sets per recording, in list order."""
    return [make_segments(read_wav(wav), import_csv(csv_path), spec)
            for wav, csv_path in read_recording_list(list_path)]


def build_model(config: ModelConfig, seed: int):
    if config.kind == "linear":
        kind = FeatureKind.parse(config.feature_kind)
        dims = config.window if kind is FeatureKind.RAW else config.window // 2 + 1
        return LinearModel(dims, kind, config.window)
    if config.kind == "mlp":
        return MLPModel(config.hidden, config.window, seed=seed)
    if config.kind == "conv":
        return ConvModel(config.hidden, config.receptive_field, config.conv_stride,
                         config.input_length, config.pool_width, config.pool_stride,
                         config.pool_kind, seed=seed)
    raise ConfigError(f"unknown model kind {config.kind!r}")


def segment_window(model) -> int:
    return model.window if isinstance(model, (LinearModel, MLPModel)) else model.input_length


def stacked_inputs(model, segment_sets):
    xs = [model_inputs(model, s) for s in segment_sets]
    ys = [s.labels for s in segment_sets]
    return np.concatenate(xs), np.concatenate(ys)


# --- commands --------------------------------------------------------------


def cmd_synth(args, cfg) -> int:
    score = read_midi(args.score)
    audio = synthesize(score, cfg["align"].sample_rate, cfg["synth"])
    write_wav(audio, args.out, cfg["run"].audio_format)
    print(f"wrote {args.out}: {audio.duration:.3f} s, {len(score.events)} notes")
    return EXIT_OK


def cmd_align(args, cfg) -> int:
    performance = read_wav(args.performance)
    score = read_midi(args.score)
    config = cfg["align"]
    result = align(performance, score, config)
    starts, ends = transfer_times(result.path, score, config)
    labels = transfer_labels(result.path, score, config)
    export_csv(labels, args.out)
    if args.report:
        write_alignment_report(result, args.report)
    print(f"total cost: {result.total_cost:.6g}")
    print(f"mean tempo ratio: {result.mean_tempo_ratio:.4f}")
    if len(score.events):
        shift = np.abs(starts - [e.onset_seconds for e in score.events])
        print(f"median onset offset from score timing: {1000 * np.median(shift):.2f} ms")
    return EXIT_OK


def cmd_validate(args, cfg) -> int:
    performance = read_wav(args.performance)
    labels = import_csv(args.labels)
    mixed, clipped = mix_validation(performance, labels)
    write_wav(mixed, args.out, cfg["run"].audio_format)
    print(f"clipped samples: {clipped}")
    return EXIT_OK


def cmd_featurize(args, cfg) -> int:
    audio = read_wav(args.audio)
    align_cfg = cfg["align"]
    kind = args.kind if args.kind is not None else align_cfg.feature_kind
    feats = featurize(audio, kind, align_cfg.window, align_cfg.stride)
    save_features(feats, args.out)
    print(f"wrote {feats.frames} x {feats.dims} {feats.kind.name.lower()} features")
    return EXIT_OK


def cmd_segments(args, cfg) -> int:
    spec = cfg["segments"]
    total = 0
    with open(args.out, "w") as fh:
        fh.write("recording,center_sample,midpoint_s,notes\n")
        for rec, segs in enumerate(load_segments(args.recordings, spec)):
            for c, vec in zip(segs.centers, segs.labels):
                notes = " ".join(str(n) for n in np.flatnonzero(vec))
                fh.write(f"{rec},{int(c)},{c / segs.audio.sample_rate!r},{notes}\n")
            total += len(segs)
    print(f"{total} segments")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    model_cfg = dataclasses.replace(cfg["model"], kind=args.kind)
    model = build_model(model_cfg, cfg["run"].seed)
    spec = dataclasses.replace(cfg["segments"], window=segment_window(model))
    x, y = stacked_inputs(model, load_segments(args.recordings, spec))
    validation = None
    if args.validation:
        validation = stacked_inputs(model, load_segments(args.validation, spec))
    trace_path = Path(str(args.out) + ".trace.csv")
    try:
        result = train(model, x, y, cfg["train"], validation=validation)
    except TrainingDiverged as exc:
        write_trace_csv(exc.trace, trace_path)
        raise
    save_model(model, args.out)
    write_trace_csv(result.trace, trace_path)
    last = result.trace[-1]
    print(f"trained {model.kind} on {len(x)} segments; final train loss {last.train_loss:.6g}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    model = load_model(args.model)
    spec = dataclasses.replace(cfg["segments"], window=segment_window(model))
    grid = cfg["eval"].grid_size
    x, y = stacked_inputs(model, load_segments(args.test, spec))
    if args.threshold is not None:
        threshold = args.threshold
    elif args.validation:
        vx, vy = stacked_inputs(model, load_segments(args.validation, spec))
        threshold = select_threshold(model.forward(vx), vy, grid)
    else:
        raise ConfigError("give --threshold or --validation to fix the decision threshold")
    scores = model.forward(x)
    report = evaluate(scores, y, threshold, grid, subset=args.poly)
    write_report_csv(report, args.out)
    if args.pr_curve:
        write_pr_curve(report, args.pr_curve)
    sys.stdout.write(report.summary_text())
    return EXIT_OK


def cmd_export(args, cfg) -> int:
    labels = score_labels(read_midi(args.score))
    export_csv(labels, args.out, exact=not args.rounded)
    print(f"wrote {len(labels)} labels")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "align": cmd_align,
    "validate": cmd_validate,
    "featurize": cmd_featurize,
    "segments": cmd_segments,
    "train": cmd_train,
    "eval": cmd_eval,
    "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="file of 'section.key = value' lines")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help=f"default from ${THREADS_ENV}, else 1")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="scorealign", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a MIDI score to WAV")
    p.add_argument("score")
    p.add_argument("out")

    p = sub.add_parser("align", parents=[common], help="align a performance to its score")
    p.add_argument("performance")
    p.add_argument("score")
    p.add_argument("out", help="labels CSV")
    p.add_argument("--report", help="alignment path CSV")

    p = sub.add_parser("validate", parents=[common], help="mix label tones into audio")
    p.add_argument("performance")
    p.add_argument("labels")
    p.add_argument("out")

    p = sub.add_parser("featurize", parents=[common], help="write an FMAT feature file")
    p.add_argument("audio")
    p.add_argument("out")
    p.add_argument("--kind", type=FeatureKind.parse)

    p = sub.add_parser("segments", parents=[common], help="list labeled segments")
    p.add_argument("recordings")
    p.add_argument("out")

    p = sub.add_parser("train", parents=[common], help="train a note predictor")
    p.add_argument("recordings")
    p.add_argument("kind", choices=("linear", "mlp", "conv"))
    p.add_argument("out")
    p.add_argument("--validation", help="recordings list for the validation loss")

    p = sub.add_parser("eval", parents=[common], help="evaluate a trained model")
    p.add_argument("model")
    p.add_argument("test")
    p.add_argument("out", help="per-threshold report CSV")
    p.add_argument("--threshold", type=float)
    p.add_argument("--validation", help="recordings list used to choose the threshold")
    p.add_argument("--poly", type=int, metavar="K", help="only points with exactly K notes")
    p.add_argument("--pr-curve", help="two-column recall/precision file")

    p = sub.add_parser("export", parents=[common], help="labels CSV from score timing")
    p.add_argument("score")
    p.add_argument("out")
    p.add_argument("--rounded", action="store_true", help="omit the exact-time columns")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        with threadpool_limits(cfg["run"].threads):
            return COMMANDS[args.command](args, cfg)
    except (MidiFormatError, WavFormatError, LabelFormatError, ConfigError,
            DimensionError, ModelFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, MemoryBudgetError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        trace = getattr(exc, "trace", None)
        for row in trace or ():
            print(f"  epoch {row.epoch}: train loss {row.train_loss!r}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
