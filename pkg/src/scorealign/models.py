"""Note predictors trained by minibatch SGD on square loss.

Three model families share one interface (``forward``, ``loss_and_grad``,
``params``):

* :class:`LinearModel` regresses the 128 note indicators on a feature
  vector (for example a log-spectrogram frame);
* :class:`MLPModel` learns features ``log(1 + max(0, w_i . x))`` directly
  from raw samples and regresses on them;
* :class:`ConvModel` applies the same learned filters at strided positions
  across a longer window, pools them, and regresses on all pooled features.

A note is predicted when its score exceeds a threshold chosen to maximize
F1 on held-out data.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dsp import FeatureKind, bin_frequency, frame_features, spec_window
from .evaluation import counts_at_thresholds, f1_score

logger = logging.getLogger(__name__)

N_OUT = 128
DIVERGENCE_LOSS = 1e6

MODEL_MAGIC = b"NMDL"
MODEL_VERSION = 1
_KIND_CODES = {"linear": 0, "mlp": 1, "conv": 2}


class TrainingDiverged(ArithmeticError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


class DimensionError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


def _uniform_init(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def _log_relu(z: np.ndarray, use_log: bool = True) -> np.ndarray:
    r = np.maximum(z, 0.0)
    return np.log1p(r) if use_log else r


def _log_relu_grad(z: np.ndarray, use_log: bool = True) -> np.ndarray:
    # subgradient 0 at the kink
    active = z > 0
    if use_log:
        return active / (1.0 + np.maximum(z, 0.0))
    return active.astype(np.float64)


class _Model:
    kind = ""
    # names of weight matrices subject to l2 regularization
    regularized: tuple = ()

    def params(self) -> dict:
        raise NotImplementedError

    def input_dim(self) -> int:
        raise NotImplementedError

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.input_dim():
            raise DimensionError(
                f"{self.kind} model expects inputs of dimension {self.input_dim()}, "
                f"got {x.shape[1]}"
            )
        return x

    def forward(self, x) -> np.ndarray:
        raise NotImplementedError

    def weight_penalty(self) -> float:
        p = self.params()
        return float(sum(np.sum(p[name] ** 2) for name in self.regularized))

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__.update(
            {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}
        )
        return clone


class LinearModel(_Model):
    """``y_hat = ((f - mean) / scale) W + b``.

    ``mean``/``scale`` standardize features; they default to the identity and
    are fitted from training data, not learned by SGD.
    """

    kind = "linear"
    regularized = ("weights",)

    def __init__(self, dims: int, feature_kind=FeatureKind.LOG_SPECTROGRAM,
                 window: int = 2048, use_bias: bool = True):
        self.weights = np.zeros((dims, N_OUT))
        self.bias = np.zeros(N_OUT)
        self.feature_kind = FeatureKind.parse(feature_kind)
        self.window = window
        self.use_bias = use_bias
        self.input_mean = np.zeros(dims)
        self.input_scale = np.ones(dims)

    def params(self) -> dict:
        p = {"weights": self.weights}
        if self.use_bias:
            p["bias"] = self.bias
        return p

    def input_dim(self) -> int:
        return self.weights.shape[0]

    def fit_input_scaling(self, features) -> None:
        features = np.asarray(features, dtype=np.float64)
        self.input_mean = features.mean(axis=0)
        scale = features.std(axis=0)
        self.input_scale = np.where(scale > 1e-12, scale, 1.0)

    def _normalized(self, x):
        return (self._check(x) - self.input_mean) / self.input_scale

    def forward(self, x) -> np.ndarray:
        return self._normalized(x) @ self.weights + self.bias

    def loss_and_grad(self, x, y, l2: float = 0.0):
        z = self._normalized(x)
        y = np.asarray(y, dtype=np.float64)
        resid = z @ self.weights + self.bias - y
        b = z.shape[0]
        loss = float(np.sum(resid ** 2) / b + l2 * np.sum(self.weights ** 2))
        g = 2.0 * resid / b
        grads = {"weights": z.T @ g + 2.0 * l2 * self.weights}
        if self.use_bias:
            grads["bias"] = g.sum(axis=0)
        return loss, grads


class MLPModel(_Model):
    """Two-layer network on raw windows with log-ReLU hidden features."""

    kind = "mlp"
    regularized = ("hidden_weights", "output_weights")

    def __init__(self, hidden: int = 500, window: int = 2048, seed: int = 0,
                 use_log: bool = True, use_bias: bool = True):
        rng = np.random.default_rng(seed)
        self.hidden_weights = _uniform_init(rng, hidden, window)
        self.output_weights = np.zeros((hidden, N_OUT))
        self.output_bias = np.zeros(N_OUT)
        self.use_log = use_log
        self.use_bias = use_bias

    @property
    def hidden(self) -> int:
        return self.hidden_weights.shape[0]

    @property
    def window(self) -> int:
        return self.hidden_weights.shape[1]

    def params(self) -> dict:
        p = {"hidden_weights": self.hidden_weights, "output_weights": self.output_weights}
        if self.use_bias:
            p["output_bias"] = self.output_bias
        return p

    def input_dim(self) -> int:
        return self.window

    def hidden_features(self, x) -> np.ndarray:
        return _log_relu(self._check(x) @ self.hidden_weights.T, self.use_log)

    def forward(self, x) -> np.ndarray:
        return self.hidden_features(x) @ self.output_weights + self.output_bias

    def loss_and_grad(self, x, y, l2: float = 0.0):
        x = self._check(x)
        y = np.asarray(y, dtype=np.float64)
        pre = x @ self.hidden_weights.T
        act = _log_relu(pre, self.use_log)
        resid = act @ self.output_weights + self.output_bias - y
        b = x.shape[0]
        loss = float(np.sum(resid ** 2) / b + l2 * self.weight_penalty())
        g = 2.0 * resid / b
        d_pre = (g @ self.output_weights.T) * _log_relu_grad(pre, self.use_log)
        grads = {
            "hidden_weights": d_pre.T @ x + 2.0 * l2 * self.hidden_weights,
            "output_weights": act.T @ g + 2.0 * l2 * self.output_weights,
        }
        if self.use_bias:
            grads["output_bias"] = g.sum(axis=0)
        return loss, grads


class ConvModel(_Model):
    """Shared filters slid across the input, pooled, then a linear readout."""

    kind = "conv"
    regularized = ("filter_weights", "output_weights")

    def __init__(self, hidden: int = 500, receptive_field: int = 2048,
                 conv_stride: int = 8, input_length: int = 16384,
                 pool_width: int = 16, pool_stride: int = 8,
                 pool_kind: str = "average", seed: int = 0, use_bias: bool = True):
        if pool_kind not in ("average", "max"):
            raise ValueError(f"unknown pool kind {pool_kind!r}")
        self.conv_stride = conv_stride
        self.input_length = input_length
        self.pool_width = pool_width
        self.pool_stride = pool_stride
        self.pool_kind = pool_kind
        self.use_bias = use_bias
        if self.pooled_positions(receptive_field) < 1:
            raise ValueError("input too short for one pool of conv positions")
        rng = np.random.default_rng(seed)
        self.filter_weights = _uniform_init(rng, hidden, receptive_field)
        self.output_weights = np.zeros((self.pooled_positions() * hidden, N_OUT))
        self.output_bias = np.zeros(N_OUT)

    @property
    def hidden(self) -> int:
        return self.filter_weights.shape[0]

    @property
    def receptive_field(self) -> int:
        return self.filter_weights.shape[1]

    def conv_positions(self, receptive_field: Optional[int] = None) -> int:
        r = receptive_field or self.receptive_field
        return (self.input_length - r) // self.conv_stride + 1

    def pooled_positions(self, receptive_field: Optional[int] = None) -> int:
        p = self.conv_positions(receptive_field)
        if p < self.pool_width:
            return 0
        return (p - self.pool_width) // self.pool_stride + 1

    def params(self) -> dict:
        p = {"filter_weights": self.filter_weights, "output_weights": self.output_weights}
        if self.use_bias:
            p["output_bias"] = self.output_bias
        return p

    def input_dim(self) -> int:
        return self.input_length

    def _frames(self, x: np.ndarray) -> np.ndarray:
        view = sliding_window_view(x, self.receptive_field, axis=1)
        return view[:, ::self.conv_stride][:, : self.conv_positions()]

    def pre_activations(self, x) -> np.ndarray:
        """Filter responses, shape ``(batch, conv_positions, hidden)``."""
        frames = self._frames(self._check(x))
        w = self.filter_weights.T
        return np.stack([f @ w for f in frames])

    def _pool(self, act: np.ndarray):
        windows = sliding_window_view(act, self.pool_width, axis=1)
        windows = windows[:, ::self.pool_stride][:, : self.pooled_positions()]
        if self.pool_kind == "average":
            return windows.mean(axis=-1), None
        arg = windows.argmax(axis=-1)
        return np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0], arg

    def forward(self, x) -> np.ndarray:
        act = _log_relu(self.pre_activations(x))
        pooled, _ = self._pool(act)
        return pooled.reshape(pooled.shape[0], -1) @ self.output_weights + self.output_bias

    def loss_and_grad(self, x, y, l2: float = 0.0):
        x = self._check(x)
        y = np.asarray(y, dtype=np.float64)
        frames = self._frames(x)
        w = self.filter_weights.T
        pre = np.stack([f @ w for f in frames])
        act = _log_relu(pre)
        pooled, arg = self._pool(act)
        b, q, h = pooled.shape
        flat = pooled.reshape(b, q * h)
        resid = flat @ self.output_weights + self.output_bias - y
        loss = float(np.sum(resid ** 2) / b + l2 * self.weight_penalty())
        g = 2.0 * resid / b

        d_pooled = (g @ self.output_weights.T).reshape(b, q, h)
        d_act = np.zeros_like(act)
        span = self.pool_stride * (q - 1) + 1
        if self.pool_kind == "average":
            share = d_pooled / self.pool_width
            for k in range(self.pool_width):
                d_act[:, k:k + span:self.pool_stride] += share
        else:
            positions = arg + (self.pool_stride * np.arange(q))[None, :, None]
            bi = np.arange(b)[:, None, None]
            hi = np.arange(h)[None, None, :]
            np.add.at(d_act, (bi, positions, hi), d_pooled)
        d_pre = d_act * _log_relu_grad(pre)
        d_filters = np.zeros_like(self.filter_weights)
        for k in range(b):
            d_filters += d_pre[k].T @ frames[k]
        grads = {
            "filter_weights": d_filters + 2.0 * l2 * self.filter_weights,
            "output_weights": flat.T @ g + 2.0 * l2 * self.output_weights,
        }
        if self.use_bias:
            grads["output_bias"] = g.sum(axis=0)
        return loss, grads


def forward(model, x) -> np.ndarray:
    """Scores for one input (shape ``(128,)``) or a batch (``(n, 128)``)."""
    out = model.forward(x)
    return out[0] if np.asarray(x).ndim == 1 else out


def loss(y_hat, y, model=None, l2: float = 0.0) -> float:
    """``||y_hat - y||^2 + l2 * ||W||^2`` for a single point."""
    diff = np.asarray(y_hat, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    penalty = model.weight_penalty() if (model is not None and l2) else 0.0
    return float(np.sum(diff ** 2) + l2 * penalty)


def predict(model, x, c: float) -> set:
    """Notes whose score strictly exceeds ``c``."""
    if not np.isfinite(c):
        raise ValueError("threshold must be finite")
    return {int(n) for n in np.flatnonzero(forward(model, x) > c)}


def model_inputs(model, segments, chunk: int = 1024) -> np.ndarray:
    """Inputs for ``model`` from a segment set: spectral features of each
    window for linear models, the raw windows otherwise."""
    windows = segments.windows()
    expected = model.window if isinstance(model, LinearModel) else model.input_dim()
    if windows.shape[1] != expected:
        raise DimensionError(
            f"segments are {windows.shape[1]} samples wide, model needs {expected}"
        )
    if not isinstance(model, LinearModel):
        return np.array(windows, dtype=np.float64)
    out = np.empty((len(windows), model.input_dim()))
    for start in range(0, len(windows), chunk):
        out[start:start + chunk] = frame_features(windows[start:start + chunk],
                                                  model.feature_kind)
    return out


# --- training --------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    l2_lambda: float = 0.0
    threshold_grid_size: int = 512
    # fit feature standardization for linear models before training
    standardize: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning_rate, batch_size and epochs must be positive")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")
        if self.threshold_grid_size < 1:
            raise ValueError("threshold_grid_size must be positive")


@dataclass
class TraceRow:
    epoch: int
    train_loss: float
    val_loss: Optional[float] = None
    weight_norm: float = 0.0


@dataclass
class TrainResult:
    model: object
    trace: list = field(default_factory=list)


def batch_loss(model, x, y, l2: float = 0.0, batch_size: int = 256) -> float:
    """Mean per-point loss over a dataset, evaluated in chunks."""
    total = 0.0
    n = len(x)
    for start in range(0, n, batch_size):
        out = model.forward(x[start:start + batch_size])
        total += float(np.sum((out - y[start:start + batch_size]) ** 2))
    return total / n + l2 * model.weight_penalty()


def train(model, inputs, targets, config: TrainConfig = TrainConfig(),
          validation=None, callback=None) -> TrainResult:
    """Minibatch SGD on mean square loss plus ``l2_lambda * ||W||^2``.

    ``inputs`` is an ``(n, d)`` array (features or raw windows) and
    ``targets`` an ``(n, 128)`` indicator array. Batches are drawn from a
    permutation seeded by ``config.seed``; results are bitwise repeatable.
    """
    inputs = np.asarray(inputs)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(inputs)
    if n == 0:
        raise ValueError("training set is empty")
    if len(targets) != n:
        raise ValueError("inputs and targets differ in length")
    if config.standardize and isinstance(model, LinearModel):
        model.fit_input_scaling(inputs)
    rng = np.random.default_rng(config.seed)
    trace = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            value, grads = model.loss_and_grad(inputs[idx], targets[idx], config.l2_lambda)
            if not np.isfinite(value) or value > DIVERGENCE_LOSS:
                trace.append(TraceRow(epoch, value, None, _weight_norm(model)))
                raise TrainingDiverged(
                    f"loss {value!r} at epoch {epoch}, batch starting {start}; "
                    f"lower the learning rate", trace,
                )
            params = model.params()
            for name, grad in grads.items():
                if not np.all(np.isfinite(grad)):
                    raise TrainingDiverged(f"non-finite gradient for {name} at epoch {epoch}", trace)
                params[name] -= config.learning_rate * grad
            running += value * len(idx)
        val = None
        if validation is not None:
            val = batch_loss(model, validation[0], np.asarray(validation[1], dtype=float),
                             config.l2_lambda)
        row = TraceRow(epoch, running / n, val, _weight_norm(model))
        trace.append(row)
        logger.info("epoch %d: train loss %.6g%s", epoch, row.train_loss,
                    "" if val is None else f", val loss {val:.6g}")
        if callback is not None:
            callback(row)
    return TrainResult(model, trace)


def _weight_norm(model) -> float:
    return float(np.sqrt(model.weight_penalty()))


def gradient_check(model, x, y, epsilon: float = 1e-6, l2: float = 0.0,
                   n_coords: int = 200, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients
    over a random subset of at least ``n_coords`` parameter coordinates."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    rng = np.random.default_rng(seed)
    _, grads = model.loss_and_grad(x, y, l2)
    params = model.params()
    names = list(params)
    total = sum(params[k].size for k in names)
    worst = 0.0
    for name in names:
        p = params[name]
        flat = p.reshape(-1)
        share = max(n_coords * p.size // total, min(p.size, 20))
        picks = rng.choice(p.size, size=min(share, p.size), replace=False)
        analytic = grads[name].reshape(-1)
        for k in picks:
            saved = flat[k]
            flat[k] = saved + epsilon
            plus, _ = model.loss_and_grad(x, y, l2)
            flat[k] = saved - epsilon
            minus, _ = model.loss_and_grad(x, y, l2)
            flat[k] = saved
            numeric = (plus - minus) / (2 * epsilon)
            a = analytic[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# --- thresholds --------------------------------------------------------------


def threshold_grid(scores, size: int = 512) -> np.ndarray:
    """Cell midpoints of ``size`` equal cells spanning ``[min, max]``."""
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = float(scores.min()), float(scores.max())
    return lo + (np.arange(size) + 0.5) / size * (hi - lo)


def select_threshold(scores, truths, grid_size: int = 512) -> float:
    """Threshold from the grid maximizing F1; ties go to the smallest."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=bool)
    if scores.size == 0:
        raise ValueError("empty validation set")
    if not truths.any():
        raise ValueError("validation set has no positive labels; F1 is undefined")
    grid = threshold_grid(scores, grid_size)
    tp, npred, ntrue = counts_at_thresholds(scores, truths, grid)
    f1 = f1_score(tp, npred, ntrue)
    return float(grid[int(np.argmax(f1))])


# --- learned filter analysis -------------------------------------------------


@dataclass
class WeightSpectrum:
    unit_index: np.ndarray
    dominant_hz: np.ndarray
    spectra: np.ndarray
    excluded: int


def weight_spectrum(model, sample_rate: int = 44100) -> WeightSpectrum:
    """Per hidden unit: power spectrum of its weights and the frequency of
    the strongest non-DC bin. Units with near-zero weights are excluded."""
    if isinstance(model, MLPModel):
        w = model.hidden_weights
    elif isinstance(model, ConvModel):
        w = model.filter_weights
    else:
        raise TypeError("weight_spectrum needs an MLP or conv model")
    norms = np.linalg.norm(w, axis=1)
    keep = np.flatnonzero(norms >= 1e-8)
    spectra = spec_window(w[keep]) if keep.size else np.zeros((0, w.shape[1] // 2 + 1))
    peak = 1 + np.argmax(spectra[:, 1:], axis=1) if keep.size else np.zeros(0, int)
    window = w.shape[1]
    dominant = np.array([bin_frequency(int(k), window, sample_rate) for k in peak])
    return WeightSpectrum(keep, dominant, spectra, int(w.shape[0] - keep.size))


# --- persistence -------------------------------------------------------------


def _blocks(model) -> tuple:
    if isinstance(model, LinearModel):
        fields = (model.weights.shape[0], int(model.feature_kind), model.window,
                  int(model.use_bias))
        arrays = (model.weights, model.bias, model.input_mean, model.input_scale)
    elif isinstance(model, MLPModel):
        fields = (model.hidden, model.window, int(model.use_log), int(model.use_bias))
        arrays = (model.hidden_weights, model.output_weights, model.output_bias)
    elif isinstance(model, ConvModel):
        fields = (model.hidden, model.receptive_field, model.conv_stride,
                  model.input_length, model.pool_width, model.pool_stride,
                  int(model.pool_kind == "max"), int(model.use_bias))
        arrays = (model.filter_weights, model.output_weights, model.output_bias)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    return fields, arrays


def model_to_bytes(model) -> bytes:
    """NMDL container: magic, version, kind, shape fields (uint32 LE), then
    float64 LE weight blocks in a fixed per-kind order."""
    fields, arrays = _blocks(model)
    head = MODEL_MAGIC + struct.pack("<III", MODEL_VERSION, _KIND_CODES[model.kind], len(fields))
    head += struct.pack(f"<{len(fields)}I", *fields)
    return head + b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def model_from_bytes(raw: bytes):
    if raw[:4] != MODEL_MAGIC or len(raw) < 16:
        raise ModelFormatError("not an NMDL model file")
    version, code, nfields = struct.unpack("<III", raw[4:16])
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    fields = struct.unpack(f"<{nfields}I", raw[16:16 + 4 * nfields])
    body = np.frombuffer(raw[16 + 4 * nfields:], dtype="<f8").astype(np.float64)
    kind = {v: k for k, v in _KIND_CODES.items()}.get(code)
    if kind is None or nfields != {"linear": 4, "mlp": 4, "conv": 8}[kind]:
        raise ModelFormatError(f"bad model kind {code} or field count {nfields}")
    if kind == "linear":
        dims, fkind, window, use_bias = fields
        model = LinearModel(dims, FeatureKind(fkind), window, bool(use_bias))
        targets = [("weights", (dims, N_OUT)), ("bias", (N_OUT,)),
                   ("input_mean", (dims,)), ("input_scale", (dims,))]
    elif kind == "mlp":
        hidden, window, use_log, use_bias = fields
        model = MLPModel(hidden, window, use_log=bool(use_log), use_bias=bool(use_bias))
        targets = [("hidden_weights", (hidden, window)), ("output_weights", (hidden, N_OUT)),
                   ("output_bias", (N_OUT,))]
    else:
        hidden, rf, stride, length, pw, ps, is_max, use_bias = fields
        model = ConvModel(hidden, rf, stride, length, pw, ps,
                          "max" if is_max else "average", use_bias=bool(use_bias))
        targets = [("filter_weights", (hidden, rf)),
                   ("output_weights", (model.pooled_positions() * hidden, N_OUT)),
                   ("output_bias", (N_OUT,))]
    pos = 0
    for name, shape in targets:
        size = int(np.prod(shape))
        if pos + size > body.size:
            raise ModelFormatError("model file truncated")
        setattr(model, name, body[pos:pos + size].reshape(shape).copy())
        pos += size
    if pos != body.size:
        raise ModelFormatError("model file has trailing data")
    return model


def save_model(model, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for row in trace:
            writer.writerow([row.epoch, repr(row.train_loss),
                             "" if row.val_loss is None else repr(row.val_loss)])
