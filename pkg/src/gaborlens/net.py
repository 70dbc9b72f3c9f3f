"""A small CNN-LSTM classifier written directly against numpy.

Two architectures share the same pieces:

* ``OneD_LSTM``: 1D conv (64 filters) -> sequence -> LSTM(64) -> dense -> softmax
* ``OneD_TwoD_LSTM``: 1D conv -> 2D conv (32 filters) -> sequence -> LSTM -> dense -> softmax

Convolutions are valid cross-correlations followed by ReLU; a "1D" layer is a
2D layer whose kernel is one sample tall (or wide), so each row (or column)
is an independent sequence. The LSTM reads the translation axis as time with
``channels * height`` features per step and only its last hidden state feeds
the dense layer.
"""
from __future__ import annotations

import csv
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

ARCHITECTURES = ("OneD_LSTM", "OneD_TwoD_LSTM")
SEQUENCE_MODES = ("width", "flat")
OPTIMIZERS = ("SGDM", "ADAM")
CKPT_MAGIC = b"GLCKPT"
CKPT_VERSION = 1


class SpecError(ValueError):
    """Infeasible network shape."""


class StateError(RuntimeError):
    """Backward pass called without a forward cache."""


# ------------------------------------------------------------------ shapes

@dataclass(frozen=True)
class ConvShape:
    filter_h: int
    filter_w: int
    stride_h: int
    stride_w: int
    n_filters: int

    def out(self, h: int, w: int) -> tuple[int, int]:
        return (h - self.filter_h) // self.stride_h + 1, (w - self.filter_w) // self.stride_w + 1


def _check_conv(name: str, c: ConvShape, h: int, w: int) -> None:
    dims = (c.filter_h, c.filter_w, c.stride_h, c.stride_w, c.n_filters)
    if any(int(d) != d or d < 1 for d in dims):
        raise SpecError(f"{name}: filter/stride/filters must be positive integers, got {c}")
    if c.filter_h > h or c.filter_w > w:
        raise SpecError(f"{name}: filter {c.filter_h}x{c.filter_w} exceeds input {h}x{w}")


@dataclass(frozen=True)
class NetworkSpec:
    architecture: str
    j: int
    N: int
    input_h: int
    input_w: int
    conv1d: ConvShape
    conv2d: Optional[ConvShape] = None
    lstm_units: int = 64
    n_classes: int = 5
    sequence: str = "width"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise SpecError(f"unknown architecture {self.architecture!r}")
        if self.sequence not in SEQUENCE_MODES:
            raise SpecError(f"unknown sequence mode {self.sequence!r}")
        if (self.conv2d is None) != (self.architecture == "OneD_LSTM"):
            raise SpecError(f"{self.architecture}: conv2d must be {'absent' if self.conv2d is None else 'present'}")
        if self.lstm_units < 1 or self.n_classes < 2:
            raise SpecError("need lstm_units >= 1 and n_classes >= 2")
        _check_conv("conv1d", self.conv1d, self.input_h, self.input_w)
        if self.conv2d is not None:
            _check_conv("conv2d", self.conv2d, *self.conv1d_out)

    @property
    def conv1d_out(self) -> tuple[int, int]:
        return self.conv1d.out(self.input_h, self.input_w)

    @property
    def conv_out(self) -> tuple[int, int, int]:
        """(channels, height, width) fed to the sequence layer."""
        if self.conv2d is None:
            return (self.conv1d.n_filters, *self.conv1d_out)
        return (self.conv2d.n_filters, *self.conv2d.out(*self.conv1d_out))

    @property
    def sequence_shape(self) -> tuple[int, int]:
        c, h, w = self.conv_out
        return (w, c * h) if self.sequence == "width" else (c * h * w, 1)


def _clog2(j: int) -> int:
    return int(math.ceil(math.log2(j))) if j > 1 else 0


def make_spec(architecture: str, j: int, N: int, sequence: str = "width",
              conv1d_filters: int = 64, conv2d_filters: int = 32, lstm_units: int = 64) -> NetworkSpec:
    """Layer shapes from the scale exponent ``j`` and length exponent ``N``.

    For ``j <= 5`` the 1D layer slides along translations with filter
    ``1 x 2**(N-4-j)`` and stride ``1 x 2**(N-5-j)``, i.e. a constant number of
    windows per row for every ``N`` (``1 x 2**(7-j)`` / ``1 x 2**(6-j)`` at
    ``N = 11``). For ``j > 5`` it slides along frequencies with filter
    ``2**(j-4) x 1`` and stride ``2**(j-5) x 1``. The 2D layer uses
    ``(ceil(log2 j)+1) x 2**(6-j)`` / ``ceil(log2 j) x 2**(5-j)`` for ``j <= 5`` and
    ``2**(j-5) x (7-ceil(log2 j))`` / ``2**(j-6) x (6-ceil(log2 j))`` otherwise;
    a zero stride (``j = 1``) is raised to 1.
    """
    if not 1 <= j <= N - 1:
        raise SpecError(f"scale exponent j={j} outside 1..{N - 1}")
    H, W = 2 ** (j + 1), 2 ** (N - j + 1)
    if j <= 5:
        if N - 5 - j < 0:
            raise SpecError(f"conv1d: filter 1x2^{N - 4 - j} / stride 1x2^{N - 5 - j} not integral for j={j}, N={N}")
        c1 = ConvShape(1, 2 ** (N - 4 - j), 1, 2 ** (N - 5 - j), conv1d_filters)
    else:
        c1 = ConvShape(2 ** (j - 4), 1, 2 ** (j - 5), 1, conv1d_filters)
    c2 = None
    if architecture == "OneD_TwoD_LSTM":
        lg = _clog2(j)
        if j <= 5:
            c2 = ConvShape(lg + 1, 2 ** (6 - j), max(lg, 1), 2 ** (5 - j), conv2d_filters)
        else:
            c2 = ConvShape(2 ** (j - 5), 7 - lg, 2 ** (j - 6), 6 - lg, conv2d_filters)
    return NetworkSpec(architecture, j, N, H, W, c1, c2, lstm_units, 5, sequence)


# ------------------------------------------------------------------ layers

def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None, None], 2
    if x.ndim == 3:
        return x[None], 3
    if x.ndim == 4:
        return x, 4
    raise ValueError(f"conv input must have 2-4 axes, got shape {x.shape}")


@dataclass
class ConvCache:
    cols: np.ndarray
    pre: np.ndarray
    in_shape: tuple
    ndim: int
    stride: tuple


def conv_forward(x, kernels, bias, stride):
    """Valid cross-correlation + bias + ReLU.

    ``x`` is (H, W), (C, H, W) or (B, C, H, W); ``kernels`` is (F, C, kh, kw).
    Returns ``(activation, cache)`` with the batch axis removed again if absent.
    """
    X, nd = _as_batch(x)
    K = np.asarray(kernels, dtype=np.float64)
    if K.ndim == 2:
        K = K[None, None]
        bias = np.atleast_1d(bias)
    B, C, H, W = X.shape
    F, Ck, kh, kw = K.shape
    sh, sw = stride
    if Ck != C or kh > H or kw > W:
        raise ValueError(f"kernel {K.shape} incompatible with input {X.shape}")
    Ho, Wo = (H - kh) // sh + 1, (W - kw) // sw + 1
    win = sliding_window_view(X, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    pre = (cols @ K.reshape(F, -1).T + np.asarray(bias, dtype=np.float64)).reshape(B, Ho, Wo, F)
    pre = pre.transpose(0, 3, 1, 2)
    out = np.maximum(pre, 0.0)
    cache = ConvCache(cols, pre, X.shape, nd, (sh, sw))
    if nd == 2 and F == 1:
        out = out[0, 0]
    elif nd < 4:
        out = out[0]
    return out, cache


def conv_backward(grad_out, cache: Optional[ConvCache], kernels):
    """Gradients ``(d_input, d_kernels, d_bias)`` of :func:`conv_forward`."""
    if cache is None:
        raise StateError("conv_backward called without a forward cache")
    K = np.asarray(kernels, dtype=np.float64)
    plain = K.ndim == 2
    if plain:
        K = K[None, None]
    F, C, kh, kw = K.shape
    B, _, H, W = cache.in_shape
    g = np.asarray(grad_out, dtype=np.float64).reshape(cache.pre.shape)
    dpre = np.where(cache.pre > 0, g, 0.0)
    Ho, Wo = dpre.shape[2:]
    d2 = dpre.transpose(0, 2, 3, 1).reshape(-1, F)
    dK = (d2.T @ cache.cols).reshape(F, C, kh, kw)
    db = d2.sum(axis=0)
    dcols = (d2 @ K.reshape(F, -1)).reshape(B, Ho, Wo, C, kh, kw)
    dX = np.zeros((B, C, H, W))
    sh, sw = cache.stride
    for a in range(kh):
        for b in range(kw):
            dX[:, :, a:a + sh * (Ho - 1) + 1:sh, b:b + sw * (Wo - 1) + 1:sw] += \
                dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
    if cache.ndim == 2:
        dX = dX[0, 0]
    elif cache.ndim == 3:
        dX = dX[0]
    if plain:
        dK = dK[0, 0]
    return dX, dK, db


def to_sequence(t, mode: str = "width"):
    """(B, C, H, W) -> (B, W, C*H) in channel-major order; ``flat`` gives (B, C*H*W, 1)."""
    t = np.asarray(t)
    single = t.ndim == 3
    if single:
        t = t[None]
    B, C, H, W = t.shape
    if mode == "width":
        s = t.transpose(0, 3, 1, 2).reshape(B, W, C * H)
    elif mode == "flat":
        s = t.reshape(B, C * H * W, 1)
    else:
        raise ValueError(f"unknown sequence mode {mode!r}")
    return s[0] if single else s


def from_sequence(s, shape, mode: str = "width"):
    """Inverse of :func:`to_sequence` for a (C, H, W) ``shape``."""
    s = np.asarray(s)
    single = s.ndim == 2
    if single:
        s = s[None]
    C, H, W = shape
    if mode == "width":
        t = s.reshape(-1, W, C, H).transpose(0, 2, 3, 1)
    else:
        t = s.reshape(-1, C, H, W)
    return t[0] if single else t


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class LSTMCache:
    seq: np.ndarray
    gates: list
    cells: list
    hiddens: list


def lstm_forward(seq, W, R, b):
    """LSTM over (T, F) or (B, T, F); gates stacked i, f, g, o. Returns ``(h_T, cache)``."""
    S = np.asarray(seq, dtype=np.float64)
    single = S.ndim == 2
    if single:
        S = S[None]
    B, T, Fdim = S.shape
    U = R.shape[1]
    if W.shape != (4 * U, Fdim) or R.shape != (4 * U, U) or b.shape != (4 * U,):
        raise ValueError(f"LSTM weights {W.shape}/{R.shape}/{b.shape} do not fit {Fdim} features, {U} units")
    h = np.zeros((B, U))
    c = np.zeros((B, U))
    gates, cells, hiddens = [], [c], [h]
    Wx = S @ W.T                                      # B x T x 4U
    for t in range(T):
        a = Wx[:, t] + h @ R.T + b
        i = _sigmoid(a[:, :U])
        f = _sigmoid(a[:, U:2 * U])
        g = np.tanh(a[:, 2 * U:3 * U])
        o = _sigmoid(a[:, 3 * U:])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates.append((i, f, g, o))
        cells.append(c)
        hiddens.append(h)
    cache = LSTMCache(S, gates, cells, hiddens)
    return (h[0] if single else h), cache


def lstm_backward(grad_h, cache: Optional[LSTMCache], W, R, drop_recurrent: bool = False):
    """Backpropagation through time; returns ``(d_seq, dW, dR, db)``.

    ``drop_recurrent`` deliberately omits the hidden-to-hidden gradient path
    (a known-wrong backward used to exercise the gradient checker).
    """
    if cache is None:
        raise StateError("lstm_backward called without a forward cache")
    S = cache.seq
    B, T, _ = S.shape
    U = R.shape[1]
    dh = np.asarray(grad_h, dtype=np.float64).reshape(B, U)
    dc = np.zeros((B, U))
    dW, dR, db = np.zeros_like(W), np.zeros_like(R), np.zeros(4 * U)
    dS = np.zeros_like(S)
    for t in range(T - 1, -1, -1):
        i, f, g, o = cache.gates[t]
        c, c_prev, h_prev = cache.cells[t + 1], cache.cells[t], cache.hiddens[t]
        tc = np.tanh(c)
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        da = np.concatenate([dc * g * i * (1 - i), dc * c_prev * f * (1 - f),
                             dc * i * (1 - g * g), do * o * (1 - o)], axis=1)
        dW += da.T @ S[:, t]
        dR += da.T @ h_prev
        db += da.sum(axis=0)
        dS[:, t] = da @ W
        dh = np.zeros_like(dh) if drop_recurrent else da @ R
        dc = dc * f
    return dS, dW, dR, db


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dense_softmax_xent(h, Wd, bd, labels):
    """Mean cross-entropy of ``softmax(h Wd' + bd)``.

    Returns ``(loss, probs, (dh, dWd, dbd))``; single examples may be passed
    as a 1-D ``h`` with a scalar label.
    """
    H = np.asarray(h, dtype=np.float64)
    single = H.ndim == 1
    if single:
        H = H[None]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    logits = H @ Wd.T + bd
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    B = H.shape[0]
    loss = float(-logp[np.arange(B), y].mean())
    d = p.copy()
    d[np.arange(B), y] -= 1.0
    d /= B
    dWd = d.T @ H
    dbd = d.sum(axis=0)
    dh = d @ Wd
    if single:
        return loss, p[0], (dh[0], dWd, dbd)
    return loss, p, (dh, dWd, dbd)


# ------------------------------------------------------------------ model

@dataclass
class ModelWeights:
    """Named parameter tensors in declaration order plus the seed used at init."""
    params: dict
    rng_seed: int = 0

    def names(self):
        return list(self.params)

    def copy(self) -> "ModelWeights":
        return ModelWeights({k: v.copy() for k, v in self.params.items()}, self.rng_seed)

    def allclose(self, other: "ModelWeights", **kw) -> bool:
        return self.names() == other.names() and all(
            np.allclose(self.params[k], other.params[k], **kw) for k in self.params)


def param_shapes(spec: NetworkSpec) -> dict:
    shapes = {}
    c1 = spec.conv1d
    shapes["conv1d.kernel"] = (c1.n_filters, 1, c1.filter_h, c1.filter_w)
    shapes["conv1d.bias"] = (c1.n_filters,)
    if spec.conv2d is not None:
        c2 = spec.conv2d
        shapes["conv2d.kernel"] = (c2.n_filters, c1.n_filters, c2.filter_h, c2.filter_w)
        shapes["conv2d.bias"] = (c2.n_filters,)
    U = spec.lstm_units
    F = spec.sequence_shape[1]
    shapes["lstm.W"] = (4 * U, F)
    shapes["lstm.R"] = (4 * U, U)
    shapes["lstm.b"] = (4 * U,)
    shapes["dense.W"] = (spec.n_classes, U)
    shapes["dense.b"] = (spec.n_classes,)
    return shapes


def init_weights(spec: NetworkSpec, seed: int) -> ModelWeights:
    """He-uniform conv/dense kernels, uniform +-1/sqrt(fan-in) LSTM, forget bias 1."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    params = {}
    for name, shape in param_shapes(spec).items():
        layer, kind = name.split(".")
        if layer.startswith("conv") and kind == "kernel":
            fan_in = shape[1] * shape[2] * shape[3]
            lim = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-lim, lim, shape)
        elif layer == "dense" and kind == "W":
            lim = math.sqrt(6.0 / shape[1])
            params[name] = rng.uniform(-lim, lim, shape)
        elif layer == "lstm" and kind in ("W", "R"):
            U = spec.lstm_units
            lim = 1.0 / math.sqrt(spec.sequence_shape[1] + U)
            params[name] = rng.uniform(-lim, lim, shape)
        elif name == "lstm.b":
            b = np.zeros(shape)
            b[spec.lstm_units:2 * spec.lstm_units] = 1.0
            params[name] = b
        else:
            params[name] = np.zeros(shape)
    return ModelWeights(params, int(seed))


def _check_input(spec: NetworkSpec, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim == 3:
        X = X[:, None]
    if X.shape[1:] != (1, spec.input_h, spec.input_w):
        raise ValueError(f"input shape {X.shape[2:]} does not match spec {spec.input_h}x{spec.input_w} "
                         f"(j={spec.j}, N={spec.N})")
    return X


def forward(spec: NetworkSpec, weights: ModelWeights, X):
    """Logits for a batch (B, H, W) plus the caches needed by :func:`backward`."""
    p = weights.params
    X = _check_input(spec, X)
    c1 = spec.conv1d
    a, cache1 = conv_forward(X, p["conv1d.kernel"], p["conv1d.bias"], (c1.stride_h, c1.stride_w))
    cache2 = None
    if spec.conv2d is not None:
        c2 = spec.conv2d
        a, cache2 = conv_forward(a, p["conv2d.kernel"], p["conv2d.bias"], (c2.stride_h, c2.stride_w))
    conv_shape = a.shape[1:]
    seq = to_sequence(a, spec.sequence)
    h, lcache = lstm_forward(seq, p["lstm.W"], p["lstm.R"], p["lstm.b"])
    logits = h @ p["dense.W"].T + p["dense.b"]
    return logits, (cache1, cache2, conv_shape, lcache, h)


def loss_and_grads(spec: NetworkSpec, weights: ModelWeights, X, y, drop_recurrent: bool = False):
    """Mean cross-entropy, probabilities and per-parameter gradients."""
    p = weights.params
    _, (cache1, cache2, conv_shape, lcache, h) = forward(spec, weights, X)
    loss, probs, (dh, dWd, dbd) = dense_softmax_xent(h, p["dense.W"], p["dense.b"], y)
    dseq, dW, dR, db = lstm_backward(dh, lcache, p["lstm.W"], p["lstm.R"], drop_recurrent)
    da = from_sequence(dseq, conv_shape, spec.sequence)
    grads = {"dense.W": dWd, "dense.b": dbd, "lstm.W": dW, "lstm.R": dR, "lstm.b": db}
    if cache2 is not None:
        da, grads["conv2d.kernel"], grads["conv2d.bias"] = conv_backward(da, cache2, p["conv2d.kernel"])
    _, grads["conv1d.kernel"], grads["conv1d.bias"] = conv_backward(da, cache1, p["conv1d.kernel"])
    return loss, probs, {k: grads[k] for k in p}


def predict_proba(spec: NetworkSpec, weights: ModelWeights, X) -> np.ndarray:
    logits, _ = forward(spec, weights, X)
    return softmax(logits)


def predict(weights: ModelWeights, spec: NetworkSpec, m):
    """``(label index, probabilities)``; ties go to the lower class index."""
    vals = getattr(m, "values", m)
    if hasattr(m, "j") and (m.j, m.N) != (spec.j, spec.N):
        raise ValueError(f"feature matrix (j={m.j}, N={m.N}) does not match spec (j={spec.j}, N={spec.N})")
    probs = predict_proba(spec, weights, np.asarray(vals)[None])[0]
    return int(np.argmax(probs)), probs


# ------------------------------------------------------------- optimizers

@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "ADAM"
    learning_rate: Optional[float] = None
    momentum: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 150
    max_epochs: int = 100
    seed: int = 0
    record_time: bool = False

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        for name in ("momentum", "beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not self.epsilon > 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("epsilon > 0, batch_size >= 1 and max_epochs >= 0 required")

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 0.1 if self.optimizer == "SGDM" else 0.001


@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    slots: dict = field(default_factory=dict)   # name -> tuple of arrays


def init_optimizer(cfg: TrainConfig, weights: ModelWeights) -> OptimizerState:
    n_slots = 1 if cfg.optimizer == "SGDM" else 2
    return OptimizerState(cfg.optimizer, 0, {k: tuple(np.zeros_like(v) for _ in range(n_slots))
                                             for k, v in weights.params.items()})


def apply_update(cfg: TrainConfig, weights: ModelWeights, state: OptimizerState, grads: dict) -> None:
    """In-place SGDM (``v <- mu v - lr g; w <- w + v``) or bias-corrected ADAM step."""
    state.step += 1
    lr = cfg.lr
    for k, w in weights.params.items():
        g = grads[k]
        if state.kind == "SGDM":
            (v,) = state.slots[k]
            v *= cfg.momentum
            v -= lr * g
            w += v
        else:
            m, v = state.slots[k]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1 ** state.step)
            vhat = v / (1 - cfg.beta2 ** state.step)
            w -= lr * mhat / (np.sqrt(vhat) + cfg.epsilon)


# --------------------------------------------------------------- training

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    wall_ms: Optional[float] = None


HISTORY_COLUMNS = ("epoch", "loss", "train_accuracy", "wall_ms")


def write_history(path, history, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in history:
            w.writerow([r.epoch, repr(float(r.loss)), repr(float(r.train_accuracy)),
                        "" if r.wall_ms is None else f"{r.wall_ms:.3f}"])


def stack_dataset(spec: NetworkSpec, dataset):
    """``[(FeatureMatrix, label), ...]`` -> (X, y) arrays, validating shapes."""
    if not dataset:
        raise ValueError("empty training set")
    X, y = [], []
    for m, label in dataset:
        if hasattr(m, "j") and (m.j, m.N) != (spec.j, spec.N):
            raise ValueError(f"feature matrix (j={m.j}, N={m.N}) does not match spec (j={spec.j}, N={spec.N})")
        v = np.asarray(getattr(m, "values", m), dtype=np.float64)
        if v.shape != (spec.input_h, spec.input_w):
            raise ValueError(f"feature matrix shape {v.shape} != {(spec.input_h, spec.input_w)}")
        X.append(v)
        y.append(int(label))
    y = np.asarray(y, dtype=np.int64)
    if y.min() < 0 or y.max() >= spec.n_classes:
        raise ValueError("label outside the class range")
    return np.stack(X), y


def evaluate_loss(spec, weights, X, y, batch_size: int = 512):
    losses, correct = 0.0, 0
    for s in range(0, len(y), batch_size):
        logits, _ = forward(spec, weights, X[s:s + batch_size])
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        yb = y[s:s + batch_size]
        losses += float(-logp[np.arange(len(yb)), yb].sum())
        correct += int((np.argmax(logits, axis=1) == yb).sum())
    return losses / len(y), correct / len(y)


def train(dataset, spec: NetworkSpec, cfg: TrainConfig = TrainConfig(), weights: Optional[ModelWeights] = None,
          state: Optional[OptimizerState] = None, callback: Optional[Callable] = None):
    """Mini-batch training; returns ``(weights, history, optimizer_state)``.

    ``history[0]`` is the full-set loss/accuracy at initialization and
    ``history[e]`` the same after epoch ``e``. Shuffling is driven by
    ``cfg.seed``; the last partial batch is kept and averaged over its size.
    """
    X, y = stack_dataset(spec, dataset)
    missing = sorted(set(range(spec.n_classes)) - set(y.tolist()))
    if missing:
        log.warning("training set has no examples of classes %s", missing)
    weights = init_weights(spec, cfg.seed) if weights is None else weights.copy()
    state = init_optimizer(cfg, weights) if state is None else state
    shuffle = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 1]))
    t0 = time.perf_counter()
    loss, acc = evaluate_loss(spec, weights, X, y)
    history = [EpochRecord(0, loss, acc, 0.0 if cfg.record_time else None)]
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle.permutation(len(y))
        for s in range(0, len(y), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            _, _, grads = loss_and_grads(spec, weights, X[idx], y[idx])
            apply_update(cfg, weights, state, grads)
        loss, acc = evaluate_loss(spec, weights, X, y)
        if not np.isfinite(loss):
            raise FloatingPointError(f"training diverged at epoch {epoch}")
        wall = (time.perf_counter() - t0) * 1e3 if cfg.record_time else None
        history.append(EpochRecord(epoch, loss, acc, wall))
        if callback is not None:
            callback(history[-1])
    return weights, history, state


# -------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict
    passed: bool
    threshold: float


def tiny_spec(architecture: str, sequence: str = "width") -> NetworkSpec:
    """A spec with every dimension <= 8 for finite-difference checks."""
    c2 = ConvShape(2, 2, 1, 1, 2) if architecture == "OneD_TwoD_LSTM" else None
    return NetworkSpec(architecture, 1, 3, 4, 8, ConvShape(1, 3, 1, 2, 3), c2, 4, 5, sequence)


def grad_check(spec: NetworkSpec, seed: int = 0, batch: int = 3, step: float = 1e-5,
               threshold: float = 1e-4, drop_recurrent: bool = False) -> GradCheckReport:
    """Analytic gradients of the batch loss versus central differences.

    The error per tensor is ``||g - g_fd|| / max(||g||, ||g_fd||)``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    weights = init_weights(spec, seed)
    for k in weights.params:
        # nonzero biases and generic weights keep ReLUs away from their kinks
        weights.params[k] = weights.params[k] + 0.1 * rng.standard_normal(weights.params[k].shape)
    X = rng.uniform(0, 0.4, (batch, spec.input_h, spec.input_w))
    y = rng.integers(0, spec.n_classes, batch)
    _, _, grads = loss_and_grads(spec, weights, X, y, drop_recurrent=drop_recurrent)
    per = {}
    for k, w in weights.params.items():
        fd = np.zeros_like(w)
        flat, gflat = w.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            lp = loss_and_grads(spec, weights, X, y)[0]
            flat[i] = old - step
            lm = loss_and_grads(spec, weights, X, y)[0]
            flat[i] = old
            gflat[i] = (lp - lm) / (2 * step)
        scale = max(np.linalg.norm(grads[k]), np.linalg.norm(fd), 1e-12)
        per[k] = float(np.linalg.norm(grads[k] - fd) / scale)
    worst = max(per.values())
    return GradCheckReport(worst, per, worst <= threshold, threshold)


# -------------------------------------------------------------- checkpoint

def _write_tensor(fh, name: str, a) -> None:
    a = np.ascontiguousarray(a, dtype="<f4")
    nb = name.encode()
    fh.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fh.write(a.tobytes())


def _read_tensor(buf, pos):
    (n,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    name = bytes(buf[pos:pos + n]).decode()
    pos += n
    (nd,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    shape = struct.unpack_from(f"<{nd}I", buf, pos)
    pos += 4 * nd
    size = int(np.prod(shape)) if nd else 1
    a = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float64)
    return name, a, pos + 4 * size


def save_checkpoint(path, spec: NetworkSpec, weights: ModelWeights, state: Optional[OptimizerState] = None) -> None:
    """Versioned little-endian float32 checkpoint.

    Header: magic, version, architecture, j, N; then the remaining spec fields,
    the parameter tensors in declaration order and the optimizer state.
    """
    with open(Path(path), "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HIII", CKPT_VERSION, ARCHITECTURES.index(spec.architecture),
                                          spec.j, spec.N))
        c2 = spec.conv2d or ConvShape(0, 0, 0, 0, 0)
        fh.write(struct.pack("<2I5I5I3I", spec.input_h, spec.input_w,
                             *(getattr(spec.conv1d, f) for f in ConvShape.__dataclass_fields__),
                             *(getattr(c2, f) for f in ConvShape.__dataclass_fields__),
                             spec.lstm_units, spec.n_classes, SEQUENCE_MODES.index(spec.sequence)))
        fh.write(struct.pack("<qI", weights.rng_seed, len(weights.params)))
        for k, v in weights.params.items():
            _write_tensor(fh, k, v)
        if state is None:
            fh.write(struct.pack("<BI", 0, 0))
            return
        fh.write(struct.pack("<BI", 1 + OPTIMIZERS.index(state.kind), state.step))
        for k in weights.params:
            for s, slot in enumerate(state.slots[k]):
                _write_tensor(fh, f"{k}#{s}", slot)


def load_checkpoint(path):
    """Returns ``(spec, weights, optimizer_state or None)``."""
    buf = Path(path).read_bytes()
    if buf[:6] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, arch, j, N = struct.unpack_from("<HIII", buf, 6)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    pos = 6 + struct.calcsize("<HIII")
    vals = struct.unpack_from("<2I5I5I3I", buf, pos)
    pos += struct.calcsize("<2I5I5I3I")
    c1 = ConvShape(*vals[2:7])
    c2 = ConvShape(*vals[7:12]) if vals[11] else None
    spec = NetworkSpec(ARCHITECTURES[arch], j, N, vals[0], vals[1], c1, c2, vals[12], vals[13],
                       SEQUENCE_MODES[vals[14]])
    seed, count = struct.unpack_from("<qI", buf, pos)
    pos += struct.calcsize("<qI")
    params = {}
    for _ in range(count):
        name, a, pos = _read_tensor(buf, pos)
        params[name] = a
    expected = param_shapes(spec)
    if {k: v.shape for k, v in params.items()} != expected:
        raise ValueError(f"{path}: tensor shapes do not match the stored spec")
    weights = ModelWeights(params, int(seed))
    kind, step = struct.unpack_from("<BI", buf, pos)
    pos += struct.calcsize("<BI")
    if kind == 0:
        return spec, weights, None
    opt = OPTIMIZERS[kind - 1]
    n_slots = 1 if opt == "SGDM" else 2
    slots = {}
    for k in params:
        got = []
        for _ in range(n_slots):
            _, a, pos = _read_tensor(buf, pos)
            got.append(a)
        slots[k] = tuple(got)
    return spec, weights, OptimizerState(opt, int(step), slots)
