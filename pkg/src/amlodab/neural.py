"""Small numpy neural engine: dense networks and a single-layer LSTM classifier.

Both model kinds expose exact backpropagated gradients with respect to their
parameters and their inputs. Everything runs in float64.

Gate blocks in :class:`LstmCell` are stacked in the order input, forget,
output, candidate, so ``W[k*H:(k+1)*H]`` is gate ``k``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CodecError, InvalidArgument

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid")
GATES = ("input", "forget", "output", "candidate")
P_CLAMP = 1e-12
INIT_RANGE = 0.1

MAGIC = b"AMLB"
FORMAT_VERSION = 1
KIND_SEQUENCE = 1
KIND_DENSE = 2


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activate(name: str, z):
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return sigmoid(z)
    raise InvalidArgument(f"unknown activation {name!r}")


def _activate_grad(name: str, z, a):
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return a * (1.0 - a)


@dataclass(eq=False)
class DenseLayer:
    weights: np.ndarray
    biases: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise InvalidArgument("dense layer expects weights [out x in] and biases [out]")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.weights.shape

    def params(self) -> List[np.ndarray]:
        return [self.weights, self.biases]


@dataclass(eq=False)
class LstmCell:
    W: np.ndarray  # [4H x D]
    U: np.ndarray  # [4H x H]
    b: np.ndarray  # [4H]

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.U = np.asarray(self.U, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[0] % 4:
            raise InvalidArgument("W must be [4H x D]")
        h = self.W.shape[0] // 4
        if self.U.shape != (4 * h, h) or self.b.shape != (4 * h,):
            raise InvalidArgument("U must be [4H x H] and b must be [4H]")

    @property
    def hidden_size(self) -> int:
        return self.U.shape[1]

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    def gate(self, name: str):
        """(W_g, U_g, b_g) views for one gate."""
        k = GATES.index(name)
        h = self.hidden_size
        sl = slice(k * h, (k + 1) * h)
        return self.W[sl], self.U[sl], self.b[sl]

    def params(self) -> List[np.ndarray]:
        return [self.W, self.U, self.b]


@dataclass(eq=False)
class SequenceClassifier:
    cell: LstmCell
    head: DenseLayer
    input_scale: float = 1.0
    trained: bool = False

    def __post_init__(self):
        if self.head.shape != (1, self.cell.hidden_size) or self.head.activation != "sigmoid":
            raise InvalidArgument("head must be a sigmoid layer mapping H -> 1")

    def params(self) -> List[np.ndarray]:
        return self.cell.params() + self.head.params()

    def with_params(self, arrays: Sequence[np.ndarray]) -> "SequenceClassifier":
        W, U, b, hw, hb = (np.array(a, dtype=np.float64) for a in arrays)
        return SequenceClassifier(LstmCell(W, U, b), DenseLayer(hw, hb, "sigmoid"), self.input_scale, self.trained)

    def copy(self) -> "SequenceClassifier":
        return self.with_params(self.params())


@dataclass(eq=False)
class DenseNetwork:
    """Feed-forward stack; the last layer must be a single sigmoid unit."""

    layers: List[DenseLayer]
    trained: bool = False

    def __post_init__(self):
        if not self.layers:
            raise InvalidArgument("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.shape[0] != b.shape[1]:
                raise InvalidArgument("consecutive layer sizes do not match")
        last = self.layers[-1]
        if last.shape[0] != 1 or last.activation != "sigmoid":
            raise InvalidArgument("output layer must be a single sigmoid unit")

    @property
    def input_size(self) -> int:
        return self.layers[0].shape[1]

    def params(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def with_params(self, arrays: Sequence[np.ndarray]) -> "DenseNetwork":
        arrays = list(arrays)
        layers = [
            DenseLayer(np.array(arrays[2 * i]), np.array(arrays[2 * i + 1]), layer.activation)
            for i, layer in enumerate(self.layers)
        ]
        return DenseNetwork(layers, self.trained)

    def copy(self) -> "DenseNetwork":
        return self.with_params(self.params())


Model = Union[SequenceClassifier, DenseNetwork]


def _uniform(rng, shape):
    return rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)


def init_sequence_classifier(hidden: int, input_size: int = 1, seed: int = 0, input_scale: float = 1.0) -> SequenceClassifier:
    rng = np.random.default_rng(seed)
    cell = LstmCell(
        _uniform(rng, (4 * hidden, input_size)),
        _uniform(rng, (4 * hidden, hidden)),
        _uniform(rng, (4 * hidden,)),
    )
    head = DenseLayer(_uniform(rng, (1, hidden)), _uniform(rng, (1,)), "sigmoid")
    return SequenceClassifier(cell, head, input_scale)


def init_dense_network(sizes: Sequence[int], hidden_activation: str = "relu", seed: int = 0) -> DenseNetwork:
    """``sizes`` runs input -> hidden... -> 1."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = "sigmoid" if i == len(sizes) - 2 else hidden_activation
        layers.append(DenseLayer(_uniform(rng, (n_out, n_in)), _uniform(rng, (n_out,)), act))
    return DenseNetwork(layers)


def zero_like(model: Model) -> Model:
    return model.with_params([np.zeros_like(a) for a in model.params()])


# --- single-step primitives -------------------------------------------------

def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.shape[1]:
        raise InvalidArgument(f"expected input of size {layer.shape[1]}, got {x.shape[-1]}")
    return _activate(layer.activation, x @ layer.weights.T + layer.biases)


def lstm_step(cell: LstmCell, x, h, c):
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    H = cell.hidden_size
    if x.shape[-1] != cell.input_size or h.shape[-1] != H or c.shape[-1] != H:
        raise InvalidArgument("lstm_step dimension mismatch")
    z = x @ cell.W.T + h @ cell.U.T + cell.b
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H : 2 * H])
    o = sigmoid(z[..., 2 * H : 3 * H])
    g = np.tanh(z[..., 3 * H :])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def bce_loss(p, y):
    p = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    out = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(out) if np.ndim(out) == 0 else out


def _bce_dlogit(p, y):
    # d loss / d logit through the probability clamp
    inside = (p >= P_CLAMP) & (p <= 1.0 - P_CLAMP)
    return np.where(inside, p - y, 0.0)


# --- batched forward/backward -----------------------------------------------

def _as_sequence_batch(model: SequenceClassifier, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, :, None]
    if X.ndim != 3 or X.shape[2] != model.cell.input_size:
        raise InvalidArgument("sequence batch must be [B x T] or [B x T x D]")
    if X.shape[1] == 0:
        raise InvalidArgument("empty window")
    return X


def _seq_forward(model: SequenceClassifier, X):
    cell = model.cell
    B, T, _ = X.shape
    H = cell.hidden_size
    # time-major buffers; acts holds gate activations, tcs holds tanh(c_t)
    hs = np.zeros((T + 1, B, H))
    cs = np.zeros((T + 1, B, H))
    tcs = np.empty((T, B, H))
    acts = np.empty((T, B, 4 * H))
    # sigmoid(z) = (1 + tanh(z/2)) / 2, so all four gates share one tanh call
    half = np.ones(4 * H)
    half[: 3 * H] = 0.5
    Xt = np.ascontiguousarray(np.swapaxes(X, 0, 1))
    xw = (Xt.reshape(T * B, -1) @ cell.W.T).reshape(T, B, 4 * H)
    xw += cell.b
    xw *= half
    Uh = cell.U.T * half
    h = hs[0]
    c = cs[0]
    for t in range(T):
        a = acts[t]
        np.tanh(xw[t] + h @ Uh, out=a)
        a[:, : 3 * H] += 1.0
        a[:, : 3 * H] *= 0.5
        c = a[:, H : 2 * H] * c + a[:, :H] * a[:, 3 * H :]
        np.tanh(c, out=tcs[t])
        h = a[:, 2 * H : 3 * H] * tcs[t]
        hs[t + 1] = h
        cs[t + 1] = c
    logit = h @ model.head.weights[0] + model.head.biases[0]
    p = sigmoid(logit)
    return p, (X, hs, cs, tcs, acts)


def _seq_backward(model: SequenceClassifier, cache, dlogit):
    """Gradients of sum_b dlogit_b * logit_b w.r.t. params and inputs."""
    X, hs, cs, tcs, acts = cache
    cell = model.cell
    T = acts.shape[0]
    H = cell.hidden_size
    h_last = hs[T]
    dhw = (dlogit @ h_last)[None, :]
    dhb = np.array([dlogit.sum()])
    dh = dlogit[:, None] * model.head.weights[0][None, :]
    dc = np.zeros_like(dh)
    dz = np.empty_like(acts)
    U = cell.U
    for t in range(T - 1, -1, -1):
        a = acts[t]
        i, f, o, g = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
        tc = tcs[t]
        dc = dc + dh * o * (1.0 - tc * tc)
        z = dz[t]
        z[:, :H] = dc * g * i * (1.0 - i)
        z[:, H : 2 * H] = dc * cs[t] * f * (1.0 - f)
        z[:, 2 * H : 3 * H] = dh * tc * o * (1.0 - o)
        z[:, 3 * H :] = dc * i * (1.0 - g * g)
        dh = z @ U
        dc = dc * f
    dz_flat = dz.reshape(T * dz.shape[1], 4 * H)
    Xt = np.swapaxes(X, 0, 1)
    dW = dz_flat.T @ Xt.reshape(T * X.shape[0], -1)
    dU = dz_flat.T @ hs[:T].reshape(T * X.shape[0], H)
    db = dz_flat.sum(axis=0)
    dX = (dz_flat @ cell.W).reshape(T, X.shape[0], -1)
    return [dW, dU, db, dhw, dhb], np.ascontiguousarray(np.swapaxes(dX, 0, 1))


def _as_dense_batch(model: DenseNetwork, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.input_size:
        raise InvalidArgument(f"expected inputs of size {model.input_size}")
    return X


def _dense_forward_batch(model: DenseNetwork, X):
    zs, outs = [], [X]
    a = X
    for layer in model.layers:
        z = a @ layer.weights.T + layer.biases
        a = _activate(layer.activation, z)
        zs.append(z)
        outs.append(a)
    return outs[-1][:, 0], (zs, outs)


def _dense_backward(model: DenseNetwork, cache, dlogit):
    zs, outs = cache
    grads: List[np.ndarray] = []
    delta = dlogit[:, None]  # output layer: gradient w.r.t. its pre-activation
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        grads.append(delta.sum(axis=0))
        grads.append(delta.T @ outs[k])
        da = delta @ layer.weights
        if k > 0:
            prev = model.layers[k - 1]
            delta = da * _activate_grad(prev.activation, zs[k - 1], outs[k])
    grads.reverse()
    return grads, da


def predict_batch(model: Model, X) -> np.ndarray:
    """Probabilities for a batch; rows are windows (sequence) or feature vectors (dense)."""
    if isinstance(model, SequenceClassifier):
        p, _ = _seq_forward(model, _as_sequence_batch(model, X))
    else:
        p, _ = _dense_forward_batch(model, _as_dense_batch(model, X))
    return p


def loss_and_gradients(model: Model, X, y):
    """Summed BCE over the batch, parameter gradients and input gradients."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if isinstance(model, SequenceClassifier):
        Xb = _as_sequence_batch(model, X)
        p, cache = _seq_forward(model, Xb)
        backward = _seq_backward
    else:
        Xb = _as_dense_batch(model, X)
        p, cache = _dense_forward_batch(model, Xb)
        backward = _dense_backward
    if len(y) != len(p):
        raise InvalidArgument("label count does not match batch size")
    losses = bce_loss(p, y)
    grads, dX = backward(model, cache, _bce_dlogit(p, y))
    return np.atleast_1d(losses), grads, dX


def classify(model: Model, window) -> float:
    """Occupancy probability for one window, guaranteed strictly inside (0, 1)."""
    x = np.asarray(window, dtype=np.float64)
    if x.shape[0] == 0:
        raise InvalidArgument("empty window")
    p = float(predict_batch(model, x[None, ...])[0])
    return min(max(p, np.nextafter(0.0, 1.0)), np.nextafter(1.0, 0.0))


def param_gradients(model: Model, window, y) -> Model:
    """Gradient of ``bce_loss(classify(window), y)``, shaped like ``model``."""
    x = np.asarray(window, dtype=np.float64)
    if x.shape[0] == 0:
        raise InvalidArgument("empty window")
    _, grads, _ = loss_and_gradients(model, x[None, ...], [y])
    return model.with_params(grads)


def input_gradient(model: Model, window, y) -> np.ndarray:
    x = np.asarray(window, dtype=np.float64)
    if x.shape[0] == 0:
        raise InvalidArgument("empty window")
    _, _, dX = loss_and_gradients(model, x[None, ...], [y])
    return dX[0].reshape(x.shape)


def input_gradient_batch(model: Model, X, y) -> np.ndarray:
    _, _, dX = loss_and_gradients(model, X, y)
    return dX.reshape(np.shape(X))


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 10
    batch_size: int = 64
    optimizer: str = "adam"
    seed: int = 0
    input_scale: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # rescale each batch gradient to at most this global L2 norm; None disables
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InvalidArgument("learning_rate must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidArgument("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidArgument(f"unknown optimizer {self.optimizer!r}")
        if self.input_scale is not None and not self.input_scale > 0:
            raise InvalidArgument("input_scale must be positive")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise InvalidArgument("clip_norm must be positive")


def train(model: Model, X, y, cfg: TrainConfig, on_epoch: Optional[Callable] = None):
    """Minibatch training on mean BCE. Returns ``(new_model, epoch_losses)``.

    ``X`` must already be scaled. The shuffle order is drawn from ``cfg.seed``,
    so equal inputs give bit-identical weights. ``on_epoch(epoch, model)`` is
    called after every epoch.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(X) == 0:
        raise InvalidArgument("empty dataset")
    if len(X) != len(y):
        raise InvalidArgument("dataset windows and labels differ in length")
    rng = np.random.default_rng(cfg.seed)
    params = [a.copy() for a in model.params()]
    m = [np.zeros_like(a) for a in params]
    v = [np.zeros_like(a) for a in params]
    step = 0
    history = []
    current = model.with_params(params)
    n = len(X)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        losses = np.empty(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch_losses, grads, _ = loss_and_gradients(current, X[idx], y[idx])
            losses[idx] = batch_losses
            scale = 1.0 / len(idx)
            if cfg.clip_norm is not None:
                norm = scale * np.sqrt(sum(float(np.sum(g * g)) for g in grads))
                if norm > cfg.clip_norm:
                    scale *= cfg.clip_norm / norm
            step += 1
            for k, g in enumerate(grads):
                g = g * scale
                if cfg.optimizer == "adam":
                    m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g
                    v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g * g
                    mhat = m[k] / (1 - cfg.beta1**step)
                    vhat = v[k] / (1 - cfg.beta2**step)
                    params[k] -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)
                else:
                    params[k] -= cfg.learning_rate * g
            current = model.with_params(params)
        history.append(float(losses.mean()))
        if on_epoch is not None:
            on_epoch(len(history), current)
    current.trained = model.trained or cfg.epochs > 0
    return current, history


def accuracy(model: Model, X, y, threshold: float = 0.5) -> float:
    p = predict_batch(model, X)
    return float(np.mean((p >= threshold) == (np.asarray(y) == 1)))


# --- serialization ----------------------------------------------------------

_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}


def _f64(arrays) -> bytes:
    flat = np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)
    return flat.astype(">f8").tobytes()


def save_weights(model: Model) -> bytes:
    """Versioned big-endian encoding. Layout is documented in the README."""
    head = MAGIC + struct.pack(">H", FORMAT_VERSION)
    if isinstance(model, SequenceClassifier):
        H, D = model.cell.hidden_size, model.cell.input_size
        head += struct.pack(">BIII", KIND_SEQUENCE, H, D, 1)
        head += struct.pack(">d", model.input_scale)
        return head + _f64(model.params())
    dims = b"".join(
        struct.pack(">IIB", layer.shape[0], layer.shape[1], _ACT_CODES[layer.activation])
        for layer in model.layers
    )
    head += struct.pack(">BI", KIND_DENSE, len(model.layers)) + dims
    return head + _f64(model.params())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CodecError("truncated weight blob")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def floats(self, count: int) -> np.ndarray:
        size = 8 * count
        if self.pos + size != len(self.data):
            raise CodecError(f"weight blob length mismatch: need {size} parameter bytes, have {len(self.data) - self.pos}")
        out = np.frombuffer(self.data, dtype=">f8", count=count, offset=self.pos).astype(np.float64)
        self.pos += size
        return out


def load_weights(data: bytes) -> Model:
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise CodecError("bad magic")
    r = _Reader(data)
    r.pos = 4
    (version,) = r.take(">H")
    if version != FORMAT_VERSION:
        raise CodecError(f"unsupported weight format version {version}")
    (kind,) = r.take(">B")
    try:
        if kind == KIND_SEQUENCE:
            H, D, out = r.take(">III")
            if out != 1 or H == 0 or D == 0:
                raise CodecError("invalid sequence classifier dimensions")
            (scale,) = r.take(">d")
            shapes = [(4 * H, D), (4 * H, H), (4 * H,), (1, H), (1,)]
            flat = r.floats(sum(int(np.prod(s)) for s in shapes))
            arrays = _split(flat, shapes)
            return SequenceClassifier(
                LstmCell(*arrays[:3]), DenseLayer(arrays[3], arrays[4], "sigmoid"), scale, True
            )
        if kind == KIND_DENSE:
            (n_layers,) = r.take(">I")
            if n_layers == 0:
                raise CodecError("network without layers")
            specs = [r.take(">IIB") for _ in range(n_layers)]
            shapes = []
            for n_out, n_in, code in specs:
                if code >= len(ACTIVATIONS):
                    raise CodecError(f"unknown activation code {code}")
                shapes += [(n_out, n_in), (n_out,)]
            flat = r.floats(sum(int(np.prod(s)) for s in shapes))
            arrays = _split(flat, shapes)
            layers = [
                DenseLayer(arrays[2 * i], arrays[2 * i + 1], ACTIVATIONS[code])
                for i, (_, _, code) in enumerate(specs)
            ]
            return DenseNetwork(layers, True)
    except InvalidArgument as exc:
        raise CodecError(str(exc)) from None
    raise CodecError(f"unknown model kind {kind}")


def _split(flat, shapes):
    out, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(flat[pos : pos + n].reshape(s))
        pos += n
    return out
