"""The adversary: a feature-based DNN occupancy detector and its metrics."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import neural
from .errors import CodecError, InvalidArgument, StateError

FEATURE_NAMES = ("mean_w", "std_w", "min_w", "max_w", "range_w", "sum_abs_diff_w", "onoff_events")
HIDDEN_WIDTHS = (32, 16)
ATTACK_WINDOW = 60
MODEL_MAGIC = b"AMLA"


@dataclass(frozen=True)
class FeatureVector:
    mean_w: float
    std_w: float
    min_w: float
    max_w: float
    range_w: float
    sum_abs_diff_w: float
    onoff_events: int

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in FEATURE_NAMES], dtype=np.float64)


def feature_matrix(windows, onoff_threshold_w: float) -> np.ndarray:
    """Vectorised :func:`extract_features` over a [N x T] array of windows."""
    W = np.asarray(windows, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] == 0:
        raise InvalidArgument("windows must be a non-empty [N x T] array")
    lo = W.min(axis=1)
    hi = W.max(axis=1)
    above = W > onoff_threshold_w
    return np.column_stack(
        [
            W.mean(axis=1),
            W.std(axis=1),
            lo,
            hi,
            hi - lo,
            np.abs(np.diff(W, axis=1)).sum(axis=1),
            (above[:, 1:] != above[:, :-1]).sum(axis=1),
        ]
    )


def extract_features(window, onoff_threshold_w: float) -> FeatureVector:
    w = np.asarray(window, dtype=np.float64)
    if w.size == 0:
        raise InvalidArgument("empty window")
    row = feature_matrix(w[None, :], onoff_threshold_w)[0]
    return FeatureVector(*(float(v) for v in row[:-1]), int(row[-1]))


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> "Metrics":
        total = tp + fp + fn + tn
        acc = (tp + tn) / total if total else 0.0
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        return cls(acc, prec, rec, f1, int(tp), int(fp), int(fn), int(tn))

    @classmethod
    def from_predictions(cls, predicted, labels) -> "Metrics":
        pred = np.asarray(predicted).astype(bool)
        lab = np.asarray(labels).astype(bool)
        return cls.from_counts(
            int(np.sum(pred & lab)),
            int(np.sum(pred & ~lab)),
            int(np.sum(~pred & lab)),
            int(np.sum(~pred & ~lab)),
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class AttackModel:
    network: neural.DenseNetwork
    feature_mean: np.ndarray
    feature_std: np.ndarray
    onoff_threshold_w: float

    def features(self, windows) -> np.ndarray:
        if self.feature_mean is None:
            raise StateError("feature scaler has not been fitted")
        F = feature_matrix(windows, self.onoff_threshold_w)
        return (F - self.feature_mean) / self.feature_std

    def predict_proba(self, windows) -> np.ndarray:
        return neural.predict_batch(self.network, self.features(windows))


def save_attack_model(model: AttackModel) -> bytes:
    """``AMLA | f64 threshold | u32 n | f64 mean x n | f64 std x n | dense weight blob``, big-endian."""
    n = len(model.feature_mean)
    head = MODEL_MAGIC + struct.pack(">dI", model.onoff_threshold_w, n)
    scaler = np.concatenate([model.feature_mean, model.feature_std]).astype(">f8").tobytes()
    return head + scaler + neural.save_weights(model.network)


def load_attack_model(data: bytes) -> AttackModel:
    data = bytes(data)
    if len(data) < 16 or data[:4] != MODEL_MAGIC:
        raise CodecError("not an attack model blob")
    thr, n = struct.unpack_from(">dI", data, 4)
    end = 16 + 16 * n
    if n != len(FEATURE_NAMES) or len(data) < end:
        raise CodecError("attack model scaler is truncated or malformed")
    scaler = np.frombuffer(data[16:end], dtype=">f8").astype(np.float64)
    net = neural.load_weights(data[end:])
    if not isinstance(net, neural.DenseNetwork) or net.input_size != n:
        raise CodecError("attack model network does not match its scaler")
    return AttackModel(net, scaler[:n], scaler[n:], thr)


def _check_labels(windows, labels):
    W = np.asarray(windows, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if W.ndim != 2 or len(W) == 0:
        raise InvalidArgument("need a non-empty [N x T] window array")
    if len(W) != len(y):
        raise InvalidArgument("windows and labels differ in length")
    return W, y


def train_attacker(windows, labels, cfg: neural.TrainConfig, onoff_threshold_w: float) -> AttackModel:
    """Fit a per-feature standardiser, then train a 32-16-1 relu network on the features."""
    W, y = _check_labels(windows, labels)
    if len(np.unique(y)) < 2:
        raise InvalidArgument("attacker training set must contain both occupancy classes")
    F = feature_matrix(W, onoff_threshold_w)
    mean = F.mean(axis=0)
    std = F.std(axis=0)
    std[std == 0] = 1.0
    net = neural.init_dense_network([F.shape[1], *HIDDEN_WIDTHS, 1], "relu", seed=cfg.seed)
    net, _ = neural.train(net, (F - mean) / std, y, cfg)
    return AttackModel(net, mean, std, onoff_threshold_w)


def evaluate(model: AttackModel, windows, labels, decision_threshold: float = 0.5) -> Metrics:
    W, y = _check_labels(windows, labels)
    pred = model.predict_proba(W) >= decision_threshold
    return Metrics.from_predictions(pred, y)


def train_sequence_attacker(windows, labels, cfg: neural.TrainConfig, hidden: int = 8) -> neural.SequenceClassifier:
    """Optional raw-sequence LSTM attacker, used to probe transfer beyond the feature DNN."""
    W, y = _check_labels(windows, labels)
    if len(np.unique(y)) < 2:
        raise InvalidArgument("attacker training set must contain both occupancy classes")
    scale = cfg.input_scale or 1.0 / max(float(W.max()), 1e-9)
    model = neural.init_sequence_classifier(hidden, 1, seed=cfg.seed, input_scale=scale)
    model, _ = neural.train(model, W * scale, y, cfg)
    return model


def evaluate_sequence(model: neural.SequenceClassifier, windows, labels, decision_threshold: float = 0.5) -> Metrics:
    W, y = _check_labels(windows, labels)
    pred = neural.predict_batch(model, W * model.input_scale) >= decision_threshold
    return Metrics.from_predictions(pred, y)
