"""Billing-neutral adversarial perturbation driven by a local LSTM surrogate.

Noise is crafted by repeated ascent on the surrogate's loss at the true
occupancy label, then forced back into the feasible set: zero sum inside each
billing window, within +-epsilon * mean power of the original reading, and
never below zero watts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import neural
from .errors import InvalidArgument, StateError
from .timeseries import DEFAULT_WINDOW, LoadProfile, Tariff, compute_bill, labelled_windows

CONTEXT_LEN = 60
SURROGATE_HIDDEN = 8
PROJECTION_ROUNDS = 50
MAX_HALVINGS = 60
SUM_TOL = 1e-9
# the projection settles far inside SUM_TOL so rounding never approaches it
_PROJECT_TOL = 1e-12
# second input channel is the rectified first difference, amplified so that
# edges of a few hundred watts reach unit scale
DIFF_GAIN = 20.0
# keeps x + noise inside the L-inf ball after floating-point rounding
_BOUND_MARGIN = 1.0 - 1e-12


@dataclass(frozen=True)
class PrivacyLevel:
    level: str
    epsilon: float
    steps: int

    def __post_init__(self):
        if self.epsilon < 0 or self.steps < 0:
            raise InvalidArgument("epsilon and steps must be non-negative")

    @classmethod
    def named(cls, name: str) -> "PrivacyLevel":
        try:
            eps, steps = LEVELS[name]
        except KeyError:
            raise InvalidArgument(f"unknown privacy level {name!r}; choose from {', '.join(LEVELS)}") from None
        return cls(name, eps, steps)


LEVELS = {"off": (0.0, 0), "low": (0.05, 5), "medium": (0.15, 10), "high": (0.30, 20)}
LEVEL_ORDER = tuple(LEVELS)


def encode_windows(windows, scale: float) -> np.ndarray:
    """[N x T] watts -> [N x T x 2] of (scaled level, amplified |first difference|)."""
    W = np.asarray(windows, dtype=np.float64)
    d = np.zeros_like(W)
    d[:, 1:] = np.abs(W[:, 1:] - W[:, :-1])
    return np.stack([W * scale, d * (scale * DIFF_GAIN)], axis=2)


def _encode_backward(windows, dE, scale: float) -> np.ndarray:
    W = np.asarray(windows, dtype=np.float64)
    sign = np.sign(W[:, 1:] - W[:, :-1])
    g_diff = dE[:, 1:, 1] * sign * (scale * DIFF_GAIN)
    dx = dE[..., 0] * scale
    dx[:, 1:] += g_diff
    dx[:, :-1] -= g_diff
    return dx


@dataclass(eq=False)
class SurrogateModel:
    classifier: neural.SequenceClassifier
    context_len: int = CONTEXT_LEN

    @property
    def input_scale(self) -> float:
        return self.classifier.input_scale

    @property
    def trained(self) -> bool:
        return self.classifier.trained

    def predict(self, windows) -> np.ndarray:
        return neural.predict_batch(self.classifier, encode_windows(windows, self.input_scale))

    def input_gradient(self, windows, labels) -> np.ndarray:
        """d BCE / d watts for each window, exact through the encoding."""
        dE = neural.input_gradient_batch(self.classifier, encode_windows(windows, self.input_scale), labels)
        return _encode_backward(windows, dE, self.input_scale)


@dataclass(eq=False)
class PerturbedStream:
    readings: np.ndarray
    # one (sum before, sum after) row per complete billing window
    per_window_delta: np.ndarray
    window_len: int = DEFAULT_WINDOW

    @property
    def residual_len(self) -> int:
        return len(self.readings) - len(self.per_window_delta) * self.window_len


def zero_sum_project(noise, w: int = DEFAULT_WINDOW) -> np.ndarray:
    """Subtract each complete window's mean; a trailing partial window is left as is."""
    if w < 2:
        raise InvalidArgument("billing window must span at least 2 samples")
    x = np.array(noise, dtype=np.float64)
    full = (len(x) // w) * w
    blocks = x[:full].reshape(-1, w)
    blocks -= blocks.mean(axis=1, keepdims=True)
    return x


def _project_feasible(noise, lo, hi, window_sums):
    """Alternating projection between the zero-sum subspace and the box [lo, hi].

    Operates on [n_windows x w] arrays. Windows that do not settle below the
    internal sum tolerance have their noise halved and are retried; after
    ``MAX_HALVINGS`` they fall back to zero noise.
    """
    tol = _PROJECT_TOL * np.maximum(1.0, window_sums)
    out = noise.copy()
    start = noise.copy()
    pending = np.arange(len(out))
    for _ in range(MAX_HALVINGS + 1):
        cur = start[pending]
        clo, chi, ctol = lo[pending], hi[pending], tol[pending]
        # each window iterates only until it settles
        active = np.arange(len(cur))
        for _ in range(PROJECTION_ROUNDS):
            sub = cur[active]
            sub = np.clip(sub - sub.mean(axis=1, keepdims=True), clo[active], chi[active])
            cur[active] = sub
            active = active[np.abs(sub.sum(axis=1)) > ctol[active]]
            if len(active) == 0:
                break
        ok = np.abs(cur.sum(axis=1)) <= ctol
        out[pending[ok]] = cur[ok]
        pending = pending[~ok]
        if len(pending) == 0:
            return out
        half = cur[~ok]
        start[pending] = 0.5 * (half - half.mean(axis=1, keepdims=True))
    out[pending] = 0.0
    return out


def _context_batches(full: int, context_len: int):
    """Chunk boundaries covering [0, full): equal chunks plus one shorter tail chunk."""
    n_main = full // context_len
    tail = (n_main * context_len, full) if full > n_main * context_len else None
    return n_main, tail


def perturb(
    surrogate: SurrogateModel,
    readings,
    occupancy_hint,
    level: PrivacyLevel,
    w: int = DEFAULT_WINDOW,
) -> PerturbedStream:
    if w < 2:
        raise InvalidArgument("billing window must span at least 2 samples")
    if surrogate is None or not surrogate.trained:
        raise StateError("surrogate model has not been trained")
    x = np.asarray(readings, dtype=np.float64)
    hint = np.asarray(occupancy_hint).reshape(-1)
    if len(hint) != len(x):
        raise InvalidArgument("occupancy hint must match the readings in length")
    if np.any(x < 0):
        raise InvalidArgument("readings must be non-negative")
    L = surrogate.context_len
    if L % w:
        raise InvalidArgument("surrogate context length must be a multiple of the billing window")

    full = (len(x) // w) * w
    base = x[:full]
    win_before = base.reshape(-1, w).sum(axis=1)
    out = x.copy()
    if level.epsilon == 0 or level.steps == 0 or full == 0 or len(x) == 0:
        return PerturbedStream(out, np.column_stack([win_before, win_before]), w)

    bound = level.epsilon * float(x.mean())
    alpha = bound / level.steps
    lo = np.maximum(-bound * _BOUND_MARGIN, -base).reshape(-1, w)
    hi = np.full_like(lo, bound * _BOUND_MARGIN)
    dead = np.all(base.reshape(-1, w) == 0, axis=1)
    hi[dead] = 0.0

    n_main, tail = _context_batches(full, L)
    chunks = []
    if n_main:
        chunks.append((0, n_main * L, L))
    if tail:
        chunks.append((tail[0], tail[1], tail[1] - tail[0]))
    labels = []
    for a, b, length in chunks:
        labels.append((hint[a:b].reshape(-1, length).mean(axis=1) >= 0.5).astype(np.float64))

    noise = np.zeros(full)
    for _ in range(level.steps):
        cand = base + noise
        step = np.empty(full)
        for (a, b, length), y in zip(chunks, labels):
            g = surrogate.input_gradient(cand[a:b].reshape(-1, length), y)
            # ascend inside the zero-sum subspace, each chunk scaled to unit L-inf norm
            g = zero_sum_project(g.reshape(-1), w).reshape(-1, length)
            norm = np.abs(g).max(axis=1, keepdims=True)
            g = np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)
            step[a:b] = g.reshape(-1)
        noise = noise + alpha * step
        noise = _project_feasible(noise.reshape(-1, w), lo, hi, win_before).reshape(-1)

    out[:full] = base + noise
    win_after = out[:full].reshape(-1, w).sum(axis=1)
    bad = np.abs(win_after - win_before) > SUM_TOL * np.maximum(1.0, win_before)
    if np.any(bad):
        rows = out[:full].reshape(-1, w)
        rows[bad] = base.reshape(-1, w)[bad]
        win_after = rows.sum(axis=1)
    return PerturbedStream(out, np.column_stack([win_before, win_after]), w)


def check_stream(original, stream: PerturbedStream, level: PrivacyLevel) -> dict:
    """Post-hoc verification of the three stream invariants; returns the worst observed values."""
    x = np.asarray(original, dtype=np.float64)
    w = stream.window_len
    full = (len(x) // w) * w
    before = x[:full].reshape(-1, w).sum(axis=1)
    after = stream.readings[:full].reshape(-1, w).sum(axis=1)
    rel = np.abs(after - before) / np.maximum(1.0, before) if full else np.zeros(0)
    bound = level.epsilon * float(x.mean()) if len(x) else 0.0
    dev = np.abs(stream.readings[:full] - x[:full])
    return {
        "length_ok": len(stream.readings) == len(x),
        "residual_ok": bool(np.array_equal(stream.readings[full:], x[full:])),
        "min_reading": float(stream.readings.min()) if len(x) else 0.0,
        "max_window_rel_delta": float(rel.max()) if len(rel) else 0.0,
        "max_abs_deviation": float(dev.max()) if len(dev) else 0.0,
        "bound": bound,
    }


def stream_ok(original, stream: PerturbedStream, level: PrivacyLevel) -> bool:
    c = check_stream(original, stream, level)
    return (
        c["length_ok"]
        and c["residual_ok"]
        and c["min_reading"] >= 0
        and c["max_window_rel_delta"] <= SUM_TOL
        and c["max_abs_deviation"] <= c["bound"]
    )


def train_surrogate(
    history: LoadProfile,
    cfg: neural.TrainConfig,
    context_len: int = CONTEXT_LEN,
    hidden: int = SURROGATE_HIDDEN,
    warm_start: Optional[neural.SequenceClassifier] = None,
):
    """Train the LSTM surrogate on the household's own labelled history.

    With ``warm_start`` the population model's weights (and its input scale)
    seed the optimiser. Returns ``(SurrogateModel, epoch_losses)``.
    """
    model, losses = _train_for(history, cfg, context_len, warm_start, None, hidden)
    return SurrogateModel(model, context_len), losses


def _train_for(history, cfg, context_len, warm_start, on_epoch, hidden=SURROGATE_HIDDEN):
    W, y = labelled_windows(history, context_len)
    if len(W) == 0 or len(np.unique(y)) < 2:
        raise InvalidArgument("surrogate history must contain both occupancy classes")
    if warm_start is not None:
        model = warm_start.copy()
        model.trained = False
        scale = cfg.input_scale or model.input_scale
        model.input_scale = scale
    else:
        scale = cfg.input_scale or 1.0 / max(float(W.max()), 1e-9)
        model = neural.init_sequence_classifier(hidden, 2, seed=cfg.seed, input_scale=scale)
    model, losses = neural.train(model, encode_windows(W, scale), y, cfg, on_epoch)
    model.input_scale = scale
    return model, losses


class _TargetReached(Exception):
    pass


def epochs_to_accuracy(
    history: LoadProfile,
    held_out: LoadProfile,
    cfg: neural.TrainConfig,
    target: float = 0.80,
    context_len: int = CONTEXT_LEN,
    warm_start: Optional[neural.SequenceClassifier] = None,
) -> Optional[int]:
    """First epoch (up to ``cfg.epochs``) whose surrogate reaches ``target`` held-out accuracy, else None."""
    reached = []

    def check(epoch, model):
        if surrogate_accuracy(SurrogateModel(model, context_len), held_out) >= target:
            reached.append(epoch)
            raise _TargetReached

    if warm_start is not None:
        start = SurrogateModel(warm_start, context_len)
        if surrogate_accuracy(start, held_out) >= target:
            return 0
    try:
        _train_for(history, cfg, context_len, warm_start, check)
    except _TargetReached:
        return reached[0]
    return None


def surrogate_accuracy(surrogate: SurrogateModel, profile: LoadProfile) -> float:
    W, y = labelled_windows(profile, surrogate.context_len)
    return float(np.mean((surrogate.predict(W) >= 0.5) == (y == 1)))


@dataclass(frozen=True)
class BillingReport:
    bill_before: float
    bill_after: float
    rel_bill_delta: float
    max_window_delta: float


def verify_billing(original: LoadProfile, perturbed: PerturbedStream, tariff: Tariff) -> BillingReport:
    if len(perturbed.readings) != len(original):
        raise InvalidArgument("perturbed stream length differs from the original")
    after = LoadProfile(original.household_id, perturbed.readings, original.occupancy, original.sampling_period_s)
    before_bill = compute_bill(original, tariff)
    after_bill = compute_bill(after, tariff)
    rel = abs(after_bill - before_bill) / max(abs(before_bill), 1e-300) if before_bill else abs(after_bill)
    d = perturbed.per_window_delta
    max_delta = float(np.max(np.abs(d[:, 1] - d[:, 0]))) if len(d) else 0.0
    return BillingReport(before_bill, after_bill, rel, max_delta)
