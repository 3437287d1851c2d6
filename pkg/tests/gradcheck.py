"""Backprop vs central finite differences on random small models."""

import numpy as np

from amlodab import neural

from oracles import central_difference, dense_loss, lstm_loss, max_relative_error

H_STEP = 1e-4


def _randomise(model, rng, spread=1.0):
    return model.with_params([rng.uniform(-spread, spread, size=a.shape) for a in model.params()])


def lstm_case(rng):
    """Worst relative error over parameter and input gradients of one random LSTM."""
    H = int(rng.integers(1, 9))
    D = int(rng.integers(1, 3))
    T = int(rng.integers(1, 11))
    model = _randomise(neural.init_sequence_classifier(H, D), rng)
    x = rng.normal(size=(T, D))
    y = int(rng.integers(2))
    _, grads, dX = neural.loss_and_gradients(model, x[None], [y])

    params = [a.copy() for a in model.params()]
    num_p = central_difference(lambda: lstm_loss(params, x, y, H), params, H_STEP)
    xs = [x.copy()]
    num_x = central_difference(lambda: lstm_loss(params, xs[0], y, H), xs, H_STEP)
    return max(max_relative_error(grads, num_p), max_relative_error([dX[0]], num_x))


def dense_case(rng):
    depth = int(rng.integers(1, 4))
    sizes = [int(rng.integers(1, 9)) for _ in range(depth)] + [1]
    act = ["relu", "tanh", "sigmoid", "identity"][int(rng.integers(4))]
    model = _randomise(neural.init_dense_network(sizes, act), rng)
    acts = [layer.activation for layer in model.layers]
    x = rng.normal(size=sizes[0])
    y = int(rng.integers(2))
    _, grads, dX = neural.loss_and_gradients(model, x[None], [y])

    params = [a.copy() for a in model.params()]
    num_p = central_difference(lambda: dense_loss(params, acts, x, y), params, H_STEP)
    xs = [x.copy()]
    num_x = central_difference(lambda: dense_loss(params, acts, xs[0], y), xs, H_STEP)
    return max(max_relative_error(grads, num_p), max_relative_error([dX[0]], num_x))
