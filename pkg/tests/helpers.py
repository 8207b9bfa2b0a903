"""Shared oracles and random-instance builders for the test suite."""

from __future__ import annotations

import numpy as np

from quadlaplace.nnet import NetworkSpec, forward, jacobian, init_params


def random_spec(rng, max_layers=3, max_width=50, max_dim=5, activation="tanh") -> NetworkSpec:
    n_layers = int(rng.integers(1, max_layers + 1))
    hidden = tuple(int(rng.integers(1, max_width + 1)) for _ in range(n_layers))
    return NetworkSpec(int(rng.integers(1, max_dim + 1)), hidden, activation)


def random_params(spec, rng, scale=1.0):
    """Glorot draw plus small random biases so bias paths are exercised."""
    theta = init_params(spec, rng) * scale
    return theta + 0.1 * rng.standard_normal(spec.n_params)


def fd_jacobian(spec, theta, x, eps=1e-5):
    out = np.empty(spec.n_params)
    for i in range(spec.n_params):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += eps
        tm[i] -= eps
        out[i] = (forward(spec, tp, x) - forward(spec, tm, x)) / (2 * eps)
    return out


def fd_hvp(spec, theta, x, v, eps=1e-5):
    return (jacobian(spec, theta + eps * v, x) - jacobian(spec, theta - eps * v, x)) / (2 * eps)


def rel_err(a, b, floor=1e-12):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


def straight_line_forward(W1, b1, w2, b2, x):
    """Independent one-hidden-layer tanh evaluator written with scalar loops."""
    total = b2
    for j in range(len(b1)):
        a = b1[j]
        for i in range(len(x)):
            a += W1[j][i] * x[i]
        total += w2[j] * np.tanh(a)
    return total


def bilinear_spec():
    """``f = w2 * (w1 * x + b1) + b2`` with identity activation; at x=1, b=0 it is ``w1 * w2``."""
    return NetworkSpec(1, (1,), "identity")


def spd_with_gap(rng, P, gap=1.5, negative=True):
    """Random symmetric matrix whose magnitude-dominant eigenvalue beats the next by ``gap``."""
    Q, _ = np.linalg.qr(rng.standard_normal((P, P)))
    rest = rng.uniform(-1.0, 1.0, size=P - 1)
    top = gap * max(np.max(np.abs(rest)), 1e-3) * rng.uniform(1.0, 1.5)
    evals = np.concatenate([[-top if negative else top], rest])
    return (Q * evals) @ Q.T, Q[:, 0], evals[0]
