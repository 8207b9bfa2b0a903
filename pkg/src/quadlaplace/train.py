"""MAP training (full-batch Adam on MSE + weight decay) and inner cross-validation."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .nnet import NetworkSpec, init_params, unflatten

DEFAULT_WEIGHT_DECAYS = (0.0, 1e-4, 1e-3)
DEFAULT_UNITS = (20, 30, 50)
DEFAULT_LAYERS = (1, 2, 3)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, loss):
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    weight_decay: float = 0.0
    learning_rate: float = 1e-3
    epochs: int = 5000
    seed: int = 0
    early_stop_patience: int | None = None

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be positive or None")


def loss_and_grad(spec: NetworkSpec, theta, X, y, weight_decay=0.0):
    """Mean squared error plus ``weight_decay * ||theta||^2`` and its gradient."""
    layers = unflatten(spec, theta)
    act = spec.activation
    hs = [X]
    pre = []
    for l, (W, b) in enumerate(layers):
        a = hs[-1] @ W.T + b
        pre.append(a)
        if l < len(layers) - 1:
            hs.append(np.tanh(a) if act == "tanh" else (a if act == "identity" else np.maximum(a, 0.0)))
        else:
            hs.append(a)
    resid = hs[-1][:, 0] - y
    N = X.shape[0]
    loss = float(resid @ resid) / N + weight_decay * float(theta @ theta)

    grad = np.empty_like(theta)
    grads = unflatten(spec, grad)
    g = (2.0 / N) * resid[:, None]
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        gW, gb = grads[l]
        np.dot(g.T, hs[l], out=gW)
        gb[:] = g.sum(axis=0)
        if l > 0:
            back = g @ W
            if act == "tanh":
                g = back * (1.0 - hs[l] * hs[l])
            elif act == "relu":
                g = back * (pre[l - 1] > 0)
            else:
                g = back
    grad += (2.0 * weight_decay) * theta
    return loss, grad


def train_map(spec: NetworkSpec, X, y, cfg: TrainConfig, theta0=None, return_log=False,
              X_val=None, y_val=None):
    """Full-batch Adam from a seeded Glorot init.

    Returns ``theta`` (and the per-epoch loss list when ``return_log``). With
    ``early_stop_patience`` set, validation MSE on ``(X_val, y_val)`` (or the
    training loss if none given) decides when to stop and the best iterate
    is returned.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise ValueError("X and y must be non-empty with matching lengths")
    rng = np.random.default_rng(cfg.seed)
    theta = init_params(spec, rng) if theta0 is None else np.array(theta0, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    lr = cfg.learning_rate
    log = []
    best = (np.inf, theta.copy())
    since_best = 0
    for epoch in range(1, cfg.epochs + 1):
        loss, grad = loss_and_grad(spec, theta, X, y, cfg.weight_decay)
        if not np.isfinite(loss):
            raise DivergenceError(epoch, loss)
        log.append(loss)
        if cfg.early_stop_patience is not None:
            if X_val is not None:
                score = _mse(spec, theta, X_val, y_val)
            else:
                score = loss
            if score < best[0]:
                best = (score, theta.copy())
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.early_stop_patience:
                    theta = best[1]
                    break
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad * grad
        mhat = m / (1 - b1 ** epoch)
        vhat = v / (1 - b2 ** epoch)
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
    else:
        if cfg.early_stop_patience is not None:
            final = _mse(spec, theta, X_val, y_val) if X_val is not None else \
                loss_and_grad(spec, theta, X, y, cfg.weight_decay)[0]
            if final >= best[0]:
                theta = best[1]
    if return_log:
        return theta, log
    return theta


def _mse(spec, theta, X, y):
    loss, _ = loss_and_grad(spec, theta, X, y, 0.0)
    return loss


def kfold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffled partition of ``range(n)`` into ``k`` folds."""
    if n // k < 2:
        raise ValueError(f"{k}-fold CV on {n} samples leaves folds with fewer than 2 samples")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def default_search_grid(input_dim: int, activation: str = "tanh"):
    """The 3 x 3 x 3 grid over (layers, units, weight decay)."""
    specs = [NetworkSpec(input_dim, (u,) * n, activation)
             for n, u in itertools.product(DEFAULT_LAYERS, DEFAULT_UNITS)]
    return specs, list(DEFAULT_WEIGHT_DECAYS)


def inner_cv_select(spec_grid, X, y, cfg_grid, n_folds: int = 5, seed: int = 0,
                    return_scores=False):
    """Pick the (spec, config) pair with lowest mean validation MSE.

    ``cfg_grid`` is a list of :class:`TrainConfig`. Ties go to fewer
    parameters, then to lower weight decay. Every (architecture, config,
    fold) fit gets a seed derived from ``seed`` and its grid position; all
    fits sharing an architecture and optimizer settings are trained together
    with :func:`train_stacked`. Early stopping is not used inside CV.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    spec_grid = list(spec_grid)
    cfg_grid = list(cfg_grid)
    if not spec_grid or not cfg_grid:
        raise ValueError("empty hyperparameter grid")
    if len(spec_grid) == 1 and len(cfg_grid) == 1 and not return_scores:
        return spec_grid[0], cfg_grid[0]
    n = X.shape[0]
    folds = kfold_indices(n, n_folds, seed)
    train_idx = [np.setdiff1d(np.arange(n), val, assume_unique=True) for val in folds]
    width = max(len(t) for t in train_idx)

    groups = {}
    for j, cfg in enumerate(cfg_grid):
        groups.setdefault((cfg.learning_rate, cfg.epochs), []).append(j)

    scores = {}
    for i, spec in enumerate(spec_grid):
        for (lr, epochs), js in groups.items():
            jobs = [(j, k) for j in js for k in range(n_folds)]
            Xs = np.zeros((len(jobs), width, X.shape[1]))
            ys = np.zeros((len(jobs), width))
            ws = np.zeros((len(jobs), width))
            for m, (_, k) in enumerate(jobs):
                t = train_idx[k]
                Xs[m, :len(t)] = X[t]
                ys[m, :len(t)] = y[t]
                ws[m, :len(t)] = 1.0
            thetas = train_stacked(
                spec, Xs, ys, ws,
                [cfg_grid[j].weight_decay for j, _ in jobs],
                [_derive_seed(seed, i, j, k) for j, k in jobs],
                lr, epochs,
            )
            errs = {}
            for m, (j, k) in enumerate(jobs):
                errs.setdefault(j, []).append(_mse(spec, thetas[m], X[folds[k]], y[folds[k]]))
            for j in js:
                scores[(i, j)] = float(np.mean(errs[j]))
    best = min(scores, key=lambda ij: (scores[ij], spec_grid[ij[0]].n_params,
                                       cfg_grid[ij[1]].weight_decay))
    choice = spec_grid[best[0]], cfg_grid[best[1]]
    if return_scores:
        return choice, scores
    return choice


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def train_stacked(spec: NetworkSpec, Xs, ys, ws, weight_decays, seeds, learning_rate, epochs):
    """Train ``M`` independent same-architecture models in one batched Adam loop.

    ``Xs`` is ``(M, n, D)``, ``ys`` and ``ws`` are ``(M, n)``; ``ws`` holds row
    weights (1 for real rows, 0 for padding) so folds of unequal size can share
    one array. Model ``m`` minimizes its own weighted MSE plus
    ``weight_decays[m] * ||theta_m||^2``. Returns ``(M, P)`` parameters.
    """
    Xs = np.asarray(Xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    ws = np.asarray(ws, dtype=np.float64)
    M = Xs.shape[0]
    lam = np.asarray(weight_decays, dtype=np.float64)[:, None]
    scale = (2.0 / ws.sum(axis=1))[:, None] * ws            # d(mse)/d(resid) weights
    theta = np.stack([init_params(spec, np.random.default_rng(s)) for s in seeds])
    act = spec.activation
    mom = np.zeros_like(theta)
    vel = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    grad = np.empty_like(theta)
    grads = unflatten(spec, grad)
    n_layers = len(spec.layer_shapes)
    for epoch in range(1, epochs + 1):
        layers = unflatten(spec, theta)
        hs = [Xs]
        pre = []
        for l, (W, b) in enumerate(layers):
            a = np.matmul(hs[-1], W.transpose(0, 2, 1)) + b[:, None, :]
            pre.append(a)
            if l < n_layers - 1:
                hs.append(np.tanh(a) if act == "tanh" else (a if act == "identity" else np.maximum(a, 0.0)))
            else:
                hs.append(a)
        resid = hs[-1][:, :, 0] - ys
        g = (scale * resid)[:, :, None]
        for l in range(n_layers - 1, -1, -1):
            W, _ = layers[l]
            gW, gb = grads[l]
            np.matmul(g.transpose(0, 2, 1), hs[l], out=gW)
            gb[:] = g.sum(axis=1)
            if l > 0:
                back = np.matmul(g, W)
                if act == "tanh":
                    g = back * (1.0 - hs[l] * hs[l])
                elif act == "relu":
                    g = back * (pre[l - 1] > 0)
                else:
                    g = back
        grad += 2.0 * lam * theta
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(epoch, float("nan"))
        mom *= b1
        mom += (1 - b1) * grad
        vel *= b2
        vel += (1 - b2) * grad * grad
        step = learning_rate * (mom / (1 - b1 ** epoch)) / (np.sqrt(vel / (1 - b2 ** epoch)) + eps)
        theta = theta - step
    return theta
