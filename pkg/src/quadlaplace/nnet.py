"""Fully-connected scalar-output regression networks with hand-written autodiff.

Parameters live in one flat float64 vector ordered layer by layer, each layer
contributing its weight matrix (row-major, shape ``(fan_out, fan_in)``) followed
by its bias. Everything here is pure numpy: reverse mode for the parameter
Jacobian and forward-over-reverse for Hessian-vector products.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import atomic_write_bytes, atomic_write_text

ACTIVATIONS = ("tanh", "relu", "identity")
DEFAULT_DENSE_CAP = 2000


class CapacityError(ValueError):
    """Raised when a dense construction would exceed the configured size cap."""


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of an MLP ``R^D -> R``.

    ``hidden_layers`` may be empty, which gives a model that is linear in its
    parameters (and therefore has an identically zero parameter Hessian).
    """

    input_dim: int
    hidden_layers: tuple[int, ...] = ()
    activation: str = "tanh"
    output_dim: int = field(default=1, init=False)

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if int(self.input_dim) < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError(f"hidden layer widths must be positive, got {self.hidden_layers}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_layers, self.output_dim)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """``(fan_out, fan_in)`` for every affine layer, in forward order."""
        w = self.widths
        return [(w[i + 1], w[i]) for i in range(len(w) - 1)]

    @property
    def n_params(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_out, fan_in in self.layer_shapes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": list(self.hidden_layers),
            "activation": self.activation,
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        if d.get("output_dim", 1) != 1:
            raise ValueError("only univariate regression (output_dim=1) is supported")
        return cls(int(d["input_dim"]), tuple(d.get("hidden_layers", ())), d.get("activation", "tanh"))


def unflatten(spec: NetworkSpec, theta) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat parameter vector into per-layer ``(W, b)`` views.

    A leading batch axis is allowed: ``theta`` of shape ``(..., P)`` gives
    weights of shape ``(..., fan_out, fan_in)``.
    """
    theta = np.asarray(theta)
    if theta.shape[-1] != spec.n_params:
        raise ValueError(f"parameter vector has length {theta.shape[-1]}, expected {spec.n_params}")
    lead = theta.shape[:-1]
    layers = []
    pos = 0
    for fan_out, fan_in in spec.layer_shapes:
        n_w = fan_out * fan_in
        W = theta[..., pos:pos + n_w].reshape(*lead, fan_out, fan_in)
        pos += n_w
        b = theta[..., pos:pos + fan_out]
        pos += fan_out
        layers.append((W, b))
    return layers


def flatten(layers) -> np.ndarray:
    """Inverse of :func:`unflatten` for unbatched layers."""
    parts = []
    for W, b in layers:
        parts.append(np.asarray(W, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights and zero biases."""
    layers = []
    for fan_out, fan_in in spec.layer_shapes:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return flatten(layers)


def _check_theta(spec, theta):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.shape[0] != spec.n_params:
        raise ValueError(f"theta must have shape ({spec.n_params},), got {theta.shape}")
    return theta


def _check_x(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != spec.input_dim:
        raise ValueError(f"x must have shape ({spec.input_dim},), got {x.shape}")
    return x


def _check_X(spec, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"X must have shape (N, {spec.input_dim}), got {X.shape}")
    return X


# activation value, first and second derivative

def _act(name, a):
    if name == "tanh":
        return np.tanh(a)
    if name == "identity":
        return a.copy()
    return np.maximum(a, 0.0)


def _act_d1(name, a, h):
    if name == "tanh":
        return 1.0 - h * h
    if name == "identity":
        return np.ones_like(a)
    return (a > 0).astype(np.float64)


def _act_d2(name, a, h):
    if name == "tanh":
        return -2.0 * h * (1.0 - h * h)
    # relu (a.e.) and identity have zero second derivative
    return np.zeros_like(a)


class HvpWorkspace:
    """Per-layer scratch buffers for single-input forward and HVP sweeps.

    Not thread-safe; each concurrent caller should own one.
    """

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        w = spec.widths
        self.h = [np.empty(n) for n in w]          # post-activations, h[0] is the input
        self.a = [np.empty(n) for n in w[1:]]      # pre-activations
        self.hdot = [np.empty(n) for n in w]       # forward tangents of h
        self.adot = [np.empty(n) for n in w[1:]]
        self.out = np.empty(spec.n_params)


def _forward_into(spec, layers, x, ws):
    ws.h[0][:] = x
    n_layers = len(layers)
    for l, (W, b) in enumerate(layers):
        np.dot(W, ws.h[l], out=ws.a[l])
        ws.a[l] += b
        if l < n_layers - 1:
            ws.h[l + 1][:] = _act(spec.activation, ws.a[l])
        else:
            ws.h[l + 1][:] = ws.a[l]
    return ws.h[-1][0]


def forward(spec: NetworkSpec, theta, x) -> float:
    """Network output ``f(x, theta)`` for a single input vector."""
    theta = _check_theta(spec, theta)
    x = _check_x(spec, x)
    ws = HvpWorkspace(spec)
    return float(_forward_into(spec, unflatten(spec, theta), x, ws))


def jacobian(spec: NetworkSpec, theta, x) -> np.ndarray:
    """Gradient of the scalar output with respect to all parameters (one reverse sweep)."""
    theta = _check_theta(spec, theta)
    x = _check_x(spec, x)
    layers = unflatten(spec, theta)
    ws = HvpWorkspace(spec)
    _forward_into(spec, layers, x, ws)
    out = np.empty(spec.n_params)
    grads = unflatten(spec, out)
    g = np.ones(1)
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        gW, gb = grads[l]
        np.outer(g, ws.h[l], out=gW)
        gb[:] = g
        if l > 0:
            g = _act_d1(spec.activation, ws.a[l - 1], ws.h[l]) * (W.T @ g)
    return out


def hvp(spec: NetworkSpec, theta, x, v, ws: HvpWorkspace | None = None) -> np.ndarray:
    """Product of the parameter Hessian of ``f(x, .)`` with ``v``.

    Forward-mode differentiation (direction ``v``) of the reverse sweep; the
    Hessian is never formed. Returns a fresh array even when ``ws`` is reused.
    """
    theta = _check_theta(spec, theta)
    x = _check_x(spec, x)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (spec.n_params,):
        raise ValueError(f"v must have shape ({spec.n_params},), got {v.shape}")
    if ws is None:
        ws = HvpWorkspace(spec)
    elif ws.spec != spec:
        raise ValueError("workspace was built for a different NetworkSpec")
    act = spec.activation
    layers = unflatten(spec, theta)
    dirs = unflatten(spec, v)
    n_layers = len(layers)

    ws.h[0][:] = x
    ws.hdot[0][:] = 0.0
    for l, ((W, b), (dW, db)) in enumerate(zip(layers, dirs)):
        np.dot(W, ws.h[l], out=ws.a[l])
        ws.a[l] += b
        np.dot(W, ws.hdot[l], out=ws.adot[l])
        ws.adot[l] += dW @ ws.h[l]
        ws.adot[l] += db
        if l < n_layers - 1:
            ws.h[l + 1][:] = _act(act, ws.a[l])
            ws.hdot[l + 1][:] = _act_d1(act, ws.a[l], ws.h[l + 1]) * ws.adot[l]
        else:
            ws.h[l + 1][:] = ws.a[l]
            ws.hdot[l + 1][:] = ws.adot[l]

    hv = unflatten(spec, ws.out)
    g = np.ones(1)       # d f / d a_l
    gdot = np.zeros(1)   # its directional derivative
    for l in range(n_layers - 1, -1, -1):
        W, _ = layers[l]
        dW, _ = dirs[l]
        HW, Hb = hv[l]
        np.outer(gdot, ws.h[l], out=HW)
        HW += np.outer(g, ws.hdot[l])
        Hb[:] = gdot
        if l > 0:
            back = W.T @ g
            back_dot = W.T @ gdot + dW.T @ g
            s1 = _act_d1(act, ws.a[l - 1], ws.h[l])
            s2 = _act_d2(act, ws.a[l - 1], ws.h[l])
            gdot = s2 * ws.adot[l - 1] * back + s1 * back_dot
            g = s1 * back
    return ws.out.copy()


def dense_hessian(spec: NetworkSpec, theta, x, cap: int = DEFAULT_DENSE_CAP,
                  symmetrize: bool = True) -> np.ndarray:
    """Materialize the P x P parameter Hessian column by column from HVPs.

    Test/diagnostic helper only. ``symmetrize=False`` returns the raw columns.
    """
    P = spec.n_params
    if P > cap:
        raise CapacityError(f"dense Hessian needs P={P} <= cap={cap}")
    ws = HvpWorkspace(spec)
    M = np.empty((P, P))
    e = np.zeros(P)
    for i in range(P):
        e[i] = 1.0
        M[:, i] = hvp(spec, theta, x, e, ws)
        e[i] = 0.0
    if symmetrize:
        M = 0.5 * (M + M.T)
    return M


# ---------------------------------------------------------------------------
# batched versions, one row per input
# ---------------------------------------------------------------------------

def _forward_batch(spec, layers, X):
    hs = [X]
    pre = []
    for l, (W, b) in enumerate(layers):
        a = hs[-1] @ W.T + b
        pre.append(a)
        hs.append(_act(spec.activation, a) if l < len(layers) - 1 else a)
    return hs, pre


def predict(spec: NetworkSpec, theta, X) -> np.ndarray:
    """Outputs for every row of ``X``, shape ``(N,)``."""
    theta = _check_theta(spec, theta)
    X = _check_X(spec, X)
    hs, _ = _forward_batch(spec, unflatten(spec, theta), X)
    return hs[-1][:, 0]


def jacobian_batch(spec: NetworkSpec, theta, X) -> np.ndarray:
    """Per-input parameter Jacobians stacked as an ``(N, P)`` matrix."""
    theta = _check_theta(spec, theta)
    X = _check_X(spec, X)
    layers = unflatten(spec, theta)
    hs, pre = _forward_batch(spec, layers, X)
    N = X.shape[0]
    out = np.empty((N, spec.n_params))
    grads = unflatten(spec, out)
    g = np.ones((N, 1))
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        gW, gb = grads[l]
        np.multiply(g[:, :, None], hs[l][:, None, :], out=gW)
        gb[:] = g
        if l > 0:
            g = _act_d1(spec.activation, pre[l - 1], hs[l]) * (g @ W)
    return out


def hvp_batch(spec: NetworkSpec, theta, X, V) -> np.ndarray:
    """Row-wise HVPs: row ``n`` of the result is ``H(x_n) @ V[n]``.

    ``V`` has shape ``(N, P)`` (one direction per input) or ``(P,)`` (shared).
    """
    theta = _check_theta(spec, theta)
    X = _check_X(spec, X)
    V = np.asarray(V, dtype=np.float64)
    N = X.shape[0]
    if V.ndim == 1:
        V = np.broadcast_to(V, (N, spec.n_params))
    if V.shape != (N, spec.n_params):
        raise ValueError(f"V must have shape ({N}, {spec.n_params}), got {V.shape}")
    act = spec.activation
    layers = unflatten(spec, theta)
    dirs = unflatten(spec, V)
    n_layers = len(layers)

    hs, hdots, pre, adots = [X], [np.zeros_like(X)], [], []
    for l, ((W, b), (dW, db)) in enumerate(zip(layers, dirs)):
        a = hs[l] @ W.T + b
        adot = hdots[l] @ W.T + np.einsum("noi,ni->no", dW, hs[l]) + db
        pre.append(a)
        adots.append(adot)
        if l < n_layers - 1:
            h = _act(act, a)
            hs.append(h)
            hdots.append(_act_d1(act, a, h) * adot)
        else:
            hs.append(a)
            hdots.append(adot)

    out = np.empty((N, spec.n_params))
    hv = unflatten(spec, out)
    g = np.ones((N, 1))
    gdot = np.zeros((N, 1))
    for l in range(n_layers - 1, -1, -1):
        W, _ = layers[l]
        dW, _ = dirs[l]
        HW, Hb = hv[l]
        np.multiply(gdot[:, :, None], hs[l][:, None, :], out=HW)
        HW += g[:, :, None] * hdots[l][:, None, :]
        Hb[:] = gdot
        if l > 0:
            back = g @ W
            back_dot = gdot @ W + np.einsum("no,noi->ni", g, dW)
            s1 = _act_d1(act, pre[l - 1], hs[l])
            s2 = _act_d2(act, pre[l - 1], hs[l])
            gdot = s2 * adots[l - 1] * back + s1 * back_dot
            g = s1 * back
    return out


# ---------------------------------------------------------------------------
# serialization: raw little-endian float64 blob + JSON sidecar with the network shape
# ---------------------------------------------------------------------------

def save_params(path, spec: NetworkSpec, theta) -> None:
    path = Path(path)
    theta = _check_theta(spec, theta)
    atomic_write_bytes(path, theta.astype("<f8").tobytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    atomic_write_text(sidecar, json.dumps({"spec": spec.to_dict(), "n_params": spec.n_params}, indent=2) + "\n")


def load_params(path) -> tuple[NetworkSpec, np.ndarray]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    spec = NetworkSpec.from_dict(meta["spec"])
    theta = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
    if theta.shape[0] != spec.n_params:
        raise ValueError(f"{path}: blob holds {theta.shape[0]} values, spec needs {spec.n_params}")
    return spec, theta
