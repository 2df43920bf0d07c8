"""Dense arithmetic and reverse-mode gradients over a fixed operator set.

Every loss in the package is assembled from the operators defined here
(matmul, broadcasting add/sub/mul, activations, norms, distance matrices,
row gathers and the ``max(0, .)`` hinge).  A ``Var`` records its parents
together with a closure mapping the upstream gradient onto each parent;
``backward`` walks the graph once in reverse topological order.

Values are plain ``numpy.ndarray`` objects.  Parameters are grouped in a
read-only ``ParamSet``.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

ACTIVATIONS = ("relu", "tanh", "identity")


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "parents", "op")

    def __init__(self, value, parents=(), op="leaf"):
        value = np.asarray(value)
        if not np.all(np.isfinite(value)):
            raise NumericError(op)
        self.value = value
        self.parents = parents
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_var(x):
    return x if isinstance(x, Var) else Var(x, op="const")


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_var(a), as_var(b)
    return Var(
        a.value + b.value,
        ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))),
        "add",
    )


def sub(a, b):
    a, b = as_var(a), as_var(b)
    return Var(
        a.value - b.value,
        ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: -_unbroadcast(g, b.shape))),
        "sub",
    )


def mul(a, b):
    a, b = as_var(a), as_var(b)
    return Var(
        a.value * b.value,
        (
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ),
        "mul",
    )


def scale(a, c):
    a = as_var(a)
    c = float(c)
    return Var(a.value * c, ((a, lambda g: g * c),), "scale")


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return Var(
        a.value @ b.value,
        ((a, lambda g: g @ b.value.T), (b, lambda g: a.value.T @ g)),
        "matmul",
    )


def relu(a):
    """``max(0, a)``; the subgradient at exactly zero is zero."""
    a = as_var(a)
    mask = a.value > 0
    return Var(np.where(mask, a.value, 0.0).astype(a.value.dtype), ((a, lambda g: g * mask),), "relu")


hinge = relu


def tanh(a):
    a = as_var(a)
    out = np.tanh(a.value)
    return Var(out, ((a, lambda g: g * (1.0 - out * out)),), "tanh")


def absolute(a):
    a = as_var(a)
    sign = np.sign(a.value)
    return Var(np.abs(a.value), ((a, lambda g: g * sign),), "abs")


def square(a):
    a = as_var(a)
    return Var(a.value * a.value, ((a, lambda g: 2.0 * g * a.value),), "square")


def sum_(a, axis=None):
    a = as_var(a)
    shape = a.shape
    if axis is None:

        def back(g):
            return np.broadcast_to(g, shape).copy()

    else:

        def back(g):
            return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return Var(a.value.sum(axis=axis), ((a, back),), "sum")


def mean(a):
    a = as_var(a)
    n = a.value.size
    if n == 0:
        raise DimensionError("mean of an empty array")
    return scale(sum_(a), 1.0 / n)


def frobenius_norm(a):
    """``sqrt(sum(a**2))`` with a zero subgradient at the origin."""
    a = as_var(a)
    norm = float(np.sqrt(np.sum(a.value * a.value)))

    def back(g):
        if norm == 0.0:
            return np.zeros_like(a.value)
        return g * a.value / norm

    return Var(np.asarray(norm, dtype=a.value.dtype), ((a, back),), "frobenius_norm")


def l2_normalize_rows(a, eps=1e-12):
    a = as_var(a)
    norms = np.sqrt(np.sum(a.value * a.value, axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    out = a.value / denom
    active = norms > eps

    def back(g):
        proj = g - out * np.sum(g * out, axis=1, keepdims=True)
        return np.where(active, proj, g) / denom

    return Var(out, ((a, back),), "l2_normalize")


def pairwise_sqdist(a, b):
    """Matrix of squared Euclidean distances between rows of ``a`` and ``b``."""
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_sqdist: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    diff = av[:, None, :] - bv[None, :, :]
    dist = np.einsum("ijk,ijk->ij", diff, diff)

    def back_a(g):
        return 2.0 * (av * g.sum(axis=1, keepdims=True) - g @ bv)

    def back_b(g):
        return 2.0 * (bv * g.sum(axis=0)[:, None] - g.T @ av)

    return Var(dist, ((a, back_a), (b, back_b)), "pairwise_sqdist")


def take_rows(a, idx):
    a = as_var(a)
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return Var(a.value[idx], ((a, back),), "take_rows")


def take2d(a, rows, cols):
    a = as_var(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out, (rows, cols), g)
        return out

    return Var(a.value[rows, cols], ((a, back),), "take2d")


def activate(a, activation):
    if activation == "relu":
        return relu(a)
    if activation == "tanh":
        return tanh(a)
    if activation == "identity":
        return as_var(a)
    raise ConfigError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def backward(root):
    """Return ``{id(var): gradient}`` for every node reachable from ``root``."""
    if root.value.size != 1:
        raise DimensionError(f"backward needs a scalar output, got shape {root.shape}")
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, fn in node.parents:
            pg = fn(g)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return grads


# ---------------------------------------------------------------------------
# parameters, gradients, optimizer
# ---------------------------------------------------------------------------


class ParamSet(Mapping):
    """Named, read-only collection of parameter arrays."""

    def __init__(self, arrays=None):
        self._data = {}
        for name, arr in dict(arrays or {}).items():
            arr = np.array(arr, copy=True)
            arr.setflags(write=False)
            self._data[name] = arr

    def __getitem__(self, name):
        return self._data[name]

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def __repr__(self):
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._data.items())
        return f"ParamSet({shapes})"

    def replace(self, **updates):
        data = dict(self._data)
        data.update(updates)
        return ParamSet(data)

    def map(self, fn):
        return ParamSet({k: fn(v) for k, v in self._data.items()})

    def astype(self, dtype):
        return self.map(lambda v: v.astype(dtype))

    def flat(self):
        if not self._data:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._data.values()])

    def same_layout(self, other):
        return list(self) == list(other) and all(self[k].shape == other[k].shape for k in self)

    def equals(self, other):
        return self.same_layout(other) and all(np.array_equal(self[k], other[k]) for k in self)


@dataclass(frozen=True)
class GradRecord:
    loss: float
    grads: ParamSet


def grad(loss_fn, params):
    """Evaluate ``loss_fn`` on leaf variables built from ``params``.

    ``loss_fn`` receives a dict of ``Var`` leaves keyed like ``params`` and
    must return a scalar ``Var``.  Parameters the loss does not touch get
    zero gradients.
    """
    leaves = {name: Var(arr, op=f"param:{name}") for name, arr in params.items()}
    out = as_var(loss_fn(leaves))
    if out.value.size != 1:
        raise DimensionError(f"loss must be scalar, got shape {out.shape}")
    table = backward(out)
    grads = {}
    for name, leaf in leaves.items():
        g = table.get(id(leaf))
        grads[name] = np.zeros_like(leaf.value) if g is None else g.astype(leaf.value.dtype)
    return GradRecord(float(out.value), ParamSet(grads))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(
            {k: np.zeros_like(v) for k, v in params.items()},
            {k: np.zeros_like(v) for k, v in params.items()},
            0,
        )


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update.  ``state`` is advanced in place."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    g_set = grads.grads if isinstance(grads, GradRecord) else grads
    if not state.m:
        fresh = AdamState.zeros_like(params)
        state.m, state.v = fresh.m, fresh.v
    if not params.same_layout(g_set):
        raise DimensionError("gradient layout does not match parameters")
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = g_set[name]
        if state.m[name].shape != p.shape:
            raise DimensionError(f"optimizer state for {name!r} has shape {state.m[name].shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        out[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return ParamSet(out)


# ---------------------------------------------------------------------------
# multilayer perceptron
# ---------------------------------------------------------------------------


def layer_names(i):
    return f"layer{i}.weight", f"layer{i}.bias"


def init_mlp(arch, rng, zero_last=False, dtype=np.float64):
    """He-normal weights, zero biases.  ``zero_last`` zeroes the output layer."""
    if len(arch) < 2 or any(int(d) < 1 for d in arch):
        raise ConfigError(f"invalid layer sizes {arch}")
    arrays = {}
    n_layers = len(arch) - 1
    for i in range(n_layers):
        w_name, b_name = layer_names(i)
        fan_in, fan_out = int(arch[i]), int(arch[i + 1])
        if zero_last and i == n_layers - 1:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        arrays[w_name] = w.astype(dtype)
        arrays[b_name] = np.zeros(fan_out, dtype=dtype)
    return ParamSet(arrays)


def mlp_graph(params, x, arch, activation="relu"):
    """Graph-building forward pass; ``params`` values may be arrays or Vars."""
    n_layers = len(arch) - 1
    h = as_var(x)
    if h.value.ndim != 2:
        raise DimensionError(f"input must be a 2-d batch, got shape {h.shape}")
    if h.shape[1] != arch[0]:
        raise DimensionError(f"layer0: input has {h.shape[1]} features, layer expects {arch[0]}")
    for i in range(n_layers):
        w_name, b_name = layer_names(i)
        if w_name not in params or b_name not in params:
            raise DimensionError(f"layer{i}: missing parameters")
        w, b = as_var(params[w_name]), as_var(params[b_name])
        if w.shape != (arch[i], arch[i + 1]) or b.shape != (arch[i + 1],):
            raise DimensionError(
                f"layer{i}: weight {w.shape} / bias {b.shape} inconsistent with "
                f"{arch[i]} -> {arch[i + 1]}"
            )
        h = add(matmul(h, w), b)
        if i < n_layers - 1:
            h = activate(h, activation)
    return h


def mlp_forward(params, x, arch, activation="relu"):
    """Pure forward pass returning a plain array."""
    return mlp_graph(params, np.asarray(x), arch, activation).value


def finite_difference_grad(loss_fn, params, step=1e-5):
    """Central differences of ``loss_fn`` (taking a dict of arrays, returning a scalar)."""
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            orig = arr[i]
            arr[i] = orig + step
            hi = float(value_of(loss_fn(base)))
            arr[i] = orig - step
            lo = float(value_of(loss_fn(base)))
            arr[i] = orig
            g[i] = (hi - lo) / (2.0 * step)
        out[name] = g
    return out


def gradient_relative_error(loss_fn, params, step=1e-5):
    """``|analytic - numeric| / max(|analytic|, |numeric|)`` over all parameters jointly."""
    analytic = grad(loss_fn, params).grads
    numeric = finite_difference_grad(loss_fn, params, step)
    a = np.concatenate([np.ravel(analytic[k]) for k in params])
    n = np.concatenate([np.ravel(numeric[k]) for k in params])
    scale_ = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale_ == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale_)
