"""
Small reverse-mode differentiation tape over numpy arrays.

Each op returns a Var that remembers its parents and a backward function mapping the
output gradient to one gradient per parent. Broadcasting is undone in backward(), so ops
may return gradients in the broadcast output shape.

The dense map, the gated unit and the weighted cross-entropy are coarse ops with
hand-derived backward passes; everything else is composed from elementwise primitives.
"""

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit, log_softmax, softmax

from src.errors import ParameterError

LOG_2PI = math.log(2.0 * math.pi)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Var:
    """A node on the tape."""

    __slots__ = ("value", "parents", "backward_fn", "grad", "name")

    def __init__(
        self,
        value,
        parents: Sequence["Var"] = (),
        backward_fn: Optional[BackwardFn] = None,
        name: Optional[str] = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Var{label}(shape={self.shape})"


def lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topological(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Var) -> None:
    """Accumulate d root / d node into every node's .grad. root must be a scalar."""
    if root.value.size != 1:
        raise ParameterError(f"backward() needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None or node.backward_fn is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            if g is None:
                continue
            g = _unbroadcast(np.asarray(g, dtype=np.float64), parent.shape)
            parent.grad = g if parent.grad is None else parent.grad + g


# Elementwise primitives


def add(a, b) -> Var:
    a, b = lift(a), lift(b)
    return Var(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Var:
    a, b = lift(a), lift(b)
    return Var(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Var:
    a, b = lift(a), lift(b)
    return Var(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def neg(a) -> Var:
    a = lift(a)
    return Var(-a.value, (a,), lambda g: (-g,))


def scale(a, c: float) -> Var:
    a = lift(a)
    return Var(a.value * c, (a,), lambda g: (g * c,))


def exp(a) -> Var:
    a = lift(a)
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def sigmoid(a) -> Var:
    a = lift(a)
    out = expit(a.value)
    return Var(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Var:
    a = lift(a)
    out = np.tanh(a.value)
    return Var(out, (a,), lambda g: (g * (1.0 - out**2),))


def square(a) -> Var:
    a = lift(a)
    return Var(a.value**2, (a,), lambda g: (2.0 * g * a.value,))


# Reductions and reshaping


def sum_last(a) -> Var:
    a = lift(a)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, -1), a.shape).copy(),)

    return Var(a.value.sum(axis=-1), (a,), back)


def sum_all(a) -> Var:
    a = lift(a)
    return Var(a.value.sum(), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean_all(a) -> Var:
    a = lift(a)
    n = max(a.value.size, 1)
    return Var(a.value.mean(), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def take_last(a, index: slice) -> Var:
    """a[..., index]."""
    a = lift(a)

    def back(g):
        out = np.zeros(a.shape)
        out[..., index] = g
        return (out,)

    return Var(a.value[..., index], (a,), back)


def concat(*parts) -> Var:
    """Concatenate on the trailing axis, broadcasting the leading axes."""
    parts = [lift(p) for p in parts]
    lead = np.broadcast_shapes(*(p.shape[:-1] for p in parts))
    values = [np.broadcast_to(p.value, lead + p.shape[-1:]) for p in parts]
    sizes = np.cumsum([p.shape[-1] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=-1))

    return Var(np.concatenate(values, axis=-1), parts, back)


# Coarse ops with hand-derived backward passes


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def dense(x, weight: Var, bias: Var) -> Var:
    """x @ W.T + b over the trailing axis."""
    x = lift(x)
    out = x.value @ weight.value.T + bias.value

    def back(g):
        gx = g @ weight.value
        g2 = _flat(g)
        x2 = _flat(np.broadcast_to(x.value, g.shape[:-1] + x.shape[-1:]))
        return gx, g2.T @ x2, g2.sum(axis=0)

    return Var(out, (x, weight, bias), back)


GATED_WEIGHTS = ("f", "i", "c", "o", "s")


def _gated_forward(z, w):
    af = z @ w["f"][0].T + w["f"][1]
    ai = z @ w["i"][0].T + w["i"][1]
    ac = z @ w["c"][0].T + w["c"][1]
    ao = z @ w["o"][0].T + w["o"][1]
    f, i, c, o = expit(af), expit(ai), np.tanh(ac), expit(ao)
    mean = f * z + i * c
    tm = np.tanh(mean)
    h = o * tm
    log_std = h @ w["s"][0].T + w["s"][1]
    return f, i, c, o, mean, tm, h, log_std


def gated(z, weights: dict[str, tuple[Var, Var]]) -> Var:
    """
    Gated transition unit. Returns concat(mean, log_std) on the trailing axis.

    Forget, input and output gates are sigmoids of z, the candidate is tanh of z; the mean
    is the updated cell state f*z + i*c and log_std is a linear head on o*tanh(mean).
    """
    z = lift(z)
    missing = [k for k in GATED_WEIGHTS if k not in weights]
    if missing:
        raise ParameterError(f"gated unit is missing weights {missing}")
    w = {k: (weights[k][0].value, weights[k][1].value) for k in GATED_WEIGHTS}
    f, i, c, o, mean, tm, h, log_std = _gated_forward(z.value, w)
    d = z.shape[-1]

    def back(g):
        g_mean, g_ls = g[..., :d], g[..., d:]
        gh = g_ls @ w["s"][0]
        go = gh * tm
        g_cell = g_mean + gh * o * (1.0 - tm**2)
        pre = {
            "f": g_cell * z.value * f * (1.0 - f),
            "i": g_cell * c * i * (1.0 - i),
            "c": g_cell * i * (1.0 - c**2),
            "o": go * o * (1.0 - o),
        }
        gz = g_cell * f
        z2 = _flat(np.broadcast_to(z.value, g_mean.shape))
        grads = []
        for k in ("f", "i", "c", "o"):
            gz = gz + pre[k] @ w[k][0]
            ga2 = _flat(pre[k])
            grads += [ga2.T @ z2, ga2.sum(axis=0)]
        gl2, h2 = _flat(g_ls), _flat(h)
        grads += [gl2.T @ h2, gl2.sum(axis=0)]
        return (gz, *grads)

    parents = [z]
    for k in GATED_WEIGHTS:
        parents += [weights[k][0], weights[k][1]]
    return Var(np.concatenate([mean, log_std], axis=-1), parents, back)


def gated_mean_jacobian(z: np.ndarray, weights: dict[str, tuple[np.ndarray, np.ndarray]]):
    """Analytic d mean / d z of the gated unit at a single z."""
    z = np.asarray(z, dtype=np.float64)
    f, i, c, _, _, _, _, _ = _gated_forward(z, weights)
    return (
        np.diag(f)
        + (z * f * (1.0 - f))[:, None] * weights["f"][0]
        + (c * i * (1.0 - i))[:, None] * weights["i"][0]
        + (i * (1.0 - c**2))[:, None] * weights["c"][0]
    )


def weighted_ce_loglik(logits, target: np.ndarray, class_weights: Sequence[float]) -> Var:
    """
    Class-weighted, ignorance-masked categorical log-likelihood.

    logits and target have P*K trailing entries (P cells, K channels each). Each cell's
    label is the argmax of its target masses and its weight is w[label] * (1 - omega).
    Returns the summed weighted log-softmax of the labels, one value per leading index.
    """
    logits = lift(logits)
    k = len(class_weights)
    target = np.asarray(target, dtype=np.float64)
    if target.shape[-1] % k or logits.shape[-1] != target.shape[-1]:
        raise ParameterError(
            f"logits {logits.shape} and target {target.shape} must hold cells of {k} channels"
        )
    lead = logits.shape[:-1]
    z = logits.value.reshape(lead + (-1, k))
    y = target.reshape(target.shape[:-1] + (-1, k))
    onehot = np.eye(k)[y.argmax(axis=-1)]
    coeff = onehot * np.asarray(class_weights)[y.argmax(axis=-1)][..., None]
    coeff = coeff * (1.0 - y[..., -1:])
    logp = log_softmax(z, axis=-1)
    out = np.sum(coeff * logp, axis=(-2, -1))

    def back(g):
        probs = softmax(z, axis=-1)
        coeff_b = np.broadcast_to(coeff, z.shape)
        local = coeff_b - probs * coeff_b.sum(axis=-1, keepdims=True)
        return ((np.expand_dims(g, (-2, -1)) * local).reshape(logits.shape),)

    return Var(out, (logits,), back)


# Log-densities composed from primitives


def diag_logpdf(x, mean, log_std) -> Var:
    """Diagonal-Gaussian log-density, summed over the trailing axis."""
    diff = sub(x, mean)
    zz = mul(diff, exp(neg(log_std)))
    d = zz.shape[-1]
    quad = scale(sum_last(square(zz)), -0.5)
    return add(sub(quad, sum_last(log_std)), -0.5 * d * LOG_2PI)


def fixed_var_logpdf(x, mean, alpha: float) -> Var:
    """Log-density of N(mean, alpha * I), summed over the trailing axis."""
    diff = sub(x, mean)
    d = diff.shape[-1]
    quad = scale(sum_last(square(diff)), -0.5 / alpha)
    return add(quad, -0.5 * d * math.log(2.0 * math.pi * alpha))
