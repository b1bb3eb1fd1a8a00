"""
Parameterized maps of the sequence model.

Weights live in flat dicts of named numpy arrays (the same layout the checkpoint files
use). A ParamContext binds one dict to tape Vars for a single loss evaluation so gradients
can be read back by name.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from src.config import MIN_EMISSION_VARIANCE, Y_LIKELIHOODS
from src.errors import ParameterError
from src.evidential import N_CHANNELS, SemanticGrid
from src.tape import (
    GATED_WEIGHTS,
    Var,
    concat,
    dense,
    fixed_var_logpdf,
    gated,
    mul,
    sigmoid,
    sub,
    take_last,
    tanh,
    weighted_ce_loglik,
)

logger = logging.getLogger(__name__)

CLASS_WEIGHTS = (100.0, 10.0, 1.0, 0.2, 0.1, 1.0)
TRANSITION_KINDS = ("gated", "linear")


class ParamContext:
    """Binds a weight dict to Vars for one graph; unused weights get zero gradients."""

    def __init__(self, weights: dict[str, np.ndarray]):
        self.weights = weights
        self._vars: dict[str, Var] = {}

    def __getitem__(self, name: str) -> Var:
        if name not in self._vars:
            if name not in self.weights:
                raise ParameterError(f"missing weight {name!r}", name=name)
            self._vars[name] = Var(self.weights[name], name=name)
        return self._vars[name]

    def pair(self, prefix: str) -> tuple[Var, Var]:
        return self[f"{prefix}.W"], self[f"{prefix}.b"]

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, value in self.weights.items():
            var = self._vars.get(name)
            grad = None if var is None else var.grad
            out[name] = np.zeros_like(value) if grad is None else grad
        return out


def _init_dense(rng, weights, prefix, n_out, n_in, scale):
    weights[f"{prefix}.W"] = rng.normal(0.0, scale / math.sqrt(max(n_in, 1)), (n_out, n_in))
    weights[f"{prefix}.b"] = np.zeros(n_out)


def _init_d_map(rng, weights, prefix, n_out, n_in, hidden, scale):
    _init_dense(rng, weights, f"{prefix}.h1", hidden, n_in, scale)
    _init_dense(rng, weights, f"{prefix}.h2", hidden, n_in, scale)
    _init_dense(rng, weights, f"{prefix}.mu", n_out, hidden, scale)
    _init_dense(rng, weights, f"{prefix}.ls", n_out, hidden, scale)


def _init_gated(rng, weights, prefix, d, scale):
    for k in GATED_WEIGHTS:
        _init_dense(rng, weights, f"{prefix}.{k}", d, d, scale)


def _init_gru(rng, weights, prefix, n_hidden, n_in, scale):
    for k in ("z", "r", "n"):
        _init_dense(rng, weights, f"{prefix}.{k}", n_hidden, n_in + n_hidden, scale)


def dense_map(ctx: ParamContext, prefix: str, x) -> Var:
    return dense(x, *ctx.pair(prefix))


def d_map(ctx: ParamContext, prefix: str, x) -> tuple[Var, Var]:
    """Gated two-branch head: t = tanh(W1 x) * sigmoid(W2 x); (mean, log_std) = heads(t)."""
    t = mul(tanh(dense_map(ctx, f"{prefix}.h1", x)), sigmoid(dense_map(ctx, f"{prefix}.h2", x)))
    return dense_map(ctx, f"{prefix}.mu", t), dense_map(ctx, f"{prefix}.ls", t)


def gated_map(ctx: ParamContext, prefix: str, z) -> tuple[Var, Var]:
    d = z.shape[-1]
    out = gated(z, {k: ctx.pair(f"{prefix}.{k}") for k in GATED_WEIGHTS})
    return take_last(out, slice(0, d)), take_last(out, slice(d, 2 * d))


def gru_cell(ctx: ParamContext, prefix: str, h, u) -> Var:
    """Standard GRU update of hidden state h with input u."""
    hu = concat(u, h)
    update = sigmoid(dense_map(ctx, f"{prefix}.z", hu))
    reset = sigmoid(dense_map(ctx, f"{prefix}.r", hu))
    candidate = tanh(dense_map(ctx, f"{prefix}.n", concat(u, mul(reset, h))))
    return candidate + mul(update, sub(h, candidate))


def _check_alpha(name: str, alpha: float) -> float:
    alpha = float(alpha)
    if not math.isfinite(alpha) or alpha < MIN_EMISSION_VARIANCE - 1e-12:
        raise ParameterError(
            f"{name} must be >= 1/(2*pi), got {alpha}", name=name, value=alpha
        )
    return alpha


@dataclass(frozen=True, eq=False)
class GenerativeParams:
    """
    Generative side: latent transition, x/y emissions and the optional mask head.

    With action_dim > 0 the x emission reads (x_prev, y, z, a) and a mask head maps
    (a, y) to the mask mean; otherwise x is emitted from z alone.
    """

    weights: dict[str, np.ndarray]
    latent_dim: int
    x_dim: int
    y_dim: int = 0
    action_dim: int = 0
    mask_dim: int = 0
    alpha_x: float = 0.5
    alpha_y: float = 0.5
    transition: str = "gated"
    y_likelihood: str = "gaussian"
    class_weights: tuple[float, ...] = CLASS_WEIGHTS

    def __post_init__(self):
        object.__setattr__(self, "alpha_x", _check_alpha("alpha_x", self.alpha_x))
        object.__setattr__(self, "alpha_y", _check_alpha("alpha_y", self.alpha_y))
        if self.transition not in TRANSITION_KINDS:
            raise ParameterError(f"unknown transition kind {self.transition!r}")
        if self.y_likelihood not in Y_LIKELIHOODS:
            raise ParameterError(f"unknown y likelihood {self.y_likelihood!r}")
        if self.y_likelihood == "weighted_ce" and self.y_dim % len(self.class_weights):
            raise ParameterError(
                f"y_dim {self.y_dim} is not a whole number of {len(self.class_weights)}-channel cells"
            )
        if self.latent_dim < 1 or self.x_dim < 1:
            raise ParameterError("latent_dim and x_dim must be positive")

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        latent_dim: int,
        x_dim: int,
        y_dim: int = 0,
        *,
        action_dim: int = 0,
        mask_dim: int = 0,
        transition: str = "gated",
        jump: bool = False,
        alpha_x: float = 0.5,
        alpha_y: float = 0.5,
        y_likelihood: str = "gaussian",
        class_weights: tuple = CLASS_WEIGHTS,
        scale: float = 0.1,
    ) -> "GenerativeParams":
        w: dict[str, np.ndarray] = {}
        prefixes = ["trans", "jump"] if jump else ["trans"]
        for prefix in prefixes:
            if transition == "gated":
                _init_gated(rng, w, prefix, latent_dim, scale)
            else:
                w[f"{prefix}.A"] = np.full(latent_dim, 0.9)
                w[f"{prefix}.b"] = np.zeros(latent_dim)
                w[f"{prefix}.log_std"] = np.zeros(latent_dim)
        x_in = latent_dim + (x_dim + y_dim + action_dim if action_dim else 0)
        _init_dense(rng, w, "emit_x", x_dim, x_in, scale)
        if y_dim:
            _init_dense(rng, w, "emit_y", y_dim, latent_dim, scale)
        if action_dim and mask_dim:
            _init_dense(rng, w, "emit_m", mask_dim, action_dim + y_dim, scale)
        return cls(
            weights=w,
            latent_dim=latent_dim,
            x_dim=x_dim,
            y_dim=y_dim,
            action_dim=action_dim,
            mask_dim=mask_dim if action_dim else 0,
            alpha_x=alpha_x,
            alpha_y=alpha_y,
            transition=transition,
            y_likelihood=y_likelihood,
            class_weights=tuple(float(c) for c in class_weights),
        )

    @classmethod
    def from_linear_system(cls, system) -> "GenerativeParams":
        """Exact generative parameters of a LinearGaussianSystem."""
        w = {
            "trans.A": np.array(system.a, dtype=np.float64),
            "trans.b": np.zeros(system.d),
            "trans.log_std": 0.5 * np.log(system.q),
            "emit_x.W": np.array(system.C, dtype=np.float64),
            "emit_x.b": np.zeros(system.n_x),
        }
        if system.n_y:
            w["emit_y.W"] = np.array(system.D, dtype=np.float64)
            w["emit_y.b"] = np.zeros(system.n_y)
        return cls(
            weights=w,
            latent_dim=system.d,
            x_dim=system.n_x,
            y_dim=system.n_y,
            alpha_x=system.alpha_x,
            alpha_y=system.alpha_y,
            transition="linear",
        )

    @property
    def has_jump(self) -> bool:
        return any(name.startswith("jump.") for name in self.weights)

    def with_weights(self, weights: dict[str, np.ndarray]) -> "GenerativeParams":
        return replace(self, weights=weights)

    def transition_dist(self, ctx: ParamContext, z, jump: bool = False) -> tuple[Var, Var]:
        prefix = "jump" if jump else "trans"
        if jump and not self.has_jump:
            raise ParameterError("generative params carry no jumpy transition")
        if self.transition == "gated":
            return gated_map(ctx, prefix, z)
        mean = mul(ctx[f"{prefix}.A"], z) + ctx[f"{prefix}.b"]
        return mean, ctx[f"{prefix}.log_std"]

    def x_loglik(self, ctx: ParamContext, z, x, x_prev=None, y=None, a=None) -> Var:
        if self.action_dim:
            inputs = concat(
                np.zeros(self.x_dim) if x_prev is None else x_prev,
                np.zeros(self.y_dim) if y is None else y,
                z,
                np.zeros(self.action_dim) if a is None else a,
            )
        else:
            inputs = z
        return fixed_var_logpdf(x, dense_map(ctx, "emit_x", inputs), self.alpha_x)

    def y_loglik(self, ctx: ParamContext, z, y) -> Var:
        logits = dense_map(ctx, "emit_y", z)
        if self.y_likelihood == "weighted_ce":
            return weighted_ce_loglik(logits, y, self.class_weights)
        return fixed_var_logpdf(y, logits, self.alpha_y)

    def m_loglik(self, ctx: ParamContext, m, a, y) -> Var:
        if not self.mask_dim:
            raise ParameterError("generative params carry no mask head")
        mean = dense_map(ctx, "emit_m", concat(a, np.zeros(self.y_dim) if y is None else y))
        return fixed_var_logpdf(m, mean, self.alpha_x)


@dataclass(frozen=True, eq=False)
class RecognitionParams:
    """
    Inference side: a GRU belief over (x_t, v_t, c_t), a belief head q(z_t | b_t) and a
    smoothing head q(z_t | b_t, z_{t+1}), both D-maps. b_0 is zero.
    """

    weights: dict[str, np.ndarray]
    latent_dim: int
    x_dim: int
    v_dim: int = 0
    c_dim: int = 0
    belief_dim: int = 8

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        latent_dim: int,
        x_dim: int,
        *,
        v_dim: int = 0,
        c_dim: int = 0,
        belief_dim: int = 8,
        hidden_dim: int = 8,
        scale: float = 0.1,
    ) -> "RecognitionParams":
        w: dict[str, np.ndarray] = {}
        _init_gru(rng, w, "gru", belief_dim, x_dim + v_dim + c_dim, scale)
        _init_d_map(rng, w, "belief", latent_dim, belief_dim, hidden_dim, scale)
        _init_d_map(rng, w, "smooth", latent_dim, belief_dim + latent_dim, hidden_dim, scale)
        return cls(w, latent_dim, x_dim, v_dim, c_dim, belief_dim)

    def with_weights(self, weights: dict[str, np.ndarray]) -> "RecognitionParams":
        return replace(self, weights=weights)

    def beliefs(self, ctx: ParamContext, x, v=None, c=None) -> list[Var]:
        x = np.asarray(x, dtype=np.float64)
        steps = x.shape[0]
        v = np.zeros((steps, self.v_dim)) if v is None else np.asarray(v, dtype=np.float64)
        c = np.zeros((steps, self.c_dim)) if c is None else np.asarray(c, dtype=np.float64)
        if x.shape[1] != self.x_dim or v.shape[1] != self.v_dim or c.shape[1] != self.c_dim:
            raise ParameterError(
                f"belief inputs {x.shape}, {v.shape}, {c.shape} do not match "
                f"({self.x_dim}, {self.v_dim}, {self.c_dim})"
            )
        h: Var = Var(np.zeros(self.belief_dim))
        out = []
        for k in range(steps):
            h = gru_cell(ctx, "gru", h, np.concatenate([x[k], v[k], c[k]]))
            out.append(h)
        return out

    def belief_dist(self, ctx: ParamContext, beliefs: list, k: int) -> tuple[Var, Var]:
        return d_map(ctx, "belief", beliefs[k - 1])

    def smooth_dist(self, ctx: ParamContext, beliefs: list, k: int, z_next) -> tuple[Var, Var]:
        return d_map(ctx, "smooth", concat(beliefs[k - 1], z_next))


@dataclass(frozen=True, eq=False)
class KalmanRecognition:
    """
    Linear recognition heads for decoupled linear-Gaussian systems.

    The belief at step k is N(means[k], variances[k]); smoothing conditions that belief
    on z_{k+1} through the scalar transition (a, q) of each latent dimension.
    """

    means: np.ndarray
    variances: np.ndarray
    a: np.ndarray
    q: np.ndarray
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        variances = np.asarray(self.variances, dtype=np.float64)
        if means.shape != variances.shape or means.ndim != 2:
            raise ParameterError("means and variances must both be (T, d)")
        if np.any(variances <= 0.0):
            raise ParameterError("belief variances must be positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)
        object.__setattr__(self, "a", np.asarray(self.a, dtype=np.float64))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.float64))

    @classmethod
    def exact(cls, system, x: np.ndarray) -> "KalmanRecognition":
        """Per-dimension filtered posteriors p(z_k | x_{1:k}) of a decoupled system."""
        if not system.is_decoupled:
            raise ParameterError("exact recognition needs a square diagonal emission")
        x = np.asarray(x, dtype=np.float64)
        c = np.diag(system.C)
        m_pred, p_pred = np.zeros(system.d), np.ones(system.d)
        means, variances = [], []
        for xk in x:
            gain = p_pred * c / (c**2 * p_pred + system.alpha_x)
            m = m_pred + gain * (xk - c * m_pred)
            p = (1.0 - gain * c) * p_pred
            means.append(m)
            variances.append(p)
            m_pred, p_pred = system.a * m, system.a**2 * p + system.q
        return cls(np.array(means), np.array(variances), system.a, system.q)

    def interpolated(self, lam: float) -> "KalmanRecognition":
        """Blend between N(0, 1) beliefs (lam = 0) and these beliefs (lam = 1)."""
        return replace(
            self,
            means=lam * self.means,
            variances=lam * self.variances + (1.0 - lam),
        )

    def smoothing_coefficients(self, k: int):
        """(alpha, J, variance) with q(z_k | z_{k+1}) = N(alpha + J z_{k+1}, variance)."""
        m, p = self.means[k - 1], self.variances[k - 1]
        gain = p * self.a / (self.a**2 * p + self.q)
        return m - gain * self.a * m, gain, p * (1.0 - gain * self.a)

    def beliefs(self, ctx, x, v=None, c=None) -> list:
        return [None] * len(self.means)

    def belief_dist(self, ctx, beliefs, k: int) -> tuple[Var, Var]:
        return Var(self.means[k - 1]), Var(0.5 * np.log(self.variances[k - 1]))

    def smooth_dist(self, ctx, beliefs, k: int, z_next) -> tuple[Var, Var]:
        alpha, gain, var = self.smoothing_coefficients(k)
        return mul(gain, z_next) + alpha, Var(0.5 * np.log(var))


def pool_grid(grid, pool: int = 8) -> np.ndarray:
    """
    Average-pool a grid's masses over pool x pool blocks and flatten cell-major.

    Output length is (H/pool) * (W/pool) * 6; each pooled cell keeps its six channels
    together so the vector can be read back as (cells, channels).
    """
    masses = grid.masses if isinstance(grid, SemanticGrid) else np.asarray(grid)
    h, w = masses.shape[:2]
    if pool < 1 or h % pool or w % pool:
        raise ParameterError(f"grid {h}x{w} does not pool evenly by {pool}", pool=pool)
    blocks = masses.reshape(h // pool, pool, w // pool, pool, N_CHANNELS)
    return blocks.mean(axis=(1, 3)).reshape(-1)


def belief_features(
    rec: RecognitionParams,
    x: np.ndarray,
    v: Optional[np.ndarray] = None,
    c: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Pooled latest observation followed by the GRU belief after the whole sequence."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    beliefs = rec.beliefs(ParamContext(rec.weights), x, v, c)
    return np.concatenate([x[-1], beliefs[-1].value])
