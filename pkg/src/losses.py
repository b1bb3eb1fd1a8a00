"""
Monte-Carlo sequence-model losses: the prefix (locally predictable) loss with and without
actions, the smoothing loss and the two-point jumpy loss.

Every loss takes an explicit NoiseBundle, so evaluation is a pure function of its inputs.
The *_grad variants also return gradients of the sample-mean total with respect to every
generative and recognition weight, keyed by weight name.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from src.errors import NumericalError, ParameterError
from src.networks import ParamContext
from src.tape import Var, add, backward, diag_logpdf, exp, mean_all, mul

logger = logging.getLogger(__name__)

DECOMPOSITION_TOLERANCE = 1e-6


@dataclass(frozen=True)
class LossBreakdown:
    """Sample means of the three loss parts; total is their sum."""

    encoder_term: float
    decoder_term: float
    prediction_term: float
    total: float
    total_stderr: float = 0.0
    encoder_stderr: float = 0.0
    n_samples: int = 1

    def __post_init__(self):
        parts = self.encoder_term + self.decoder_term + self.prediction_term
        if not math.isfinite(self.total):
            raise NumericalError("loss is not finite", total=self.total)
        if abs(parts - self.total) > DECOMPOSITION_TOLERANCE * max(1.0, abs(self.total)):
            raise NumericalError(
                f"loss parts sum to {parts}, total is {self.total}", total=self.total
            )

    @classmethod
    def from_samples(cls, encoder, decoder, prediction) -> "LossBreakdown":
        encoder, decoder, prediction = (
            np.asarray(v, dtype=np.float64) for v in (encoder, decoder, prediction)
        )
        totals = encoder + decoder + prediction
        n = totals.shape[0]
        stderr = float(totals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        enc_stderr = float(encoder.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(
            encoder_term=float(encoder.mean()),
            decoder_term=float(decoder.mean()),
            prediction_term=float(prediction.mean()),
            total=float(totals.mean()),
            total_stderr=stderr,
            encoder_stderr=enc_stderr,
            n_samples=n,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class NoiseBundle:
    """Standard-normal draws, eps[s, k - 1] feeding the latent of step k in sample s."""

    eps: np.ndarray

    def __post_init__(self):
        eps = np.asarray(self.eps, dtype=np.float64)
        if eps.ndim != 3 or eps.shape[0] < 1:
            raise ParameterError(f"noise must be (samples, steps, latent_dim), got {eps.shape}")
        object.__setattr__(self, "eps", eps)

    @classmethod
    def draw(cls, rng: np.random.Generator, n_samples: int, steps: int, latent_dim: int):
        return cls(rng.standard_normal((n_samples, steps, latent_dim)))

    @classmethod
    def zeros(cls, n_samples: int, steps: int, latent_dim: int):
        return cls(np.zeros((n_samples, steps, latent_dim)))

    @property
    def n_samples(self) -> int:
        return self.eps.shape[0]

    @property
    def steps(self) -> int:
        return self.eps.shape[1]

    def at(self, k: int) -> np.ndarray:
        return self.eps[:, k - 1]


def _check_inputs(gen, x, noise: NoiseBundle) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != gen.x_dim:
        raise ParameterError(f"x has width {x.shape[1]}, model emits {gen.x_dim}")
    if noise.steps < x.shape[0] or noise.eps.shape[2] != gen.latent_dim:
        raise ParameterError(
            f"noise {noise.eps.shape} does not cover {x.shape[0]} steps of dim {gen.latent_dim}"
        )
    return x


def _check_split(t: int, low: int, high: int, what: str = "t") -> None:
    if not low <= t <= high:
        raise ParameterError(f"{what}={t} outside [{low}, {high}]", **{what: t})


def _draw(mean, log_std, eps) -> Var:
    return add(mean, mul(exp(log_std), eps))


def _standard_logpdf(z: Var) -> Var:
    d = z.shape[-1]
    return diag_logpdf(z, np.zeros(d), np.zeros(d))


def _zeros(noise: NoiseBundle) -> Var:
    return Var(np.zeros(noise.n_samples))


def _prefix_graph(gen, rec, gctx, rctx, x, y, t, noise, v, c, actions=None):
    """
    Per-sample encoder, decoder and prediction Vars of the prefix loss.

    actions, when given, is (a, m, drop_first_x) and switches the x emission to the
    action-conditioned form with the mask term.
    """
    steps = x.shape[0]
    beliefs = rec.beliefs(rctx, x, v, c)
    z: dict[int, Var] = {}

    mean, log_std = rec.belief_dist(rctx, beliefs, t)
    z[t] = _draw(mean, log_std, noise.at(t))
    encoder = diag_logpdf(z[t], mean, log_std)
    for k in range(t - 1, 0, -1):
        mean, log_std = rec.smooth_dist(rctx, beliefs, k, z[k + 1])
        z[k] = _draw(mean, log_std, noise.at(k))
        encoder = encoder + diag_logpdf(z[k], mean, log_std)
    encoder = encoder - _standard_logpdf(z[1])
    for k in range(2, t + 1):
        mean, log_std = gen.transition_dist(gctx, z[k - 1])
        encoder = encoder - diag_logpdf(z[k], mean, log_std)
    for k in range(t + 1, steps + 1):
        mean, log_std = gen.transition_dist(gctx, z[k - 1])
        z[k] = _draw(mean, log_std, noise.at(k))

    decoder, prediction = _zeros(noise), _zeros(noise)
    for k in range(1, steps + 1):
        loglik = _emission_loglik(gen, gctx, z[k], x, y, k, actions)
        if k <= t:
            decoder = decoder - loglik
        else:
            prediction = prediction - loglik
    return encoder, decoder, prediction


def _emission_loglik(gen, gctx, zk: Var, x, y, k: int, actions) -> Var:
    yk = None if y is None else y[k - 1]
    out = Var(0.0)
    if actions is None:
        out = out + gen.x_loglik(gctx, zk, x[k - 1])
    else:
        a, m, drop_first_x = actions
        if k > 1 or not drop_first_x:
            x_prev = x[k - 2] if k > 1 else None
            a_k = a[k - 2] if k > 1 else None
            out = out + gen.x_loglik(gctx, zk, x[k - 1], x_prev=x_prev, y=yk, a=a_k)
        if m is not None and k > 1:
            out = out + gen.m_loglik(gctx, m[k - 2], a[k - 2], yk)
    if yk is not None and gen.y_dim:
        out = out + gen.y_loglik(gctx, zk, yk)
    return out


def _finish(parts, gctx, rctx, with_grads: bool):
    values = [p.value for p in parts]
    breakdown = LossBreakdown.from_samples(*values)
    if not with_grads:
        return breakdown
    total = mean_all(parts[0] + parts[1] + parts[2])
    backward(total)
    return breakdown, gctx.grads(), rctx.grads()


def _prepare_y(gen, y, steps):
    if y is None or not gen.y_dim:
        return None
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y.shape != (steps, gen.y_dim):
        raise ParameterError(f"y has shape {y.shape}, expected {(steps, gen.y_dim)}")
    return y


def _lpvae(gen, rec, x, y, t, noise, v, c, with_grads):
    x = _check_inputs(gen, x, noise)
    _check_split(t, 1, x.shape[0])
    y = _prepare_y(gen, y, x.shape[0])
    gctx, rctx = ParamContext(gen.weights), ParamContext(rec.weights)
    parts = _prefix_graph(gen, rec, gctx, rctx, x, y, t, noise, v, c)
    return _finish(parts, gctx, rctx, with_grads)


def lpvae_loss(gen, rec, x, y, t: int, noise: NoiseBundle, v=None, c=None) -> LossBreakdown:
    """
    Prefix loss at split t: the belief at t and the smoothing heads sample z_{1:t}, the
    transition rolls z_{t+1:T} forward, and emissions at k <= t form the decoder term while
    k > t form the prediction term.
    """
    return _lpvae(gen, rec, x, y, t, noise, v, c, with_grads=False)


def lpvae_loss_grad(gen, rec, x, y, t: int, noise: NoiseBundle, v=None, c=None):
    return _lpvae(gen, rec, x, y, t, noise, v, c, with_grads=True)


def _lpvae_action(gen, rec, x, y, m, a, t, noise, v, c, drop_first_x, with_grads):
    x = _check_inputs(gen, x, noise)
    steps = x.shape[0]
    _check_split(t, 1, steps)
    if not gen.action_dim:
        raise ParameterError("action loss needs generative params with an action model")
    a = np.asarray(a, dtype=np.float64).reshape(steps - 1, gen.action_dim)
    if m is not None:
        m = np.asarray(m, dtype=np.float64).reshape(steps - 1, gen.mask_dim)
    y = _prepare_y(gen, y, steps)
    gctx, rctx = ParamContext(gen.weights), ParamContext(rec.weights)
    parts = _prefix_graph(gen, rec, gctx, rctx, x, y, t, noise, v, c, (a, m, drop_first_x))
    return _finish(parts, gctx, rctx, with_grads)


def lpvae_action_loss(
    gen, rec, x, y, m, a, t: int, noise: NoiseBundle, v=None, c=None, drop_first_x: bool = True
) -> LossBreakdown:
    """
    Prefix loss with actions. a and m hold steps 2..T; the x emission at k reads
    (x_{k-1}, y_k, z_k, a_k), the first x term is dropped by default and the mask
    likelihood p(m_k | a_k, y_k) joins the decoder or prediction term of step k.
    """
    return _lpvae_action(gen, rec, x, y, m, a, t, noise, v, c, drop_first_x, with_grads=False)


def lpvae_action_loss_grad(
    gen, rec, x, y, m, a, t: int, noise: NoiseBundle, v=None, c=None, drop_first_x: bool = True
):
    return _lpvae_action(gen, rec, x, y, m, a, t, noise, v, c, drop_first_x, with_grads=True)


def _stdvae(gen, rec, x, t, noise, v, c, with_grads):
    x = _check_inputs(gen, x, noise)
    steps = x.shape[0]
    _check_split(t, 1, steps - 1)
    gctx, rctx = ParamContext(gen.weights), ParamContext(rec.weights)
    beliefs = rec.beliefs(rctx, x, v, c)
    z: dict[int, Var] = {}

    mean, log_std = rec.belief_dist(rctx, beliefs, steps)
    z[steps] = _draw(mean, log_std, noise.at(steps))
    latent = diag_logpdf(z[steps], mean, log_std)
    for k in range(steps - 1, t - 1, -1):
        mean, log_std = rec.smooth_dist(rctx, beliefs, k, z[k + 1])
        z[k] = _draw(mean, log_std, noise.at(k))
        latent = latent + diag_logpdf(z[k], mean, log_std)
    mean, log_std = rec.belief_dist(rctx, beliefs, t)
    latent = latent - diag_logpdf(z[t], mean, log_std)
    for k in range(t + 1, steps + 1):
        mean, log_std = gen.transition_dist(gctx, z[k - 1])
        latent = latent - diag_logpdf(z[k], mean, log_std)

    emission = _zeros(noise)
    for k in range(t, steps + 1):
        emission = emission - gen.x_loglik(gctx, z[k], x[k - 1])
    return _finish((latent, emission, _zeros(noise)), gctx, rctx, with_grads)


def stdvae_breakdown(gen, rec, x, t: int, noise: NoiseBundle, v=None, c=None) -> LossBreakdown:
    """Smoothing loss with the latent part as encoder term and emissions as decoder term."""
    return _stdvae(gen, rec, x, t, noise, v, c, with_grads=False)


def stdvae_loss(gen, rec, x, t: int, noise: NoiseBundle, v=None, c=None) -> float:
    """
    Smoothing loss from split t: z_T comes from the belief head at T, the smoothing chain
    runs back to z_t, the prior at t is the belief head at t, and x_t..x_T are emitted.
    """
    return stdvae_breakdown(gen, rec, x, t, noise, v, c).total


def stdvae_loss_grad(gen, rec, x, t: int, noise: NoiseBundle, v=None, c=None):
    return _stdvae(gen, rec, x, t, noise, v, c, with_grads=True)


def _tdvae(gen, rec, x, t, delta, noise, v, c, delta_range, with_grads):
    x = _check_inputs(gen, x, noise)
    steps = x.shape[0]
    _check_split(t, 1, steps - 1)
    low, high = delta_range
    _check_split(delta, max(1, low), min(high or steps, steps - t), what="delta")
    use_jump = gen.has_jump
    if delta > 1 and not use_jump:
        raise ParameterError("jumps longer than one step need a jumpy transition", delta=delta)

    gctx, rctx = ParamContext(gen.weights), ParamContext(rec.weights)
    beliefs = rec.beliefs(rctx, x, v, c)
    far = t + delta
    mean, log_std = rec.belief_dist(rctx, beliefs, far)
    z_far = _draw(mean, log_std, noise.at(far))
    latent = diag_logpdf(z_far, mean, log_std)
    mean, log_std = rec.smooth_dist(rctx, beliefs, t, z_far)
    z_t = _draw(mean, log_std, noise.at(t))
    latent = latent + diag_logpdf(z_t, mean, log_std)
    mean, log_std = rec.belief_dist(rctx, beliefs, t)
    latent = latent - diag_logpdf(z_t, mean, log_std)
    mean, log_std = gen.transition_dist(gctx, z_t, jump=use_jump)
    latent = latent - diag_logpdf(z_far, mean, log_std)
    emission = _zeros(noise) - gen.x_loglik(gctx, z_far, x[far - 1])
    return _finish((latent, emission, _zeros(noise)), gctx, rctx, with_grads)


def tdvae_breakdown(
    gen, rec, x, t: int, delta: int, noise: NoiseBundle, v=None, c=None, delta_range=(1, None)
) -> LossBreakdown:
    return _tdvae(gen, rec, x, t, delta, noise, v, c, delta_range, with_grads=False)


def tdvae_jumpy_loss(
    gen, rec, x, t: int, delta: int, noise: NoiseBundle, v=None, c=None, delta_range=(1, None)
) -> float:
    """
    Two-point jumpy loss between t and t + delta. The prior over z_t is taken equal to
    the belief head at t, as the jumpy model assumes.
    """
    return tdvae_breakdown(gen, rec, x, t, delta, noise, v, c, delta_range).total


def tdvae_jumpy_loss_grad(
    gen, rec, x, t: int, delta: int, noise: NoiseBundle, v=None, c=None, delta_range=(1, None)
):
    return _tdvae(gen, rec, x, t, delta, noise, v, c, delta_range, with_grads=True)


def one_step_elbo(gen, rec, x1, y1, noise: NoiseBundle) -> np.ndarray:
    """Per-sample log q(z_1 | b_1) - log p(z_1) - log p(x_1, y_1 | z_1) for a single frame."""
    x = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    y = None if y1 is None else np.atleast_2d(np.asarray(y1, dtype=np.float64))
    gctx, rctx = ParamContext(gen.weights), ParamContext(rec.weights)
    beliefs = rec.beliefs(rctx, x)
    mean, log_std = rec.belief_dist(rctx, beliefs, 1)
    z1 = _draw(mean, log_std, noise.at(1))
    out = diag_logpdf(z1, mean, log_std) - _standard_logpdf(z1) - gen.x_loglik(gctx, z1, x[0])
    if y is not None and gen.y_dim:
        out = out - gen.y_loglik(gctx, z1, y[0])
    return out.value


def default_t_min(steps: int, fraction: float = 0.4) -> int:
    return max(1, math.ceil(fraction * steps))


def sample_split(rng: np.random.Generator, steps: int, fraction: float = 0.4) -> int:
    """Uniform split in [t_min, T]."""
    return int(rng.integers(default_t_min(steps, fraction), steps + 1))


def loss_summary(name: str, breakdown: LossBreakdown, reference: Optional[float] = None) -> str:
    line = f"{name}: total={breakdown.total:.6f} ± {breakdown.total_stderr:.6f}"
    if reference is not None:
        line += f" (reference {reference:.6f}, gap {breakdown.total - reference:+.6f})"
    return line
