"""
Plain SGD on the sequence-model losses, plus the finite-difference gradient oracle.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from src.errors import DivergenceError, NumericalError, ParameterError
from src.losses import (
    NoiseBundle,
    lpvae_action_loss_grad,
    lpvae_loss_grad,
    sample_split,
    stdvae_loss_grad,
    tdvae_jumpy_loss_grad,
)

logger = logging.getLogger(__name__)

OBJECTIVES = ("lpvae", "lpvae_action", "stdvae", "tdvae")
RELATIVE_ERROR_FLOOR = 1e-4


@dataclass(frozen=True, eq=False)
class SequenceData:
    """One training sequence. a and m, when present, cover steps 2..T."""

    x: np.ndarray
    y: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    a: Optional[np.ndarray] = None
    m: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "x", x)
        for name, length in (("y", x.shape[0]), ("v", x.shape[0]), ("c", x.shape[0]),
                             ("a", x.shape[0] - 1), ("m", x.shape[0] - 1)):
            value = getattr(self, name)
            if value is None:
                continue
            value = np.asarray(value, dtype=np.float64).reshape(length, -1)
            object.__setattr__(self, name, value)

    @property
    def steps(self) -> int:
        return self.x.shape[0]


def _objective_grads(objective, gen, rec, seq: SequenceData, rng, n_samples, fraction, delta_range):
    steps = seq.steps
    noise = NoiseBundle.draw(rng, n_samples, steps, gen.latent_dim)
    if objective == "lpvae":
        t = sample_split(rng, steps, fraction)
        return lpvae_loss_grad(gen, rec, seq.x, seq.y, t, noise, seq.v, seq.c)
    if objective == "lpvae_action":
        t = sample_split(rng, steps, fraction)
        return lpvae_action_loss_grad(
            gen, rec, seq.x, seq.y, seq.m, seq.a, t, noise, seq.v, seq.c
        )
    if steps < 2:
        raise ParameterError(f"{objective} needs sequences of at least 2 steps")
    if objective == "stdvae":
        t = int(rng.integers(1, steps))
        return stdvae_loss_grad(gen, rec, seq.x, t, noise, seq.v, seq.c)
    low = max(1, delta_range[0]) if gen.has_jump else 1
    if steps <= low:
        raise ParameterError(f"sequences of {steps} steps cannot hold a jump of {low}")
    t = int(rng.integers(1, steps - low + 1))
    high = min(delta_range[1] or steps - t, steps - t) if gen.has_jump else 1
    delta = int(rng.integers(low, high + 1))
    return tdvae_jumpy_loss_grad(gen, rec, seq.x, t, delta, noise, seq.v, seq.c, delta_range)


def _global_norm(*grad_dicts) -> float:
    return math.sqrt(sum(float(np.sum(g**2)) for grads in grad_dicts for g in grads.values()))


def _sgd(weights: dict, grads: dict, step_size: float, factor: float) -> dict:
    return {name: value - step_size * factor * grads[name] for name, value in weights.items()}


def train_toy(
    gen,
    rec,
    dataset: list[SequenceData],
    steps: int,
    step_size: float,
    seed: int,
    *,
    objective: str = "lpvae",
    n_samples: int = 1,
    t_min_fraction: float = 0.4,
    max_grad_norm: Optional[float] = None,
    delta_range: tuple = (1, None),
    train_generative: bool = True,
    train_recognition: bool = True,
):
    """
    Stochastic gradient descent with one randomly chosen sequence and split per step.

    Returns (gen', rec', trace) where trace holds one row per step with the loss parts
    before the update. A non-finite loss or gradient aborts with DivergenceError.
    """
    if objective not in OBJECTIVES:
        raise ParameterError(f"unknown objective {objective!r}", objective=objective)
    if not dataset:
        raise ParameterError("training needs at least one sequence")
    if steps < 0 or step_size < 0.0:
        raise ParameterError("steps and step_size must be nonnegative")

    rng = np.random.default_rng(seed)
    trace = []
    report_every = max(1, steps // 10)
    for step in range(steps):
        seq = dataset[int(rng.integers(len(dataset)))]
        try:
            breakdown, g_grads, r_grads = _objective_grads(
                objective, gen, rec, seq, rng, n_samples, t_min_fraction, delta_range
            )
        except NumericalError as e:
            raise DivergenceError(
                f"{objective} training diverged at step {step}: {e.message}",
                step=step,
                objective=objective,
            ) from e
        norm = _global_norm(g_grads, r_grads)
        if not (math.isfinite(breakdown.total) and math.isfinite(norm)):
            raise DivergenceError(
                f"{objective} training diverged at step {step}",
                step=step,
                objective=objective,
                total=breakdown.total,
                grad_norm=norm,
            )
        factor = 1.0
        if max_grad_norm is not None and norm > max_grad_norm:
            factor = max_grad_norm / norm
        if train_generative:
            gen = gen.with_weights(_sgd(gen.weights, g_grads, step_size, factor))
        if train_recognition and r_grads:
            rec = rec.with_weights(_sgd(rec.weights, r_grads, step_size, factor))
        trace.append(
            {
                "step": step,
                "encoder": breakdown.encoder_term,
                "decoder": breakdown.decoder_term,
                "prediction": breakdown.prediction_term,
                "total": breakdown.total,
            }
        )
        if (step + 1) % report_every == 0:
            logger.info(
                "%s step %d/%d total=%.4f grad_norm=%.4f",
                objective, step + 1, steps, breakdown.total, norm,
            )
    return gen, rec, trace


def finite_difference_grads(
    loss_fn: Callable[[dict], float],
    weights: dict[str, np.ndarray],
    names: Optional[Iterable[str]] = None,
    eps: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central differences of loss_fn(weights) for the named arrays."""
    out = {}
    for name in names if names is not None else weights:
        base = weights[name]
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            shifted = dict(weights)
            plus = base.copy()
            plus[idx] += eps
            shifted[name] = plus
            f_plus = loss_fn(shifted)
            minus = base.copy()
            minus[idx] -= eps
            shifted[name] = minus
            f_minus = loss_fn(shifted)
            grad[idx] = (f_plus - f_minus) / (2.0 * eps)
        out[name] = grad
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = RELATIVE_ERROR_FLOOR):
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_gradients(
    loss_fn: Callable[[dict], float],
    analytic: dict[str, np.ndarray],
    weights: dict[str, np.ndarray],
    names: Optional[Iterable[str]] = None,
    eps: float = 1e-5,
) -> dict[str, float]:
    """Relative error of analytic against central-difference gradients, per weight."""
    numeric = finite_difference_grads(loss_fn, weights, names, eps)
    errors = {name: relative_error(analytic[name], grad) for name, grad in numeric.items()}
    worst = max(errors.values(), default=0.0)
    logger.debug("gradient check over %d weights, worst relative error %.3g", len(errors), worst)
    return errors
