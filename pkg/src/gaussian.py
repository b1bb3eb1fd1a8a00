"""Diagonal Gaussians: sampling, log-densities and closed-form KL."""

import math
from dataclasses import dataclass

import numpy as np

from src.errors import ParameterError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class DiagGaussian:
    """N(mean, diag(exp(log_std)^2)) over the trailing axis."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        log_std = np.asarray(self.log_std, dtype=np.float64)
        if mean.shape != log_std.shape:
            raise ParameterError(
                f"mean and log_std shapes differ: {mean.shape} vs {log_std.shape}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_std))):
            raise ParameterError("Gaussian parameters must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_std", log_std)

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(np.zeros(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def var(self) -> np.ndarray:
        return np.exp(2.0 * self.log_std)

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        return diag_log_prob(x, self.mean, self.log_std)


def diag_log_prob(x: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Log-density summed over the trailing axis."""
    z = (np.asarray(x) - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z**2 - log_std - 0.5 * LOG_2PI, axis=-1)


def sample(g: DiagGaussian, noise: np.ndarray) -> np.ndarray:
    """Reparameterized draw mean + std * noise."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1:] != g.mean.shape[-1:]:
        raise ParameterError(
            f"noise has trailing size {noise.shape[-1:]}, expected {g.mean.shape[-1:]}"
        )
    return g.mean + g.std * noise


def kl_diag(q: DiagGaussian, p: DiagGaussian):
    """KL(q || p) for diagonal Gaussians, summed over the trailing axis."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ParameterError(f"dimension mismatch: {q.dim} vs {p.dim}")
    var_ratio = np.exp(2.0 * (q.log_std - p.log_std))
    mean_term = (q.mean - p.mean) ** 2 * np.exp(-2.0 * p.log_std)
    kl = np.sum(0.5 * (var_ratio + mean_term - 1.0) - (q.log_std - p.log_std), axis=-1)
    if np.ndim(kl) == 0:
        return float(max(kl, 0.0))
    return np.maximum(kl, 0.0)
