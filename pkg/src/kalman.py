"""
Exact oracles for linear-Gaussian sequence models.

kalman_exact runs a forward filter and an RTS smoother. The dense helpers work with the
joint Gaussian over all latents z_{1:T} at once (T*d dimensions), which is small at the
sizes the property checks use and gives exact posteriors, KL gaps and recognition joints.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from src.config import MIN_EMISSION_VARIANCE
from src.errors import NumericalError, ParameterError

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class LinearGaussianSystem:
    """
    z_1 ~ N(0, I), z_k = a * z_{k-1} + N(0, diag(q)), x_k = C z_k + N(0, alpha_x I),
    y_k = D z_k + N(0, alpha_y I). The transition is diagonal.
    """

    a: np.ndarray
    q: np.ndarray
    C: np.ndarray
    alpha_x: float
    D: Optional[np.ndarray] = None
    alpha_y: float = 0.5

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=np.float64))
        q = np.atleast_1d(np.asarray(self.q, dtype=np.float64))
        c = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        d = a.shape[0]
        dy = np.zeros((0, d)) if self.D is None else np.atleast_2d(np.asarray(self.D, float))
        if q.shape != (d,) or c.shape[1] != d or dy.shape[1] != d:
            raise ParameterError(
                f"inconsistent system shapes a={a.shape} q={q.shape} C={c.shape} D={dy.shape}"
            )
        if np.any(q < 0.0):
            raise ParameterError("transition noise must be nonnegative")
        for name in ("alpha_x", "alpha_y"):
            value = float(getattr(self, name))
            if value < MIN_EMISSION_VARIANCE:
                raise ParameterError(
                    f"{name} must be >= 1/(2*pi), got {value}", name=name, value=value
                )
            object.__setattr__(self, name, value)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "C", c)
        object.__setattr__(self, "D", dy)

    @classmethod
    def random(cls, rng: np.random.Generator, d: int = 2, n_y: int = 2) -> "LinearGaussianSystem":
        """Random stable system with square diagonal x emission."""
        return cls(
            a=rng.uniform(0.5, 0.95, d),
            q=rng.uniform(0.2, 1.0, d),
            C=np.diag(rng.uniform(0.5, 1.5, d)),
            alpha_x=float(rng.uniform(0.2, 1.0)),
            D=rng.normal(0.0, 1.0, (n_y, d)),
            alpha_y=float(rng.uniform(0.2, 1.0)),
        )

    @property
    def d(self) -> int:
        return self.a.shape[0]

    @property
    def n_x(self) -> int:
        return self.C.shape[0]

    @property
    def n_y(self) -> int:
        return self.D.shape[0]

    @property
    def is_decoupled(self) -> bool:
        return self.C.shape == (self.d, self.d) and np.allclose(self.C, np.diag(np.diag(self.C)))

    def sample(self, rng: np.random.Generator, steps: int):
        """Draw (z, x, y) of lengths T."""
        z = np.zeros((steps, self.d))
        z[0] = rng.normal(size=self.d)
        for k in range(1, steps):
            z[k] = self.a * z[k - 1] + np.sqrt(self.q) * rng.normal(size=self.d)
        x = z @ self.C.T + math.sqrt(self.alpha_x) * rng.normal(size=(steps, self.n_x))
        y = z @ self.D.T + math.sqrt(self.alpha_y) * rng.normal(size=(steps, self.n_y))
        return z, x, y


@dataclass(frozen=True, eq=False)
class KalmanResult:
    nll: float
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    smoothed_means: np.ndarray
    smoothed_covs: np.ndarray


def _cholesky(matrix: np.ndarray, what: str):
    try:
        return linalg.cho_factor(matrix, lower=True)
    except linalg.LinAlgError as e:
        raise NumericalError(f"{what} is not positive definite", what=what) from e


def _logdet(factor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(factor[0]))))


def _stacked(system: LinearGaussianSystem, x: np.ndarray, y: Optional[np.ndarray]):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != system.n_x:
        raise ParameterError(f"x has width {x.shape[1]}, system emits {system.n_x}")
    if y is None or system.n_y == 0:
        return x, system.C, np.full(system.n_x, system.alpha_x)
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y.shape != (x.shape[0], system.n_y):
        raise ParameterError(f"y has shape {y.shape}, expected {(x.shape[0], system.n_y)}")
    obs = np.concatenate([x, y], axis=1)
    emission = np.vstack([system.C, system.D])
    noise = np.concatenate([np.full(system.n_x, system.alpha_x), np.full(system.n_y, system.alpha_y)])
    return obs, emission, noise


def kalman_exact(
    system: LinearGaussianSystem, x: np.ndarray, y: Optional[np.ndarray] = None
) -> KalmanResult:
    """Exact -log p(x, y) with filtered and RTS-smoothed posteriors."""
    obs, emission, noise = _stacked(system, x, y)
    steps, d = obs.shape[0], system.d
    transition = np.diag(system.a)
    process = np.diag(system.q)

    m_pred, p_pred = np.zeros(d), np.eye(d)
    nll = 0.0
    f_means, f_covs, pred_covs = [], [], []
    for k in range(steps):
        innov_cov = emission @ p_pred @ emission.T + np.diag(noise)
        factor = _cholesky(innov_cov, "innovation covariance")
        innov = obs[k] - emission @ m_pred
        solved = linalg.cho_solve(factor, innov)
        nll += 0.5 * (innov @ solved + _logdet(factor) + len(innov) * LOG_2PI)
        gain = linalg.cho_solve(factor, emission @ p_pred).T
        m = m_pred + gain @ innov
        p = p_pred - gain @ emission @ p_pred
        p = 0.5 * (p + p.T)
        f_means.append(m)
        f_covs.append(p)
        m_pred = transition @ m
        p_pred = transition @ p @ transition.T + process
        pred_covs.append(p_pred)

    s_means, s_covs = [f_means[-1]], [f_covs[-1]]
    for k in range(steps - 2, -1, -1):
        factor = _cholesky(pred_covs[k], "predicted covariance")
        smoother_gain = linalg.cho_solve(factor, transition @ f_covs[k]).T
        m = f_means[k] + smoother_gain @ (s_means[0] - transition @ f_means[k])
        p = f_covs[k] + smoother_gain @ (s_covs[0] - pred_covs[k]) @ smoother_gain.T
        s_means.insert(0, m)
        s_covs.insert(0, 0.5 * (p + p.T))

    logger.debug("Kalman NLL %.6f over %d steps", nll, steps)
    return KalmanResult(
        nll=float(nll),
        filtered_means=np.array(f_means),
        filtered_covs=np.array(f_covs),
        smoothed_means=np.array(s_means),
        smoothed_covs=np.array(s_covs),
    )


# Dense joint-Gaussian oracles over z_{1:T}


def prior_precision(system: LinearGaussianSystem, steps: int) -> np.ndarray:
    if np.any(system.q <= 0.0):
        raise NumericalError("prior precision needs positive transition noise")
    d = system.d
    inv_q = 1.0 / system.q
    lam = np.zeros((steps * d, steps * d))
    lam[:d, :d] = np.eye(d)
    for k in range(1, steps):
        cur, prev = slice(k * d, (k + 1) * d), slice((k - 1) * d, k * d)
        lam[cur, cur] += np.diag(inv_q)
        lam[prev, prev] += np.diag(system.a**2 * inv_q)
        lam[cur, prev] -= np.diag(system.a * inv_q)
        lam[prev, cur] -= np.diag(system.a * inv_q)
    return lam


def joint_posterior(
    system: LinearGaussianSystem,
    x: np.ndarray,
    y: Optional[np.ndarray] = None,
    x_steps: Optional[int] = None,
    y_steps: Optional[int] = None,
):
    """
    Mean and covariance of p(z_{1:T} | x_{1:x_steps}, y_{1:y_steps}).

    T is len(x). x_steps defaults to T and y_steps to T when y is given, else 0.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    steps, d = x.shape[0], system.d
    x_steps = steps if x_steps is None else x_steps
    y_steps = (steps if y is not None else 0) if y_steps is None else y_steps
    lam = prior_precision(system, steps)
    h = np.zeros(steps * d)
    for k in range(steps):
        block = slice(k * d, (k + 1) * d)
        if k < x_steps:
            lam[block, block] += system.C.T @ system.C / system.alpha_x
            h[block] += system.C.T @ x[k] / system.alpha_x
        if k < y_steps and system.n_y:
            lam[block, block] += system.D.T @ system.D / system.alpha_y
            h[block] += system.D.T @ np.asarray(y)[k] / system.alpha_y
    factor = _cholesky(lam, "posterior precision")
    cov = linalg.cho_solve(factor, np.eye(steps * d))
    return linalg.cho_solve(factor, h), 0.5 * (cov + cov.T)


def marginal_nll(system: LinearGaussianSystem, x: np.ndarray, y: Optional[np.ndarray] = None):
    """-log p(x, y) from the dense joint Gaussian; cross-checks kalman_exact."""
    obs, emission, noise = _stacked(system, x, y)
    steps, d = obs.shape[0], system.d
    prior_cov = linalg.inv(prior_precision(system, steps))
    big = linalg.block_diag(*([emission] * steps))
    cov = big @ prior_cov @ big.T + np.diag(np.tile(noise, steps))
    factor = _cholesky(cov, "observation covariance")
    flat = obs.reshape(-1)
    return 0.5 * float(flat @ linalg.cho_solve(factor, flat) + _logdet(factor) + len(flat) * LOG_2PI)


def gaussian_kl(m0: np.ndarray, s0: np.ndarray, m1: np.ndarray, s1: np.ndarray) -> float:
    """KL(N(m0, s0) || N(m1, s1)) for full covariances."""
    f1 = _cholesky(s1, "KL target covariance")
    f0 = _cholesky(s0, "KL source covariance")
    diff = m1 - m0
    trace = np.trace(linalg.cho_solve(f1, s0))
    quad = diff @ linalg.cho_solve(f1, diff)
    return max(0.5 * float(trace + quad - len(m0) + _logdet(f1) - _logdet(f0)), 0.0)


def predictability_gap(system, x, y, t: int) -> float:
    """KL(p(z | x_{1:t}) || p(z | x, y)), the price of predicting from a prefix."""
    m_t, s_t = joint_posterior(system, x, x_steps=t, y_steps=0)
    m_all, s_all = joint_posterior(system, x, y)
    return gaussian_kl(m_t, s_t, m_all, s_all)


def recognition_joint(system: LinearGaussianSystem, rec, t: int):
    """
    Joint Gaussian of the sampling distribution used by the prefix loss at split t:
    z_t from the belief, z_{t-1..1} from the smoothing heads, z_{t+1..T} from the
    transitions. Built as z = mean + L e with e standard normal.
    """
    steps, d = rec.means.shape
    if not 1 <= t <= steps:
        raise ParameterError(f"split {t} outside [1, {steps}]")
    mean = [None] * steps
    loading = [None] * steps

    def blank():
        return np.zeros((d, steps * d))

    mean[t - 1] = rec.means[t - 1]
    loading[t - 1] = blank()
    loading[t - 1][:, (t - 1) * d : t * d] = np.diag(np.sqrt(rec.variances[t - 1]))
    for k in range(t - 1, 0, -1):
        alpha, gain, var = rec.smoothing_coefficients(k)
        mean[k - 1] = alpha + gain * mean[k]
        loading[k - 1] = gain[:, None] * loading[k]
        loading[k - 1][:, (k - 1) * d : k * d] += np.diag(np.sqrt(var))
    for k in range(t + 1, steps + 1):
        mean[k - 1] = system.a * mean[k - 2]
        loading[k - 1] = system.a[:, None] * loading[k - 2]
        loading[k - 1][:, (k - 1) * d : k * d] += np.diag(np.sqrt(system.q))
    big = np.vstack(loading)
    return np.concatenate(mean), big @ big.T


def expected_prefix_loss(system, rec, x, y, t: int) -> float:
    """Exact expectation of the prefix loss: -log p(x, y) + KL(Q_t || p(z | x, y))."""
    m_q, s_q = recognition_joint(system, rec, t)
    m_p, s_p = joint_posterior(system, x, y)
    return kalman_exact(system, x, y).nll + gaussian_kl(m_q, s_q, m_p, s_p)
