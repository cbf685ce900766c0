"""Exact Gaussian process regression with a Matern 5/2 ARD kernel.

Inputs live in the unit cube (see :func:`coupledbo.space.encode`). The
model keeps a Cholesky factor of ``K + noise*I (+ jitter*I)`` and the
solve ``alpha = (K + noise*I)^-1 (y - m)``; everything downstream
(posterior, likelihood, expected improvement) reads from those.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dpotrf, dpotrs
from scipy.stats import norm

SQRT5 = math.sqrt(5.0)
LOG_2PI = math.log(2.0 * math.pi)

JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)

# Hyperparameter search box (signal/noise are multiples of var(y)).
LENGTHSCALE_BOUNDS = (0.05, 5.0)
SIGNAL_BOUNDS = (0.1, 10.0)
NOISE_BOUNDS = (1e-6, 1e-1)
N_RANDOM_SEARCH = 64
N_COORD_STEPS = 100


class SingularModelError(np.linalg.LinAlgError):
    """Covariance could not be factorized even with the largest jitter."""


@dataclass(frozen=True)
class KernelHyper:
    lengthscales: np.ndarray
    signal_variance: float
    noise_variance: float = 0.0
    prior_mean: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if np.any(ls <= 0):
            raise ValueError("lengthscales must be positive")
        if not self.signal_variance > 0:
            raise ValueError("signal_variance must be positive")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")

    def __eq__(self, other):
        if not isinstance(other, KernelHyper):
            return NotImplemented
        return (
            np.array_equal(self.lengthscales, other.lengthscales)
            and self.signal_variance == other.signal_variance
            and self.noise_variance == other.noise_variance
            and self.prior_mean == other.prior_mean
        )

    __hash__ = None


def _matern_from_r(r: np.ndarray, signal_variance: float) -> np.ndarray:
    s5r = SQRT5 * r
    return signal_variance * (1.0 + s5r + s5r * s5r / 3.0) * np.exp(-s5r)


def kernel_matrix(A: np.ndarray, B: np.ndarray, hyper: KernelHyper) -> np.ndarray:
    """Matern 5/2 cross-covariance between the rows of A and B."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1] or A.shape[1] != hyper.lengthscales.size:
        raise ValueError(
            f"dimension mismatch: {A.shape[1]}, {B.shape[1]}, "
            f"{hyper.lengthscales.size} lengthscales"
        )
    As = A / hyper.lengthscales
    Bs = B / hyper.lengthscales
    d2 = (
        np.sum(As * As, axis=1)[:, None]
        + np.sum(Bs * Bs, axis=1)[None, :]
        - 2.0 * As @ Bs.T
    )
    r = np.sqrt(np.maximum(d2, 0.0))
    return _matern_from_r(r, hyper.signal_variance)


def kernel_matern52(a, b, hyper: KernelHyper) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape or a.size != hyper.lengthscales.size:
        raise ValueError("dimension mismatch")
    r = math.sqrt(float(np.sum(((a - b) / hyper.lengthscales) ** 2)))
    return float(_matern_from_r(np.array(r), hyper.signal_variance))


def cholesky_jittered(K: np.ndarray, scale: float = 1.0) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of K, adding escalating diagonal jitter on failure.

    Jitter values are multiplied by `scale` (typically the kernel's signal
    variance) so the ladder is relative to the matrix magnitude.
    """
    n = K.shape[0]
    for jitter in JITTERS:
        j = jitter * scale
        try:
            L = np.linalg.cholesky(K + j * np.eye(n) if j else K)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, j
    raise SingularModelError(f"covariance of size {n} not factorizable with jitter <= 1e-4")


@dataclass(frozen=True)
class GpModel:
    X: np.ndarray
    y: np.ndarray
    hyper: KernelHyper
    factor: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def predict(self, Xq) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at each row of Xq."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        h = self.hyper
        if self.n == 0:
            m = np.full(Xq.shape[0], h.prior_mean)
            return m, np.full(Xq.shape[0], h.signal_variance)
        Ks = kernel_matrix(Xq, self.X, h)
        mean = h.prior_mean + Ks @ self.alpha
        v = solve_triangular(self.factor, Ks.T, lower=True, check_finite=False)
        var = h.signal_variance - np.sum(v * v, axis=0)
        return mean, np.maximum(var, 0.0)


def build_gp(X, y, hyper: KernelHyper) -> GpModel:
    """Factorize the training covariance for fixed hyperparameters."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ValueError(f"{X.shape[0]} inputs but {y.size} targets")
    if y.size == 0:
        return GpModel(X.reshape(0, hyper.lengthscales.size), y, hyper,
                       np.zeros((0, 0)), np.zeros(0))
    K = kernel_matrix(X, X, hyper)
    K[np.diag_indices_from(K)] += hyper.noise_variance
    L, jitter = cholesky_jittered(K, hyper.signal_variance)
    alpha = cho_solve((L, True), y - hyper.prior_mean, check_finite=False)
    return GpModel(X, y, hyper, L, alpha, jitter)


def gp_posterior(model: GpModel, x) -> tuple[float, float]:
    mean, var = model.predict(np.asarray(x, dtype=float).reshape(1, -1))
    return float(mean[0]), float(var[0])


def log_marginal_likelihood(model: GpModel) -> float:
    if model.n == 0:
        return 0.0
    r = model.y - model.hyper.prior_mean
    return float(
        -0.5 * r @ model.alpha
        - np.sum(np.log(np.diag(model.factor)))
        - 0.5 * model.n * LOG_2PI
    )


def _target_scale(y: np.ndarray) -> float:
    v = float(np.var(y)) if y.size > 1 else 0.0
    return v if v > 1e-12 else 1.0


def default_hyper(X, y) -> KernelHyper:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    scale = _target_scale(y)
    mean = float(np.mean(y)) if y.size else 0.0
    return KernelHyper(np.full(X.shape[1], 0.5), scale, 1e-6 * scale, mean)


def fit_gp(X, y, *, fit_hyper: bool = True, rng: np.random.Generator | None = None,
           hyper: KernelHyper | None = None) -> GpModel:
    """Build a GP on (X, y), optionally maximizing the marginal likelihood.

    Fitting is a seeded log-uniform random search over the hyperparameter
    box followed by coordinate descent in log space. The prior mean is the
    training-target mean.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("fit_gp needs at least one observation")
    if hyper is None:
        hyper = default_hyper(X, y)
    if not fit_hyper:
        return build_gp(X, y, hyper)
    if rng is None:
        rng = np.random.default_rng(0)

    d = X.shape[1]
    scale = _target_scale(y)
    mean = float(np.mean(y))
    lo = np.log(np.r_[np.full(d, LENGTHSCALE_BOUNDS[0]),
                      SIGNAL_BOUNDS[0] * scale, NOISE_BOUNDS[0] * scale])
    hi = np.log(np.r_[np.full(d, LENGTHSCALE_BOUNDS[1]),
                      SIGNAL_BOUNDS[1] * scale, NOISE_BOUNDS[1] * scale])

    # squared distances per dimension are reused by every likelihood evaluation
    diff2 = (X[:, None, :] - X[None, :, :]) ** 2
    r_centered = y - mean
    n = y.size

    def objective(theta):
        ls = np.exp(theta[:d])
        sv, nv = math.exp(theta[d]), math.exp(theta[d + 1])
        r = np.sqrt(diff2 @ (1.0 / ls ** 2))
        K = _matern_from_r(r, sv)
        K.flat[:: n + 1] += nv
        L, info = dpotrf(K, lower=1, clean=0, overwrite_a=1)
        if info != 0:
            return -np.inf
        a, _ = dpotrs(L, r_centered, lower=1)
        return (-0.5 * r_centered @ a - np.sum(np.log(L.diagonal()))
                - 0.5 * n * LOG_2PI)

    samples = lo + (hi - lo) * rng.random((N_RANDOM_SEARCH, d + 2))
    scores = [objective(t) for t in samples]
    best = int(np.argmax(scores))
    theta, score = samples[best].copy(), scores[best]

    step = np.full(d + 2, 0.5)
    for k in range(N_COORD_STEPS):
        j = k % (d + 2)
        improved = False
        for sign in (1.0, -1.0):
            cand = theta.copy()
            cand[j] = min(max(cand[j] + sign * step[j], lo[j]), hi[j])
            if cand[j] == theta[j]:
                continue
            s = objective(cand)
            if s > score:
                theta, score, improved = cand, s, True
                break
        if not improved:
            step[j] *= 0.5

    fitted = KernelHyper(np.exp(theta[:d]), math.exp(theta[d]), math.exp(theta[d + 1]), mean)
    return build_gp(X, y, fitted)


def expected_improvement(mean, variance, incumbent: float):
    """Closed-form EI for maximization: E[max(f - incumbent, 0)].

    Accepts scalars or arrays; returns the same shape.
    """
    mean = np.asarray(mean, dtype=float)
    s = np.sqrt(np.maximum(np.asarray(variance, dtype=float), 0.0))
    diff = mean - incumbent
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = np.where(s > 0, diff / np.where(s > 0, s, 1.0), 0.0)
        ei = np.where(s > 0, diff * norm.cdf(z) + s * norm.pdf(z), np.maximum(diff, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei
