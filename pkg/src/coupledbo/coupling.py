"""Cheap/expensive GP coupling through a scaled cross-covariance.

The two fidelities are modeled jointly::

    [f_cheap ]       ( [mu_a]   [ K_a        rho*K_a' ] )
    [f_exp   ]  ~  N ( [mu_b] , [ rho*K_a'^T  K_b     ] )

where ``K_a'`` evaluates the cheap model's kernel between cheap and
expensive inputs. Conditioning the expensive block on the cheap one is
the Schur complement computed by :func:`transfer_update`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .gp import GpModel, KernelHyper, SingularModelError, cholesky_jittered, kernel_matrix

DEFAULT_RHO = 0.9
RHO_MAX = 0.99
MIN_CO_OBSERVATIONS = 3
# successive shrink factor applied to rho when the joint covariance is not PD
RHO_BACKOFF = 0.5
RHO_BACKOFF_STEPS = 8


def estimate_rho(co_observations) -> float:
    """Pearson correlation of co-observed (cheap, expensive) values, clamped.

    `co_observations` is a sequence of ``(cheap_value, expensive_value)``
    pairs or ``(config, cheap_value, expensive_value)`` triples.
    """
    pairs = [tuple(c)[-2:] for c in co_observations]
    if len(pairs) < MIN_CO_OBSERVATIONS:
        return DEFAULT_RHO
    a = np.array([p[0] for p in pairs], dtype=float)
    b = np.array([p[1] for p in pairs], dtype=float)
    sa, sb = a.std(), b.std()
    if sa <= 1e-12 * max(1.0, abs(a.mean())) or sb <= 1e-12 * max(1.0, abs(b.mean())):
        return DEFAULT_RHO
    r = float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))
    return min(max(r, 0.0), RHO_MAX)


def cross_covariance(cheap_inputs, beta_inputs, hyper_alpha: KernelHyper, rho: float) -> np.ndarray:
    """K^{beta,alpha}: entry (i, j) = rho * k_alpha(beta_i, cheap_j)."""
    if not 0.0 <= rho <= RHO_MAX:
        raise ValueError(f"rho must lie in [0, {RHO_MAX}], got {rho}")
    B = np.atleast_2d(np.asarray(beta_inputs, dtype=float))
    A = np.atleast_2d(np.asarray(cheap_inputs, dtype=float))
    return rho * kernel_matrix(B, A, hyper_alpha)


class SingularTransferError(SingularModelError):
    pass


def transfer_update(K_beta, K_beta_alpha, K_alpha) -> np.ndarray:
    """Schur complement K_b - K_ba K_a^-1 K_ab, symmetrized.

    K_a is factorized (with escalating jitter); no explicit inverse is formed.
    """
    K_beta = np.asarray(K_beta, dtype=float)
    K_ba = np.asarray(K_beta_alpha, dtype=float)
    K_alpha = np.asarray(K_alpha, dtype=float)
    if K_ba.shape != (K_beta.shape[0], K_alpha.shape[0]):
        raise ValueError(
            f"shape mismatch: K_beta {K_beta.shape}, K_beta_alpha {K_ba.shape}, "
            f"K_alpha {K_alpha.shape}"
        )
    scale = float(np.mean(np.diag(K_alpha))) if K_alpha.size else 1.0
    try:
        L, _ = cholesky_jittered(K_alpha, max(scale, 1e-300))
    except SingularModelError as exc:
        raise SingularTransferError(str(exc)) from None
    V = solve_triangular(L, K_ba.T, lower=True, check_finite=False)
    M = K_beta - V.T @ V
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class CoupledGp:
    """Joint posterior state, stored as a block Cholesky factor.

    The stacked training covariance factorizes as::

        [ L_a  0  ] [ L_a  0  ]^T        C   = K_ba L_a^-T
        [ C    L_s] [ C    L_s]    ,     L_s = chol(K_b - C C^T)

    where L_a is gp_alpha's own factor and ``K_b - C C^T`` is the transfer
    update (Schur complement). At rho = 0, C vanishes and L_s is exactly
    gp_beta's factor.
    """
    gp_alpha: GpModel
    gp_beta: GpModel
    rho: float
    co_observations: tuple
    cross_factor: np.ndarray      # C, shape (n_beta, n_alpha)
    schur_factor: np.ndarray      # L_s
    alpha_a: np.ndarray           # cheap part of K^-1 (targets - prior means)
    alpha_b: np.ndarray           # expensive part
    jitter: float = 0.0

    @property
    def factor(self) -> np.ndarray:
        """The full lower-triangular joint factor."""
        La, C, Ls = self.gp_alpha.factor, self.cross_factor, self.schur_factor
        return np.block([[La, np.zeros((La.shape[0], Ls.shape[0]))], [C, Ls]])

    @property
    def alpha_vec(self) -> np.ndarray:
        return np.r_[self.alpha_a, self.alpha_b]

    def predict(self, Xq) -> tuple[np.ndarray, np.ndarray]:
        """Expensive-fidelity posterior at each row of Xq (batched predict_expensive)."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        ga, gb = self.gp_alpha, self.gp_beta
        k_a = self.rho * kernel_matrix(Xq, ga.X, ga.hyper)
        k_b = kernel_matrix(Xq, gb.X, gb.hyper)
        mean = gb.hyper.prior_mean + k_b @ self.alpha_b
        var = np.full(Xq.shape[0], gb.hyper.signal_variance)
        if self.rho != 0.0 and ga.n:
            mean = mean + k_a @ self.alpha_a
            v_a = solve_triangular(ga.factor, k_a.T, lower=True, check_finite=False)
            v_b = solve_triangular(self.schur_factor, k_b.T - self.cross_factor @ v_a,
                                   lower=True, check_finite=False)
            var = var - np.sum(v_a * v_a, axis=0)
        else:
            v_b = solve_triangular(self.schur_factor, k_b.T, lower=True, check_finite=False)
        var = var - np.sum(v_b * v_b, axis=0)
        return mean, np.maximum(var, 0.0)


def joint_covariance(gp_alpha: GpModel, gp_beta: GpModel, rho: float) -> np.ndarray:
    """Noisy training covariance of the stacked (cheap, expensive) targets."""
    Xa, Xb = gp_alpha.X, gp_beta.X
    Kaa = kernel_matrix(Xa, Xa, gp_alpha.hyper)
    Kaa[np.diag_indices_from(Kaa)] += gp_alpha.hyper.noise_variance
    Kbb = kernel_matrix(Xb, Xb, gp_beta.hyper)
    Kbb[np.diag_indices_from(Kbb)] += gp_beta.hyper.noise_variance
    Kba = cross_covariance(Xa, Xb, gp_alpha.hyper, rho)
    return np.block([[Kaa, Kba.T], [Kba, Kbb]])


def build_coupled(gp_alpha: GpModel, gp_beta: GpModel, co_observations=(),
                  rho: float | None = None) -> CoupledGp:
    """Condition the joint model on all cheap and expensive observations.

    rho defaults to :func:`estimate_rho` of the co-observations and is capped
    at sqrt(sv_beta / sv_alpha). If the joint covariance still cannot be
    factorized, rho is shrunk geometrically and finally set to 0, where the
    joint factor is just the two per-model factors.
    """
    if gp_beta.n < 1:
        raise ValueError("predict_expensive needs at least one expensive observation")
    if rho is None:
        rho = estimate_rho(co_observations)
    rho = min(rho, RHO_MAX,
              math.sqrt(gp_beta.hyper.signal_variance / gp_alpha.hyper.signal_variance))
    co_observations = tuple(co_observations)
    if rho > 0.0 and gp_alpha.n:
        coupled = _condition_joint(gp_alpha, gp_beta, rho, co_observations)
        if coupled is not None:
            return coupled
    # independent fidelities: the joint factor is block diagonal
    return CoupledGp(gp_alpha, gp_beta, 0.0, co_observations,
                     np.zeros((gp_beta.n, gp_alpha.n)), gp_beta.factor,
                     gp_alpha.alpha, gp_beta.alpha, gp_beta.jitter)


def _condition_joint(gp_alpha, gp_beta, rho, co_observations) -> CoupledGp | None:
    """Block Cholesky of the joint covariance, backing off rho until it factorizes."""
    La = gp_alpha.factor
    r_b = gp_beta.y - gp_beta.hyper.prior_mean
    z_a = solve_triangular(La, gp_alpha.y - gp_alpha.hyper.prior_mean, lower=True,
                           check_finite=False)
    # expensive block with gp_beta's own regularization (noise, then its jitter)
    Kbb = kernel_matrix(gp_beta.X, gp_beta.X, gp_beta.hyper)
    Kbb[np.diag_indices_from(Kbb)] += gp_beta.hyper.noise_variance
    if gp_beta.jitter:
        Kbb = Kbb + gp_beta.jitter * np.eye(gp_beta.n)

    for r in (rho * RHO_BACKOFF ** k for k in range(RHO_BACKOFF_STEPS)):
        Kba = cross_covariance(gp_alpha.X, gp_beta.X, gp_alpha.hyper, r)
        C = solve_triangular(La, Kba.T, lower=True, check_finite=False).T
        try:
            Ls, jitter = cholesky_jittered(Kbb - C @ C.T, gp_beta.hyper.signal_variance)
        except SingularModelError:
            continue
        z_b = solve_triangular(Ls, r_b - C @ z_a, lower=True, check_finite=False)
        alpha_b = solve_triangular(Ls.T, z_b, lower=False, check_finite=False)
        alpha_a = solve_triangular(La.T, z_a - C.T @ alpha_b, lower=False, check_finite=False)
        return CoupledGp(gp_alpha, gp_beta, r, co_observations, C, Ls, alpha_a, alpha_b, jitter)
    return None


def predict_expensive(coupled: CoupledGp, x) -> tuple[float, float]:
    mean, var = coupled.predict(np.asarray(x, dtype=float).reshape(1, -1))
    return float(mean[0]), float(var[0])
