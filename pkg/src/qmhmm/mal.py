"""Multivariate Asymmetric Laplace distribution with quantile constraints.

The skewness ``xi`` and the scale diagonal ``Lambda`` are pinned by the quantile
levels so that each location component is the corresponding marginal quantile.
Only the diagonal scale ``D`` and the correlation ``Psi`` are free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .special import bessel_k_ratio, log_bessel_k, log_bessel_k_and_ratio

__all__ = [
    "M_FLOOR",
    "QuantileSpec",
    "MALParams",
    "GigWeights",
    "MALKernel",
    "check_loss",
    "mal_log_density",
    "mal_sample",
    "mal_covariance",
    "mal_correlation",
    "gig_expectations",
    "sqrtm_psd",
    "mixing_log_normalizer",
]

# Quadratic forms below this are clamped before any Bessel/GIG evaluation.
M_FLOOR = 1e-10
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class QuantileSpec:
    """Quantile levels and the skewness/scale constants they imply."""

    tau: tuple[float, ...]

    def __init__(self, tau: float | Sequence[float]):
        levels = tuple(float(t) for t in np.atleast_1d(np.asarray(tau, dtype=float)))
        if not levels:
            raise ValueError("at least one quantile level is required")
        for t in levels:
            if not (0.0 < t < 1.0):
                raise ValueError(f"quantile levels must lie in (0, 1), got {t}")
        object.__setattr__(self, "tau", levels)

    @property
    def p(self) -> int:
        return len(self.tau)

    @property
    def tau_array(self) -> np.ndarray:
        return np.array(self.tau)

    @property
    def xi_tilde(self) -> np.ndarray:
        t = self.tau_array
        return (1.0 - 2.0 * t) / (t * (1.0 - t))

    @property
    def sigma2(self) -> np.ndarray:
        t = self.tau_array
        return 2.0 / (t * (1.0 - t))

    @property
    def lam(self) -> np.ndarray:
        """Diagonal of Lambda."""
        return np.sqrt(self.sigma2)

    @property
    def nu(self) -> float:
        return (2.0 - self.p) / 2.0


@dataclass
class MALParams:
    mu: np.ndarray
    d: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.d = np.atleast_1d(np.asarray(self.d, dtype=float))
        self.psi = np.atleast_2d(np.asarray(self.psi, dtype=float))


@dataclass
class GigWeights:
    """Posterior moments of the exponential mixing variable.

    ``c_hat`` is E[C | y] and ``z_hat`` is E[1/C | y]; both may be arrays.
    """

    c_hat: np.ndarray
    z_hat: np.ndarray


def check_loss(u, tau):
    """Quantile check function ``u (tau - 1{u < 0})``, elementwise."""
    u = np.asarray(u, dtype=float)
    return u * (tau - (u < 0))


def mixing_log_normalizer(shift: float) -> float:
    """``ln int_0^inf exp(-c - shift / (2c)) dc = ln(x K_1(x))`` with ``x = sqrt(2 shift)``.

    Adding ``shift`` to the quadratic form is the same as tilting the Exp(1)
    mixing law by ``exp(-shift / (2c))``; this constant renormalizes it.
    """
    if not np.isfinite(shift) or shift < 0:
        raise ValueError("shift must be finite and non-negative")
    if shift == 0:
        return 0.0
    x = np.sqrt(2.0 * shift)
    return float(np.log(x) + log_bessel_k(1.0, x))


def _validate_scale(d: np.ndarray, psi: np.ndarray, p: int) -> None:
    if d.shape != (p,):
        raise ValueError(f"scale vector has shape {d.shape}, expected ({p},)")
    if psi.shape != (p, p):
        raise ValueError(f"correlation matrix has shape {psi.shape}, expected ({p}, {p})")
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise ValueError("scale entries must be finite and positive")


class MALKernel:
    """Precomputed constants for repeated MAL evaluations at fixed (D, Psi, tau).

    Works on residuals ``y - mu`` of shape ``(..., p)`` so the EM can evaluate
    every (observation, state, component) cell in one call.

    ``m_shift > 0`` evaluates the density at ``m_tilde + m_shift`` and
    renormalizes (see :func:`mixing_log_normalizer`).  This bounds the density
    at the location for ``p >= 2``, where it is otherwise infinite.
    """

    def __init__(self, d, psi, spec: QuantileSpec, m_shift: float = 0.0):
        d = np.atleast_1d(np.asarray(d, dtype=float))
        psi = np.atleast_2d(np.asarray(psi, dtype=float))
        p = spec.p
        _validate_scale(d, psi, p)
        self.spec = spec
        self.d = d
        self.psi = psi
        lam = spec.lam
        self.sigma = lam[:, None] * psi * lam[None, :]
        try:
            chol = np.linalg.cholesky(self.sigma)
        except np.linalg.LinAlgError as exc:
            raise ValueError("correlation matrix is not positive definite") from exc
        sigma_inv = np.linalg.inv(self.sigma)
        self.sigma_inv = 0.5 * (sigma_inv + sigma_inv.T)
        xi = spec.xi_tilde
        self.xi = xi
        self.nu = spec.nu
        self.d_tilde = float(xi @ self.sigma_inv @ xi)
        # (D Sigma D)^{-1} = D^{-1} Sigma^{-1} D^{-1}
        self.prec = self.sigma_inv / d[:, None] / d[None, :]
        self.lin = (self.sigma_inv @ xi) / d
        logdet_sigma = 2.0 * np.sum(np.log(np.diag(chol)))
        self.logdet = logdet_sigma + 2.0 * np.sum(np.log(d))
        self.m_shift = float(m_shift)
        self.const = (np.log(2.0) - 0.5 * p * _LOG_2PI - 0.5 * self.logdet
                      - mixing_log_normalizer(self.m_shift))

    def mahalanobis(self, resid: np.ndarray) -> np.ndarray:
        m = np.einsum("...i,ij,...j->...", resid, self.prec, resid)
        return np.maximum(m + self.m_shift, M_FLOOR)

    def logpdf(self, resid: np.ndarray, return_m: bool = False):
        resid = np.asarray(resid, dtype=float)
        m = self.mahalanobis(resid)
        a = 2.0 + self.d_tilde
        arg = np.sqrt(a * m)
        out = self.const + resid @ self.lin + log_bessel_k(self.nu, arg)
        if self.nu != 0.0:
            out = out + 0.5 * self.nu * (np.log(m) - np.log(a))
        if return_m:
            return out, m
        return out

    def gig(self, m: np.ndarray) -> GigWeights:
        return gig_expectations(m, self.d_tilde, self.nu)

    def logpdf_and_gig(self, resid: np.ndarray) -> tuple[np.ndarray, np.ndarray, GigWeights]:
        """Log-density, clamped Mahalanobis term and GIG moments in one pass."""
        m = self.mahalanobis(resid)
        a = 2.0 + self.d_tilde
        arg = np.sqrt(a * m)
        logk, ratio = log_bessel_k_and_ratio(self.nu, arg)
        out = self.const + resid @ self.lin + logk
        if self.nu != 0.0:
            out = out + 0.5 * self.nu * (np.log(m) - np.log(a))
        gig = GigWeights(c_hat=np.sqrt(m / a) * ratio,
                         z_hat=np.sqrt(a / m) * ratio - 2.0 * self.nu / m)
        return out, m, gig


def mal_log_density(y, params: MALParams, spec: QuantileSpec):
    """MAL log-density at ``y`` (a p-vector or an ``(n, p)`` array of rows)."""
    y = np.asarray(y, dtype=float)
    p = spec.p
    if y.shape[-1:] != (p,) and not (p == 1 and y.ndim <= 1):
        raise ValueError(f"observation dimension {y.shape[-1:]} does not match p = {p}")
    if p == 1 and y.ndim <= 1 and y.shape[-1:] != (1,):
        y = y[..., None]
    mu = np.atleast_1d(params.mu)
    if mu.shape != (p,):
        raise ValueError(f"location has shape {mu.shape}, expected ({p},)")
    kernel = MALKernel(params.d, params.psi, spec)
    out = kernel.logpdf(y - mu)
    return float(out) if np.ndim(out) == 0 else out


def sqrtm_psd(a: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Symmetric square root with eigenvalues clipped at ``floor``."""
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.maximum(w, floor))) @ v.T


def mal_sample(params: MALParams, spec: QuantileSpec, n: int, seed: int | None = None,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw ``n`` rows via ``mu + D xi C + sqrt(C) D Sigma^{1/2} Z``."""
    if n < 0:
        raise ValueError("sample size must be non-negative")
    p = spec.p
    d = np.atleast_1d(np.asarray(params.d, dtype=float))
    psi = np.atleast_2d(np.asarray(params.psi, dtype=float))
    _validate_scale(d, psi, p)
    if not np.allclose(psi, psi.T) or not np.all(np.isfinite(psi)):
        raise ValueError("correlation matrix must be finite and symmetric")
    if np.any(np.linalg.eigvalsh(psi) < -1e-10):
        raise ValueError("correlation matrix is not positive semi-definite")
    rng = rng if rng is not None else np.random.default_rng(seed)
    lam = spec.lam
    root = sqrtm_psd(lam[:, None] * psi * lam[None, :])
    c = rng.standard_exponential(n)
    z = rng.standard_normal((n, p))
    return (np.atleast_1d(params.mu) + np.outer(c, d * spec.xi_tilde)
            + np.sqrt(c)[:, None] * (z @ root.T) * d)


def mal_covariance(params: MALParams, spec: QuantileSpec) -> np.ndarray:
    """Response covariance ``D (xi xi' + Lambda Psi Lambda) D``."""
    d = np.atleast_1d(np.asarray(params.d, dtype=float))
    psi = np.atleast_2d(np.asarray(params.psi, dtype=float))
    _validate_scale(d, psi, spec.p)
    xi, lam = spec.xi_tilde, spec.lam
    inner = np.outer(xi, xi) + lam[:, None] * psi * lam[None, :]
    return d[:, None] * inner * d[None, :]


def mal_correlation(params: MALParams, spec: QuantileSpec) -> np.ndarray:
    s = mal_covariance(params, spec)
    sd = np.sqrt(np.diag(s))
    return s / sd[:, None] / sd[None, :]


def gig_expectations(m_tilde, d_tilde, nu: float) -> GigWeights:
    """E[C] and E[1/C] under the GIG(nu, 2 + d_tilde, m_tilde) posterior.

    ``m_tilde`` is clamped at :data:`M_FLOOR`.
    """
    m = np.asarray(m_tilde, dtype=float)
    if np.any(m < 0) or np.any(~np.isfinite(m)):
        raise ValueError("m_tilde must be finite and non-negative")
    if not np.isfinite(d_tilde) or d_tilde < 0:
        raise ValueError("d_tilde must be finite and non-negative")
    m = np.maximum(m, M_FLOOR)
    a = 2.0 + d_tilde
    ratio = bessel_k_ratio(nu, np.sqrt(a * m))
    c_hat = np.sqrt(m / a) * ratio
    z_hat = np.sqrt(a / m) * ratio - 2.0 * nu / m
    return GigWeights(c_hat=c_hat, z_hat=z_hat)
