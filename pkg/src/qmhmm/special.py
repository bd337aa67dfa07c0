"""Modified Bessel function of the third kind, evaluated in the log domain.

The MAL likelihood and the GIG posterior moments only ever need ``ln K_nu(x)``
and the ratio ``K_{nu+1}(x) / K_nu(x)``.  Both are computed here without
forming ``K_nu`` itself so that neither large arguments (underflow) nor large
orders at tiny arguments (overflow) break the EM inner loop.

Strategy: reduce ``|nu|`` to a base order in ``[0, 1)``, evaluate the two
exponentially scaled base values, then climb with the three-term recurrence
written for successive ratios (forward recurrence is stable for ``K``).
"""

from __future__ import annotations

import numpy as np
from scipy import special as sc

__all__ = ["log_bessel_k", "bessel_k_ratio", "log_bessel_k_and_ratio", "MAX_ORDER"]

MAX_ORDER = 50.0
_HALF_LOG_PI_2 = 0.5 * np.log(np.pi / 2.0)


def _check_args(nu: float, x) -> np.ndarray:
    nu = float(nu)
    if not np.isfinite(nu):
        raise ValueError(f"Bessel order must be finite, got {nu}")
    if abs(nu) > MAX_ORDER + 1.0:
        raise ValueError(f"|nu| = {abs(nu)} exceeds supported range {MAX_ORDER}")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise ValueError("Bessel argument must be finite and strictly positive")
    return x


def _base_log_and_ratio(mu: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ln K_mu(x) and K_{mu+1}(x)/K_mu(x) for a base order mu in [0, 1)."""
    if mu == 0.0:
        k0 = sc.k0e(x)
        k1 = sc.k1e(x)
        return np.log(k0) - x, k1 / k0
    if mu == 0.5:
        # K_{1/2}(x) = sqrt(pi / 2x) e^{-x}; K_{3/2} = K_{1/2} (1 + 1/x)
        return _HALF_LOG_PI_2 - 0.5 * np.log(x) - x, 1.0 + 1.0 / x
    ka = sc.kve(mu, x)
    kb = sc.kve(mu + 1.0, x)
    return np.log(ka) - x, kb / ka


def _log_k_and_ratio(nu: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nu = abs(nu)
    n = int(np.floor(nu))
    mu = nu - n
    if mu < 1e-250:
        # K is even in its order, so K_mu = K_0 (1 + O(mu^2)); kve breaks on denormal orders
        mu = 0.0
    logk, ratio = _base_log_and_ratio(mu, x)
    # ratio_n = K_{mu+n+1}/K_{mu+n};  ratio_{n} = 1/ratio_{n-1} + 2(mu+n)/x
    for step in range(1, n + 1):
        logk = logk + np.log(ratio)
        ratio = 1.0 / ratio + 2.0 * (mu + step) / x
    return logk, ratio


def log_bessel_k(nu: float, x):
    """Natural log of the modified Bessel function of the third kind.

    Parameters
    ----------
    nu : float
        Order, any finite real with ``|nu| <= 50``.  ``K_{-nu} = K_nu``.
    x : float or array_like
        Strictly positive argument(s).

    Returns
    -------
    float or ndarray
        ``ln K_nu(x)``, same shape as ``x``.
    """
    xa = _check_args(nu, x)
    logk, _ = _log_k_and_ratio(float(nu), np.atleast_1d(xa))
    return logk.reshape(xa.shape)[()] if xa.ndim == 0 else logk


def bessel_k_ratio(nu: float, x):
    """``K_{nu+1}(x) / K_nu(x)``, evaluated without forming either factor."""
    xa = _check_args(nu, x)
    x1 = np.atleast_1d(xa)
    nu = float(nu)
    if nu >= 0.0:
        _, ratio = _log_k_and_ratio(nu, x1)
    elif nu <= -1.0:
        # K_{nu+1}/K_nu = K_{|nu|-1}/K_{|nu|}
        _, r = _log_k_and_ratio(-nu - 1.0, x1)
        ratio = 1.0 / r
    else:
        # -1 < nu < 0: orders |nu| and nu+1 both in [0, 1)
        la, _ = _log_k_and_ratio(-nu, x1)
        lb, _ = _log_k_and_ratio(nu + 1.0, x1)
        ratio = np.exp(lb - la)
    return ratio.reshape(xa.shape)[()] if xa.ndim == 0 else ratio


def log_bessel_k_and_ratio(nu: float, x) -> tuple[np.ndarray, np.ndarray]:
    """``(ln K_nu(x), K_{nu+1}(x)/K_nu(x))``, the pair the E-step needs per cell.

    For ``nu >= 0`` and ``nu = -1/2`` the base evaluations are shared.
    """
    nu = float(nu)
    if nu < -0.5:
        return log_bessel_k(nu, x), bessel_k_ratio(nu, x)
    xa = _check_args(nu, x)
    if nu == -0.5:
        logk, _ = _log_k_and_ratio(0.5, np.atleast_1d(xa))
        ratio = np.ones_like(logk)
    elif nu < 0:
        return log_bessel_k(nu, x), bessel_k_ratio(nu, x)
    else:
        logk, ratio = _log_k_and_ratio(nu, np.atleast_1d(xa))
    return logk.reshape(xa.shape), ratio.reshape(xa.shape)
