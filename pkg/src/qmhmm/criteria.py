"""Free-parameter counting and penalized-likelihood criteria."""

from __future__ import annotations

import math

__all__ = ["n_free_params", "bic", "aic"]


def n_free_params(p: int, k: int, k_z: int, k_w: int, G: int, M: int) -> int:
    """Number of free parameters of a (G, M) model.

    Fixed effects, state effects, mixture locations, mixture masses, initial
    law, transition rows, scales and correlations, in that order.
    """
    if min(p, G, M) < 1 or min(k, k_z, k_w) < 0:
        raise ValueError("p, G, M must be >= 1 and k, k_z, k_w >= 0")
    return (k * p + M * k_w * p + G * k_z * p + (G - 1) + (M - 1) + M * (M - 1)
            + p + p * (p - 1) // 2)


def bic(loglik: float, n_params: int, n_subjects: int) -> float:
    return -2.0 * loglik + math.log(n_subjects) * n_params


def aic(loglik: float, n_params: int) -> float:
    return -2.0 * loglik + 2.0 * n_params
