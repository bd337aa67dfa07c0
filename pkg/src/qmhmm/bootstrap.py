"""Subject-level (block) bootstrap standard errors."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import LongitudinalDataset, QMHMMParams
from .em import FitConfig, FitFailure, FitResult, fit
from .mal import QuantileSpec

__all__ = ["BootstrapResult", "block_bootstrap", "align_labels", "resample_indices", "bootstrap_se"]


@dataclass
class BootstrapResult:
    point: QMHMMParams
    se: QMHMMParams
    H: int
    failed: int
    replicates: np.ndarray  # (H, n_params), label-aligned

    def z_values(self) -> np.ndarray:
        est, se = self.point.to_vector(), self.se.to_vector()
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(se > 0, est / np.where(se > 0, se, 1.0), np.nan)

    def to_csv(self, path: str | Path, names: list[str] | None = None) -> None:
        names = names or self.point.vector_names()
        est, se, z = self.point.to_vector(), self.se.to_vector(), self.z_values()
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["parameter", "estimate", "se", "z"])
            for row in zip(names, est, se, z):
                wr.writerow([row[0]] + [f"{v:.17g}" for v in row[1:]])


def resample_indices(N: int, seed: int, replicate: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), int(replicate)])
    return rng.integers(0, N, size=N)


def bootstrap_se(vectors: np.ndarray) -> np.ndarray:
    """Elementwise square root of the diagonal of the replicate covariance."""
    vectors = np.asarray(vectors, dtype=float)
    if vectors.shape[0] < 2:
        raise ValueError("need at least two replicates")
    return np.sqrt(np.sum((vectors - vectors.mean(axis=0)) ** 2, axis=0) / (vectors.shape[0] - 1))


def align_labels(rep: QMHMMParams, ref: QMHMMParams) -> QMHMMParams:
    """Relabel states and components of ``rep`` to best match ``ref``.

    States are matched on the state effects, components on the mixture
    locations weighted by the reference masses (least squares assignment).
    """
    out = rep.copy()
    M, G = ref.M, ref.G
    if M > 1 and ref.alpha.size:
        diff = ref.alpha.reshape(M, -1)[:, None, :] - rep.alpha.reshape(M, -1)[None, :, :]
        _, perm = linear_sum_assignment(np.sum(diff ** 2, axis=-1))
        out.alpha = rep.alpha[perm]
        out.q = rep.q[perm]
        out.Q = rep.Q[np.ix_(perm, perm)]
    if G > 1 and ref.b.size:
        diff = ref.b.reshape(G, -1)[:, None, :] - rep.b.reshape(G, -1)[None, :, :]
        cost = ref.pi[:, None] * np.sum(diff ** 2, axis=-1)
        _, perm = linear_sum_assignment(cost)
        out.b = rep.b[perm]
        out.pi = rep.pi[perm]
    return out


def block_bootstrap(dataset: LongitudinalDataset, spec: QuantileSpec, G: int, M: int, H: int,
                    config: FitConfig | None = None,
                    point: FitResult | QMHMMParams | None = None) -> BootstrapResult:
    """Resample whole subjects ``H`` times and refit, warm-started at the point estimate.

    Replicates that fail numerically or do not converge are dropped and
    counted in ``failed``.
    """
    if H < 2:
        raise ValueError("H must be >= 2")
    config = config or FitConfig()
    if point is None:
        point = fit(dataset, spec, G, M, config)
    ref = point.params if isinstance(point, FitResult) else point
    vectors = []
    failed = 0
    for h in range(H):
        sample = dataset.subset(resample_indices(dataset.N, config.seed, h))
        try:
            res = fit(sample, spec, G, M, config, init=ref)
        except (FitFailure, ValueError):
            failed += 1
            continue
        if not res.converged:
            failed += 1
            continue
        vectors.append(align_labels(res.params, ref).to_vector())
    if len(vectors) < 2:
        raise FitFailure(f"only {len(vectors)} of {H} bootstrap replicates succeeded")
    vectors = np.array(vectors)
    return BootstrapResult(point=ref, se=ref.from_vector(bootstrap_se(vectors)), H=len(vectors),
                           failed=failed, replicates=vectors)
