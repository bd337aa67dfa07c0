"""Grid search over the number of mixture components and hidden states."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .criteria import aic, bic, n_free_params
from .data import LongitudinalDataset
from .em import FitConfig, FitFailure, FitResult, fit
from .mal import QuantileSpec

__all__ = ["GridResult", "grid_search", "n_free_params", "bic", "aic", "read_grid_csv", "GRID_COLUMNS"]

GRID_COLUMNS = ("G", "M", "loglik", "n_params", "AIC", "BIC", "retained", "converged", "iterations")


@dataclass
class GridResult:
    entries: list[tuple[int, int, FitResult | None]]
    best_bic: tuple[int, int]
    best_aic: tuple[int, int]
    best_retained: bool = True

    def get(self, G: int, M: int) -> FitResult | None:
        for g, m, res in self.entries:
            if (g, m) == (G, M):
                return res
        raise KeyError((G, M))

    @property
    def best(self) -> FitResult:
        return self.get(*self.best_bic)

    def rows(self) -> list[dict]:
        out = []
        for G, M, res in self.entries:
            if res is None:
                out.append(dict(G=G, M=M, loglik=float("nan"), n_params=-1, AIC=float("nan"),
                                BIC=float("nan"), retained=False, converged=False, iterations=0))
            else:
                out.append(dict(G=G, M=M, loglik=res.loglik, n_params=res.n_free_params,
                                AIC=res.aic, BIC=res.bic, retained=res.retained,
                                converged=res.converged, iterations=res.iterations))
        return out

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(GRID_COLUMNS)
            for row in self.rows():
                wr.writerow([_fmt(row[c]) for c in GRID_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def read_grid_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append(dict(G=int(r["G"]), M=int(r["M"]), loglik=float(r["loglik"]),
                             n_params=int(r["n_params"]), AIC=float(r["AIC"]), BIC=float(r["BIC"]),
                             retained=r["retained"] == "true", converged=r["converged"] == "true",
                             iterations=int(r["iterations"])))
        return rows


def _argmin(entries, key: str) -> tuple[tuple[int, int], bool]:
    fitted = [(G, M, r) for G, M, r in entries if r is not None]
    kept = [e for e in fitted if e[2].retained]
    pool = kept or fitted
    # ties go to the more parsimonious cell: smaller M, then smaller G
    G, M, _ = min(pool, key=lambda e: (getattr(e[2], key), e[1], e[0]))
    return (G, M), bool(kept)


def grid_search(dataset: LongitudinalDataset, spec: QuantileSpec, G_range: Iterable[int],
                M_range: Iterable[int], config: FitConfig | None = None) -> GridResult:
    """Fit every (G, M) cell with the same configuration and pick the best by BIC and AIC.

    Cells are independent: each uses ``config.seed`` regardless of the rest of
    the grid.  Unretained fits are only chosen if no cell is retained.
    """
    config = config or FitConfig()
    G_range, M_range = list(G_range), list(M_range)
    if not G_range or not M_range:
        raise ValueError("G and M ranges must be non-empty")
    entries: list[tuple[int, int, FitResult | None]] = []
    for G in G_range:
        for M in M_range:
            try:
                entries.append((G, M, fit(dataset, spec, G, M, config)))
            except FitFailure:
                entries.append((G, M, None))
    if all(r is None for _, _, r in entries):
        raise FitFailure("every grid cell failed")
    best_bic, kept = _argmin(entries, "bic")
    best_aic, _ = _argmin(entries, "aic")
    return GridResult(entries=entries, best_bic=best_bic, best_aic=best_aic, best_retained=kept)
