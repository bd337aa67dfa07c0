"""Monte Carlo study harness for the two-outcome, two-state design.

Data: two covariates (standard normal and Bernoulli(1/2)), a random slope on
the first, a state-dependent intercept following a two-state chain, and either
Gaussian or Student-t(3) random effects and errors.
"""

from __future__ import annotations

import csv
import itertools
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import LongitudinalDataset, Subject
from .em import DEFAULT_M_SHIFT, FitConfig, FitFailure, FitResult, fit
from .mal import QuantileSpec

__all__ = [
    "TRUE_BETA",
    "TRUE_ALPHA",
    "TRUE_Q",
    "TRUE_q",
    "ScenarioConfig",
    "StudySettings",
    "StudyReport",
    "generate_dataset",
    "arb",
    "rmse",
    "align_states",
    "run_study",
    "parse_preset",
    "write_report_csv",
]

TRUE_BETA = np.array([[2.0, -0.8], [-1.4, 3.0]])
TRUE_ALPHA = np.array([[5.0, -2.0], [-5.0, 2.0]])
TRUE_Q = np.array([[0.8, 0.2], [0.2, 0.8]])
TRUE_q = np.array([0.7, 0.3])
PARAM_LABELS = ("beta11", "beta12", "beta21", "beta22", "alpha11", "alpha12", "alpha21", "alpha22")


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "NN"
    rho: float = 0.3
    N: int = 100
    T: int = 5
    B: int = 50
    tau: tuple[float, float] = (0.5, 0.5)
    seed: int = 0
    omega: tuple[tuple[float, float], tuple[float, float]] = ((1.0, 0.25), (0.25, 1.0))
    df: float = 3.0
    Q: tuple | None = None
    q: tuple | None = None

    def __post_init__(self):
        if self.scenario not in ("NN", "TT"):
            raise ValueError("scenario must be 'NN' or 'TT'")
        if min(self.N, self.T, self.B) < 1:
            raise ValueError("N, T and B must be >= 1")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (-1, 1)")
        object.__setattr__(self, "tau", tuple(float(t) for t in self.tau))

    @property
    def spec(self) -> QuantileSpec:
        return QuantileSpec(self.tau)

    @property
    def transition(self) -> np.ndarray:
        return TRUE_Q if self.Q is None else np.asarray(self.Q, dtype=float)

    @property
    def initial(self) -> np.ndarray:
        return TRUE_q if self.q is None else np.asarray(self.q, dtype=float)

    @property
    def error_scale(self) -> np.ndarray:
        return np.array([[1.0, self.rho], [self.rho, 1.0]])

    @property
    def label(self) -> str:
        return f"{self.scenario}-r{self.rho:g}-N{self.N}-T{self.T}-tau{self.tau[0]:g}-{self.tau[1]:g}"


def _draw(rng: np.random.Generator, scale: np.ndarray, size: tuple, heavy: bool, df: float) -> np.ndarray:
    chol = np.linalg.cholesky(scale)
    out = rng.standard_normal(size + (2,)) @ chol.T
    if heavy:
        out = out / np.sqrt(rng.chisquare(df, size=size) / df)[..., None]
    return out


def _error_quantile(cfg: ScenarioConfig) -> np.ndarray:
    """Marginal tau-quantiles of the raw error draw (subtracted so they become zero)."""
    from scipy import stats

    tau = np.asarray(cfg.tau)
    dist = stats.t(cfg.df) if cfg.scenario == "TT" else stats.norm()
    return dist.ppf(tau) * np.sqrt(np.diag(cfg.error_scale))


def simulate_chain(rng: np.random.Generator, q: np.ndarray, Q: np.ndarray, N: int, T: int) -> np.ndarray:
    states = np.empty((N, T), dtype=int)
    cq = np.cumsum(q)
    cQ = np.cumsum(Q, axis=1)
    u = rng.random((N, T))
    states[:, 0] = np.minimum(np.searchsorted(cq, u[:, 0], side="right"), len(q) - 1)
    for t in range(1, T):
        rows = cQ[states[:, t - 1]]
        states[:, t] = np.minimum((u[:, t, None] >= rows).sum(axis=1), len(q) - 1)
    return states


def generate_dataset(cfg: ScenarioConfig, replication: int) -> tuple[LongitudinalDataset, np.ndarray]:
    """One simulated panel and its hidden states ``(N, T)``, 0-based labels.

    Errors are shifted so each marginal ``tau_j``-quantile is zero, making the
    true state intercepts the conditional quantiles.
    """
    rng = np.random.default_rng([int(cfg.seed), int(replication)])
    N, T = cfg.N, cfg.T
    heavy = cfg.scenario == "TT"
    x1 = rng.standard_normal((N, T))
    x2 = rng.binomial(1, 0.5, size=(N, T)).astype(float)
    states = simulate_chain(rng, cfg.initial, cfg.transition, N, T)
    b = _draw(rng, np.asarray(cfg.omega, dtype=float), (N,), heavy, cfg.df)
    eps = _draw(rng, cfg.error_scale, (N, T), heavy, cfg.df) - _error_quantile(cfg)
    x = np.stack([x1, x2], axis=-1)
    y = (x @ TRUE_BETA + x1[..., None] * b[:, None, :] + TRUE_ALPHA[states] + eps)
    width = len(str(N))
    subjects = [Subject(f"s{i + 1:0{width}d}", y[i], x[i]) for i in range(N)]
    ds = LongitudinalDataset(subjects, z_cols=[0], w_intercept=True, x_names=["x1", "x2"],
                             y_names=["y1", "y2"])
    return ds, states


def arb(estimates, truth: float) -> float:
    """Average relative bias in percent."""
    if truth == 0:
        raise ValueError("relative bias is undefined for a zero true value")
    est = np.asarray(estimates, dtype=float)
    return float(np.mean((est - truth) / truth) * 100.0)


def rmse(estimates, truth: float) -> float:
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise ValueError("need at least one estimate")
    return float(np.sqrt(np.mean((est - truth) ** 2)))


def align_states(alpha_hat: np.ndarray, alpha_true: np.ndarray) -> tuple[int, ...]:
    """Permutation ``perm`` minimizing ``sum_j ||alpha_hat[perm[j]] - alpha_true[j]||^2``."""
    M = alpha_true.shape[0]
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(alpha_hat.shape[0]), M):
        cost = float(sum(np.sum((alpha_hat[perm[j]] - alpha_true[j]) ** 2) for j in range(M)))
        if cost < best_cost:
            best, best_cost = perm, cost
    return best


@dataclass(frozen=True)
class StudySettings:
    """How each replication is fitted.

    ``G`` fixed, or chosen by BIC over ``G_range`` when given.  ``M_range``
    turns on the selection study (grid over ``G_range x M_range``).
    """

    G: int = 2
    M: int = 2
    G_range: tuple[int, ...] | None = None
    M_range: tuple[int, ...] | None = None
    n_starts: int = 10
    max_iter: int = 500
    tol: float = 1e-6
    m_shift: float = DEFAULT_M_SHIFT

    def config(self, seed: int) -> FitConfig:
        return FitConfig(max_iter=self.max_iter, tol=self.tol, n_starts=self.n_starts, seed=seed,
                         m_shift=self.m_shift)


@dataclass
class StudyReport:
    scenario: ScenarioConfig
    estimates: dict[str, list[float]] = field(default_factory=dict)
    truth: dict[str, float] = field(default_factory=dict)
    failed: int = 0
    selected_G: list[int] = field(default_factory=list)
    selection: dict[str, dict[int, int]] = field(default_factory=dict)

    @property
    def arb(self) -> dict[str, float]:
        return {k: arb(v, self.truth[k]) for k, v in self.estimates.items() if v}

    @property
    def rmse(self) -> dict[str, float]:
        return {k: rmse(v, self.truth[k]) for k, v in self.estimates.items() if v}

    @property
    def n_ok(self) -> int:
        return len(next(iter(self.estimates.values()), []))


def _best_retained(results: list[FitResult], key: str) -> FitResult | None:
    kept = [r for r in results if r.retained] or results
    if not kept:
        return None
    return min(kept, key=lambda r: (getattr(r, key), r.M, r.G))


def _one_replication(cfg: ScenarioConfig, settings: StudySettings, rep: int) -> dict:
    ds, _ = generate_dataset(cfg, rep)
    spec = cfg.spec
    seed = int(np.random.SeedSequence([cfg.seed, rep, 1]).generate_state(1)[0])
    config = settings.config(seed)
    G_vals = settings.G_range or (settings.G,)
    M_vals = settings.M_range or (settings.M,)
    results = []
    for M in M_vals:
        for G in G_vals:
            try:
                results.append(fit(ds, spec, G, M, config))
            except FitFailure:
                continue
    if not results:
        return {"failed": True}
    out: dict = {"failed": False}
    if settings.M_range:
        out["M_bic"] = _best_retained(results, "bic").M
        out["M_aic"] = _best_retained(results, "aic").M
    at_m = [r for r in results if r.M == TRUE_ALPHA.shape[0]]
    best = _best_retained(at_m, "bic") if at_m else None
    if best is not None:
        perm = align_states(best.params.alpha[:, 0, :], TRUE_ALPHA)
        out["beta"] = best.params.beta.copy()
        out["alpha"] = best.params.alpha[list(perm), 0, :].copy()
        out["G"] = best.G
    return out


def run_study(cfg: ScenarioConfig, settings: StudySettings | None = None,
              n_jobs: int = 1) -> StudyReport:
    """Replicate, fit, align and summarize.  Deterministic given ``cfg.seed``."""
    settings = settings or StudySettings()
    reps = range(cfg.B)
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(n_jobs) as pool:
            outs = list(pool.map(_one_replication, [cfg] * cfg.B, [settings] * cfg.B, reps))
    else:
        outs = [_one_replication(cfg, settings, r) for r in reps]

    report = StudyReport(scenario=cfg)
    truth = np.concatenate([TRUE_BETA.ravel(), TRUE_ALPHA.ravel()])
    report.truth = dict(zip(PARAM_LABELS, truth.tolist()))
    report.estimates = {k: [] for k in PARAM_LABELS}
    if settings.M_range:
        report.selection = {c: {m: 0 for m in settings.M_range} for c in ("AIC", "BIC")}
    for out in outs:
        if out["failed"]:
            report.failed += 1
            continue
        if settings.M_range:
            report.selection["BIC"][out["M_bic"]] += 1
            report.selection["AIC"][out["M_aic"]] += 1
        if "beta" in out:
            vals = np.concatenate([out["beta"].ravel(), out["alpha"].ravel()])
            for k, v in zip(PARAM_LABELS, vals):
                report.estimates[k].append(float(v))
            report.selected_G.append(out["G"])
    return report


_PRESET = re.compile(r"^appB-(NN|TT)-r(\d+)-N(\d+)-T(\d+)$")


def parse_preset(name: str, **overrides) -> ScenarioConfig:
    """``appB-NN-r03-N100-T5`` style names; ``r03`` means rho = 0.3."""
    m = _PRESET.match(name)
    if not m:
        raise ValueError(f"unknown preset {name!r}; expected e.g. appB-NN-r03-N100-T5")
    scenario, r, n, t = m.groups()
    rho = float("0." + r.lstrip("0")) if r.startswith("0") else float(r) / 10 ** len(r)
    cfg = ScenarioConfig(scenario=scenario, rho=rho, N=int(n), T=int(t))
    return replace(cfg, **overrides) if overrides else cfg


def write_report_csv(reports: Sequence[StudyReport], path: str | Path) -> None:
    """One row per parameter, one ARB/RMSE column pair per (scenario, tau) panel."""
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        head = ["parameter"]
        for rep in reports:
            head += [f"{rep.scenario.label}:ARB", f"{rep.scenario.label}:RMSE"]
        wr.writerow(head)
        for k in PARAM_LABELS:
            row = [k]
            for rep in reports:
                a, r = rep.arb.get(k, float("nan")), rep.rmse.get(k, float("nan"))
                row += [f"{a:.17g}", f"{r:.17g}"]
            wr.writerow(row)
