"""EM estimation for the quantile mixed hidden Markov model.

Forward/backward recursions run in the log domain over a padded panel:
occasions past a subject's last one carry a unit emission, so the recursions
need no per-subject branching (transition rows sum to one, so padding leaves
every likelihood unchanged).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .criteria import aic, bic, n_free_params
from .data import (
    LongitudinalDataset,
    Panel,
    PosteriorSet,
    QMHMMParams,
    center,
    locations,
)
from .mal import MALKernel, MALParams, QuantileSpec, check_loss, mal_correlation, mal_covariance

__all__ = [
    "DEFAULT_M_SHIFT",
    "FitConfig",
    "FitResult",
    "FitFailure",
    "forward",
    "backward",
    "e_step",
    "m_step",
    "observed_loglik",
    "initialize",
    "run_em",
    "fit",
    "nearest_correlation",
]

log = logging.getLogger(__name__)

STATE_MASS_FLOOR = 1e-8
# Offset added to the MAL quadratic form during fitting when p >= 2.  Without it
# the density is unbounded at its location and EM locks observations onto the
# fitted surface (zero residual, huge weight), which biases the estimates.
DEFAULT_M_SHIFT = 1e-3
GRAM_COND_LIMIT = 1e13


class FitFailure(RuntimeError):
    """Numerical breakdown of a single EM run (collapse, singular design)."""


@dataclass
class FitConfig:
    max_iter: int = 500
    tol: float = 1e-6
    n_starts: int = 50
    seed: int = 0
    retain_floor: float = 0.05
    # False holds D and Psi at their starting values (exact-EM ascent).
    update_scale: bool = True
    m_shift: float = DEFAULT_M_SHIFT

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")
        if not np.isfinite(self.m_shift) or self.m_shift < 0:
            raise ValueError("m_shift must be finite and non-negative")


@dataclass
class FitResult:
    params: QMHMMParams
    loglik: float
    loglik_trace: np.ndarray
    iterations: int
    converged: bool
    retained: bool
    n_free_params: int
    bic: float
    aic: float
    response_covariance: np.ndarray
    n_subjects: int
    start_index: int = 0
    n_failed_starts: int = 0
    posteriors: PosteriorSet | None = field(default=None, repr=False)

    @property
    def G(self) -> int:
        return self.params.G

    @property
    def M(self) -> int:
        return self.params.M

    @property
    def response_correlation(self) -> np.ndarray:
        s = self.response_covariance
        sd = np.sqrt(np.diag(s))
        return s / sd[:, None] / sd[None, :]


# ---------------------------------------------------------------------------
# log-domain helpers

def _log(a):
    with np.errstate(divide="ignore"):
        return np.log(a)


def _logsumexp(a: np.ndarray, axis) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _emissions(panel: Panel, params: QMHMMParams, kernel: MALKernel):
    """Log-densities and GIG moments for every (i, t, j, g) cell."""
    resid = panel.y[:, :, None, None, :] - locations(params, panel)
    logf, _, gig = kernel.logpdf_and_gig(resid)
    logf = np.where(panel.mask[:, :, None, None], logf, 0.0)
    if not np.all(np.isfinite(logf)):
        raise FitFailure("non-finite emission density")
    return logf, gig


def _forward(logf: np.ndarray, logq: np.ndarray, Q: np.ndarray) -> np.ndarray:
    n, T, M, G = logf.shape
    la = np.empty_like(logf)
    la[:, 0] = logq[None, :, None] + logf[:, 0]
    for t in range(1, T):
        prev = la[:, t - 1]
        top = np.max(prev, axis=1, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        s = np.einsum("nhg,hj->njg", np.exp(prev - top), Q)
        la[:, t] = _log(s) + top + logf[:, t]
    return la


def _backward(logf: np.ndarray, Q: np.ndarray) -> np.ndarray:
    n, T, M, G = logf.shape
    lb = np.zeros_like(logf)
    for t in range(T - 2, -1, -1):
        nxt = logf[:, t + 1] + lb[:, t + 1]
        top = np.max(nxt, axis=1, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        s = np.einsum("nkg,jk->njg", np.exp(nxt - top), Q)
        lb[:, t] = _log(s) + top
    return lb


def _kernel(params: QMHMMParams, m_shift: float) -> MALKernel:
    # a single outcome has a bounded density, so it is fitted exactly
    try:
        return MALKernel(params.d, params.psi, params.spec, m_shift if params.p > 1 else 0.0)
    except ValueError as exc:
        raise FitFailure(str(exc)) from exc


def forward(dataset: LongitudinalDataset, params: QMHMMParams, subject: int,
            m_shift: float = DEFAULT_M_SHIFT) -> np.ndarray:
    """Log forward variables ``ln a_it(j, g)`` for one subject, shape ``(M, G, T_i)``."""
    sub = dataset.subset([subject])
    logf, _ = _emissions(sub.panel, params, _kernel(params, m_shift))
    la = _forward(logf, _log(params.q), params.Q)[0]
    return np.moveaxis(la, 0, -1)


def backward(dataset: LongitudinalDataset, params: QMHMMParams, subject: int,
             m_shift: float = DEFAULT_M_SHIFT) -> np.ndarray:
    """Log backward variables ``ln b_it(j, g)`` for one subject, shape ``(M, G, T_i)``."""
    sub = dataset.subset([subject])
    logf, _ = _emissions(sub.panel, params, _kernel(params, m_shift))
    lb = _backward(logf, params.Q)[0]
    return np.moveaxis(lb, 0, -1)


def _e_step(panel: Panel, params: QMHMMParams, m_shift: float) -> PosteriorSet:
    kernel = _kernel(params, m_shift)
    logf, gig = _emissions(panel, params, kernel)
    logq, logpi = _log(params.q), _log(params.pi)
    la = _forward(logf, logq, params.Q)
    lb = _backward(logf, params.Q)
    mask = panel.mask
    n, T, M, G = logf.shape

    comp = _logsumexp(la[:, -1], axis=1) + logpi[None, :]  # (N, G)
    subj = _logsumexp(comp, axis=1)
    if not np.all(np.isfinite(subj)):
        raise FitFailure("zero likelihood for some subject")
    w_hat = np.exp(comp - subj[:, None])
    w_hat /= w_hat.sum(axis=1, keepdims=True)

    lz = la + lb + logpi[None, None, None, :]
    lz = lz - _logsumexp(lz.reshape(n, T, M * G), axis=2)[:, :, None, None]
    z_hat = np.exp(lz)
    z_hat /= z_hat.sum(axis=(2, 3), keepdims=True)
    z_hat *= mask[:, :, None, None]
    u_hat = z_hat.sum(axis=3)

    v_hat = np.zeros((n, T, M, M))
    if T > 1:
        # shift per (i, t, g) on both sides so the sum over g cannot underflow wholesale
        a = la[:, :-1]
        c = (logf + lb)[:, 1:]
        ma = np.max(a, axis=2, keepdims=True)
        mc = np.max(c, axis=2, keepdims=True)
        shift = ma + mc + logpi[None, None, None, :]
        shift = shift - np.max(shift, axis=3, keepdims=True)
        v = np.einsum("nthg,ntjg->nthj", np.exp(a - ma + shift), np.exp(c - mc)) * params.Q
        v /= v.sum(axis=(2, 3), keepdims=True)
        v_hat[:, 1:] = v * mask[:, 1:, None, None]

    return PosteriorSet(w_hat=w_hat, z_hat=z_hat, u_hat=u_hat, v_hat=v_hat,
                        gig_c=gig.c_hat, gig_z=gig.z_hat, mask=mask,
                        loglik=float(subj.sum()), subject_loglik=subj)


def e_step(dataset: LongitudinalDataset, params: QMHMMParams,
           m_shift: float = DEFAULT_M_SHIFT) -> PosteriorSet:
    """Posterior expectations of the latent indicators and mixing variables."""
    return _e_step(dataset.panel, params, m_shift)


def observed_loglik(dataset: LongitudinalDataset, params: QMHMMParams,
                    m_shift: float = DEFAULT_M_SHIFT) -> float:
    panel = dataset.panel
    logf, _ = _emissions(panel, params, _kernel(params, m_shift))
    la = _forward(logf, _log(params.q), params.Q)
    comp = _logsumexp(la[:, -1], axis=1) + _log(params.pi)[None, :]
    return float(_logsumexp(comp, axis=1).sum())


# ---------------------------------------------------------------------------
# M-step

def _solve(a: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    if a.shape[-1] == 0:
        return np.zeros(rhs.shape)
    if np.any(np.linalg.cond(a) > GRAM_COND_LIMIT):
        raise FitFailure(f"singular weighted Gram matrix in {what} update")
    return np.linalg.solve(a, rhs)


def nearest_correlation(sigma_hat: np.ndarray, lam: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Map a scale estimate onto a valid correlation matrix given fixed ``Lambda``."""
    psi = sigma_hat / lam[:, None] / lam[None, :]
    psi = 0.5 * (psi + psi.T)
    sd = np.sqrt(np.clip(np.diag(psi), 1e-300, None))
    psi = psi / sd[:, None] / sd[None, :]
    w, v = np.linalg.eigh(psi)
    if w.min() < floor:
        psi = (v * np.maximum(w, floor)) @ v.T
        sd = np.sqrt(np.diag(psi))
        psi = psi / sd[:, None] / sd[None, :]
    psi = 0.5 * (psi + psi.T)
    np.fill_diagonal(psi, 1.0)
    return psi


def _m_step(panel: Panel, post: PosteriorSet, prev: QMHMMParams, dataset: LongitudinalDataset,
            update_scale: bool = True) -> QMHMMParams:
    spec = prev.spec
    y, x, z, w, mask = panel.y, panel.x, panel.z, panel.w, panel.mask
    n = y.shape[0]
    n_obs = mask.sum()
    zz = post.z_hat
    om = zz * post.gig_z
    shift = spec.xi_tilde * prev.d  # row vector xi' D

    # chain and mixture laws
    q = post.u_hat[:, 0].sum(axis=0) / n
    trans = post.v_hat.sum(axis=(0, 1))
    rows = trans.sum(axis=1, keepdims=True)
    Q = np.where(rows > 0, trans / np.where(rows > 0, rows, 1.0), prev.Q)
    pi = post.w_hat.sum(axis=0) / n

    # fixed effects, using previous b and alpha
    zb_old = np.einsum("ntk,gkp->ntgp", z, prev.b)
    wa_old = np.einsum("ntk,jkp->ntjp", w, prev.alpha)
    om_tot = om.sum(axis=(2, 3))
    wy = (y * om_tot[..., None] - np.einsum("ntjg,ntgp->ntp", om, zb_old)
          - np.einsum("ntjg,ntjp->ntp", om, wa_old))
    xf = x.reshape(-1, x.shape[-1])
    gram = (xf * om_tot.reshape(-1, 1)).T @ xf
    xsum = np.einsum("nt,ntk->k", zz.sum(axis=(2, 3)), x)
    beta = _solve(gram, np.einsum("ntk,ntp->kp", x, wy) - np.outer(xsum, shift), "beta")
    xb = x @ beta

    # mixture locations, using new beta and previous alpha
    om_g = om.sum(axis=2)
    ytil = (y - xb)[:, :, None, :] - wa_old  # (N, T, M, p)
    gram_b = np.einsum("ntg,ntkl->gkl", om_g, z[..., :, None] * z[..., None, :], optimize=True)
    r_b = np.einsum("ntjg,ntjp->ntgp", om, ytil)
    zsum = np.einsum("ntg,ntk->gk", zz.sum(axis=2), z)
    b = _solve(gram_b, np.einsum("ntk,ntgp->gkp", z, r_b) - zsum[..., None] * shift, "b")
    zb = np.einsum("ntk,gkp->ntgp", z, b)

    # state effects, using new beta and new b
    om_j = om.sum(axis=3)
    ytil = (y - xb)[:, :, None, :] - zb  # (N, T, G, p)
    gram_a = np.einsum("ntj,ntkl->jkl", om_j, w[..., :, None] * w[..., None, :], optimize=True)
    r_a = np.einsum("ntjg,ntgp->ntjp", om, ytil)
    wsum = np.einsum("ntj,ntk->jk", zz.sum(axis=3), w)
    alpha = _solve(gram_a, np.einsum("ntk,ntjp->jkp", w, r_a) - wsum[..., None] * shift, "alpha")
    wa = np.einsum("ntk,jkp->ntjp", w, alpha)

    resid = (y - xb)[:, :, None, None, :] - wa[:, :, :, None, :] - zb[:, :, None, :, :]

    if update_scale:
        xi = spec.xi_tilde
        e = resid / prev.d
        ef = e.reshape(-1, spec.p)
        s1 = (ef * om.reshape(-1, 1)).T @ ef
        c_tot = float(np.sum(zz * post.gig_c))
        se = np.einsum("ntjg,ntjgp->p", zz, e)
        sigma_hat = (s1 + c_tot * np.outer(xi, xi) - np.outer(se, xi) - np.outer(xi, se)) / n_obs
        psi = nearest_correlation(sigma_hat, spec.lam) if spec.p > 1 else np.ones((1, 1))
        d = np.einsum("ntjg,ntjgp->p", zz, check_loss(resid, spec.tau_array)) / n_obs
        if np.any(~np.isfinite(d)) or np.any(d <= 0):
            raise FitFailure("degenerate scale estimate")
    else:
        psi, d = prev.psi.copy(), prev.d.copy()

    new = QMHMMParams(beta=beta, b=b, pi=pi, alpha=alpha, q=q, Q=Q, d=d, psi=psi, spec=spec)
    return center(new, dataset)


def m_step(dataset: LongitudinalDataset, posteriors: PosteriorSet, params_prev: QMHMMParams,
           update_scale: bool = True) -> QMHMMParams:
    """Closed-form parameter updates given E-step output.

    Order: chain/mixture laws, ``beta`` (previous ``b``, ``alpha``), ``b`` (new
    ``beta``), ``alpha`` (new ``beta``, ``b``), ``Psi`` via the scale estimate,
    ``D`` via the weighted check loss, then re-centering of ``b``.
    """
    return _m_step(dataset.panel, posteriors, params_prev, dataset, update_scale)


# ---------------------------------------------------------------------------
# starting values

def _chain_start(M: int) -> np.ndarray:
    if M == 1:
        return np.ones((1, 1))
    return 0.8 * np.eye(M) + (0.2 / (M - 1)) * (1.0 - np.eye(M))


def _pooled_start(dataset: LongitudinalDataset, spec: QuantileSpec, m_shift: float,
                  n_iter: int = 3) -> QMHMMParams:
    """Single-state, single-component fit used as the common base of every start."""
    panel = dataset.panel
    mask = panel.mask
    k, kz, kw, p = dataset.k, dataset.k_z, dataset.k_w, spec.p
    design = np.concatenate([panel.x, panel.w], axis=-1)[mask]
    coef, *_ = np.linalg.lstsq(design, panel.y[mask], rcond=None)
    resid = panel.y[mask] - design @ coef
    d = np.maximum(check_loss(resid, spec.tau_array).mean(axis=0), 1e-6)
    params = QMHMMParams(beta=coef[:k], b=np.zeros((1, kz, p)), pi=[1.0],
                         alpha=coef[k:][None], q=[1.0], Q=[[1.0]], d=d, psi=np.eye(p), spec=spec)
    for _ in range(n_iter):
        try:
            post = _e_step(panel, params, m_shift)
            params = _m_step(panel, post, params, dataset)
        except (FitFailure, np.linalg.LinAlgError):
            break
    return params


def initialize(dataset: LongitudinalDataset, spec: QuantileSpec, G: int, M: int,
               start_index: int, seed: int, pooled: QMHMMParams | None = None) -> QMHMMParams:
    """Deterministic starting values for one of the multiple starts.

    State intercepts come from bins of the pooled residuals along their leading
    principal axis (start 0: equal-mass bins, later starts: random bin masses),
    each shifted by the bin's per-outcome quantile.  Mixture locations are
    scaled normal draws, centered.
    """
    if G < 1 or M < 1:
        raise ValueError("G and M must be >= 1")
    if pooled is None:
        pooled = _pooled_start(dataset, spec, DEFAULT_M_SHIFT)
    rng = np.random.default_rng([int(seed), int(start_index)])
    panel = dataset.panel
    mask = panel.mask
    p, kz = spec.p, dataset.k_z
    tau = spec.tau_array

    base_alpha = pooled.alpha[0]
    resid = (panel.y - panel.x @ pooled.beta - panel.w @ base_alpha)[mask]
    alpha = np.repeat(base_alpha[None], M, axis=0)
    within = resid
    if M > 1:
        if dataset.w_intercept:
            centred = resid - resid.mean(axis=0)
            _, vecs = np.linalg.eigh(centred.T @ centred)
            axis = vecs[:, -1]
            axis = axis * np.sign(axis[np.argmax(np.abs(axis))])
            score = centred @ axis
            if start_index == 0:
                mass = np.full(M, 1.0 / M)
            else:
                mass = 0.05 + (1.0 - 0.05 * M) * rng.dirichlet(np.full(M, 2.0))
            cuts = np.quantile(score, np.cumsum(mass)[:-1])
            label = np.searchsorted(cuts, score)
            within = resid.copy()
            for j in range(M):
                sel = label == j
                if not np.any(sel):
                    continue
                offset = np.array([np.quantile(resid[sel, c], tau[c]) for c in range(p)])
                alpha[j, 0] += offset
                within[sel] -= offset
        else:
            spread = 0.1 * np.std(resid, axis=0) + 1e-3
            alpha = alpha + rng.standard_normal(alpha.shape) * spread

    b = np.zeros((G, kz, p))
    if G > 1 and kz > 0:
        zrms = np.sqrt(np.mean(panel.z[mask] ** 2, axis=0))
        zrms = np.where(zrms > 0, zrms, 1.0)
        scale = 0.5 * np.std(within, axis=0)
        b = rng.standard_normal((G, kz, p)) * scale[None, None, :] / zrms[None, :, None]
        b -= b.mean(axis=0, keepdims=True)

    d = np.maximum(check_loss(within, tau).mean(axis=0), 1e-6)
    return QMHMMParams(beta=pooled.beta.copy(), b=b, pi=np.full(G, 1.0 / G), alpha=alpha,
                       q=np.full(M, 1.0 / M), Q=_chain_start(M), d=d, psi=np.eye(p), spec=spec)


# ---------------------------------------------------------------------------
# driver

def _max_change(a: QMHMMParams, b: QMHMMParams) -> float:
    return float(np.max(np.abs(a.to_vector() - b.to_vector())))


def run_em(dataset: LongitudinalDataset, start: QMHMMParams, config: FitConfig):
    """Iterate E and M steps from ``start``.

    Returns ``(params, loglik, trace, iterations, converged, posteriors)``.
    The returned parameters are the highest-likelihood iterate visited, so the
    result never scores below the start even though the scale updates are not
    exact maximizers.
    """
    panel = dataset.panel
    M = start.M
    params = start
    post = _e_step(panel, params, config.m_shift)
    trace = [post.loglik]
    best = (post.loglik, params, post)
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        if M > 1:
            mass = post.u_hat.sum(axis=0)  # (T, M)
            if np.any(np.all(mass < STATE_MASS_FLOOR, axis=0)):
                raise FitFailure("hidden state collapsed")
        new = _m_step(panel, post, params, dataset, config.update_scale)
        change = _max_change(new, params)
        params = new
        post = _e_step(panel, params, config.m_shift)
        trace.append(post.loglik)
        if post.loglik > best[0]:
            best = (post.loglik, params, post)
        if change < config.tol:
            converged = True
            break
    loglik, params, post = best
    return params, loglik, np.array(trace), it, converged, post


def _is_retained(params: QMHMMParams, floor: float) -> bool:
    return bool(np.all(params.pi > floor) and np.all(params.q > floor))


def _result(dataset, params, loglik, trace, iterations, converged, post, config,
            start_index, n_failed) -> FitResult:
    nf = n_free_params(dataset.p, dataset.k, dataset.k_z, dataset.k_w, params.G, params.M)
    cov = mal_covariance(MALParams(np.zeros(dataset.p), params.d, params.psi), params.spec)
    return FitResult(params=params, loglik=loglik, loglik_trace=trace, iterations=iterations,
                     converged=converged, retained=_is_retained(params, config.retain_floor),
                     n_free_params=nf, bic=bic(loglik, nf, dataset.N), aic=aic(loglik, nf),
                     response_covariance=cov, n_subjects=dataset.N, start_index=start_index,
                     n_failed_starts=n_failed, posteriors=post)


_RECOVERABLE = (FitFailure, np.linalg.LinAlgError, FloatingPointError, ValueError)


def fit(dataset: LongitudinalDataset, spec: QuantileSpec, G: int, M: int,
        config: FitConfig | None = None, init: QMHMMParams | None = None) -> FitResult:
    """Multi-start EM fit of a (G, M) model.

    With ``init`` a single warm-started run is performed instead.  Among the
    runs, the best retained one (all masses above ``retain_floor``) wins; if
    none is retained the best run is returned with ``retained=False``.
    """
    config = config or FitConfig()
    if G < 1 or M < 1:
        raise ValueError("G and M must be >= 1")
    if G >= dataset.N:
        raise ValueError(f"G = {G} must be smaller than the number of subjects N = {dataset.N}")
    if spec.p != dataset.p:
        raise ValueError(f"{spec.p} quantile levels for {dataset.p} outcomes")
    runs = []
    failures = 0
    if init is not None:
        starts = [(0, init)]
    else:
        pooled = _pooled_start(dataset, spec, config.m_shift)
        starts = ((s, None) for s in range(config.n_starts))
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        for s, start in starts:
            try:
                if start is None:
                    start = initialize(dataset, spec, G, M, s, config.seed, pooled)
                runs.append((s, run_em(dataset, start, config)))
            except _RECOVERABLE as exc:
                failures += 1
                log.debug("start %d failed: %s", s, exc)
    if not runs:
        raise FitFailure(f"all {failures} starts failed for G={G}, M={M}")
    floor = config.retain_floor
    kept = [r for r in runs if _is_retained(r[1][0], floor)]
    pool = kept or runs
    s, best = max(pool, key=lambda r: (r[1][1], -r[0]))
    return _result(dataset, *best, config=config, start_index=s, n_failed=failures)


def response_correlation(params: QMHMMParams) -> np.ndarray:
    return mal_correlation(MALParams(np.zeros(params.p), params.d, params.psi), params.spec)
