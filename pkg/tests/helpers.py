"""Check routines shared by the unit tests and the acceptance suite."""

import numpy as np

from conftest import random_dataset, random_params
from oracles import enumerate_hmm, mal_log_density_direct
from qmhmm.em import DEFAULT_M_SHIFT, FitConfig, e_step, initialize, observed_loglik, run_em
from qmhmm.mal import QuantileSpec


def _rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)) if a.size else 0.0


def oracle_logf(ds, params, i, m_shift=DEFAULT_M_SHIFT):
    """Emission log-densities (T, M, G) for subject i, built without the package kernels."""
    s = ds.subjects[i]
    tau = params.spec.tau_array
    out = np.empty((s.T, params.M, params.G))
    for t in range(s.T):
        x = s.x[t]
        z = x[list(ds.z_cols)]
        w = np.concatenate([[1.0] if ds.w_intercept else [], x[list(ds.w_cols)]])
        for j in range(params.M):
            for g in range(params.G):
                mu = x @ params.beta + z @ params.b[g] + w @ params.alpha[j]
                out[t, j, g] = mal_log_density_direct(s.y[t], mu, params.d, params.psi, tau, m_shift)
    return out


def random_instance(seed, N_max=5, T_max=4, M_max=3, G_max=2, p=2):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(1, N_max + 1))
    M = int(rng.integers(1, M_max + 1))
    G = int(rng.integers(1, G_max + 1))
    tau = rng.choice([0.1, 0.25, 0.5, 0.75, 0.9], size=p)
    ds = random_dataset(rng, N=N, T_max=T_max, p=p)
    return ds, random_params(rng, ds, G, M, tau)


def enumeration_discrepancy(seed, m_shift=DEFAULT_M_SHIFT) -> float:
    """Max relative gap between E-step output and brute-force enumeration."""
    ds, params = random_instance(seed)
    post = e_step(ds, params, m_shift)
    worst = _rel(observed_loglik(ds, params, m_shift), 0.0 + post.loglik)
    total = 0.0
    for i, s in enumerate(ds.subjects):
        ll, w, z, v = enumerate_hmm(oracle_logf(ds, params, i, m_shift), np.log(params.q),
                                    np.log(params.Q), np.log(params.pi))
        total += ll
        sub = post.subject(i)
        worst = max(worst, _rel(post.subject_loglik[i], ll), _rel(sub["w_hat"], w),
                    _rel(sub["z_hat"], z), _rel(sub["u_hat"], z.sum(axis=2)),
                    _rel(sub["v_hat"], v))
    return max(worst, _rel(post.loglik, total))


def ascent_violation(seed, n_iter=50) -> float:
    """Largest drop of the log-likelihood (relative to |loglik|) with D and Psi frozen."""
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, N=int(rng.integers(8, 20)), T_max=5, p=2)
    G, M = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    tau = rng.choice([0.25, 0.5, 0.75], size=2)
    start = initialize(ds, QuantileSpec(tau), G, M, start_index=int(rng.integers(5)), seed=seed)
    config = FitConfig(max_iter=n_iter, tol=1e-300, update_scale=False)
    _, _, trace, _, _, _ = run_em(ds, start, config)
    drops = -np.diff(trace) / np.abs(trace[1:])
    return float(drops.max(initial=-np.inf))


def mal_moment_zscores(tau, d, psi, mu, n, seed):
    """Standardized gaps between sample moments and their closed forms.

    Returns a dict of arrays: ``mean`` (p,), ``cov`` (p, p) and ``below`` (p,),
    each entry a difference divided by its Monte Carlo standard error.
    """
    from qmhmm.mal import MALParams, mal_covariance, mal_sample

    spec = QuantileSpec(tau)
    params = MALParams(mu, d, psi)
    y = mal_sample(params, spec, n, seed=seed)
    n = y.shape[0]
    mean_true = np.asarray(mu) + np.asarray(d) * spec.xi_tilde
    cov_true = mal_covariance(params, spec)
    ybar = y.mean(axis=0)
    z_mean = (ybar - mean_true) / (y.std(axis=0, ddof=1) / np.sqrt(n))
    c = y - ybar
    prods = c[:, :, None] * c[:, None, :]
    z_cov = (prods.mean(axis=0) - cov_true) / (prods.std(axis=0, ddof=1) / np.sqrt(n))
    tau_arr = spec.tau_array
    frac = (y <= np.asarray(mu)).mean(axis=0)
    z_below = (frac - tau_arr) / np.sqrt(tau_arr * (1 - tau_arr) / n)
    return {"mean": z_mean, "cov": z_cov, "below": z_below}


def mixture_density_gap(n_points, seed):
    """Max relative gap between the closed-form log-density and mixture quadrature."""
    from oracles import mal_log_density_mixture
    from qmhmm.mal import MALParams, mal_log_density
    from conftest import random_corr

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_points):
        p = int(rng.integers(1, 4))
        tau = rng.uniform(0.05, 0.95, size=p)
        d = rng.uniform(0.3, 3.0, size=p)
        psi = random_corr(rng, p)
        mu = rng.normal(size=p)
        y = mu + rng.normal(size=p) * 2 * d
        ours = mal_log_density(y, MALParams(mu, d, psi), QuantileSpec(tau))
        ref = mal_log_density_mixture(y, mu, d, psi, tau)
        worst = max(worst, abs(ours - ref) / abs(ref))
    return worst
