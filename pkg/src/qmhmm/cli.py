"""Command-line interface: ``qmhmm {fit,select,bootstrap,simulate,sample}``.

Options may also come from a flat ``key = value`` file given with
``--config``; keys are flag names without the leading dashes.  Flags given
on the command line win over the file.
"""

from __future__ import annotations

import argparse
import csv
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bootstrap import block_bootstrap
from .data import DataFormatError, LongitudinalDataset, read_long_csv
from .em import DEFAULT_M_SHIFT, FitConfig, FitFailure, FitResult, fit
from .mal import MALParams, QuantileSpec, mal_sample
from .selection import grid_search
from .simulation import ScenarioConfig, StudySettings, parse_preset, run_study, write_report_csv

log = logging.getLogger("qmhmm")

EXIT_OK, EXIT_ERROR, EXIT_UNRETAINED = 0, 1, 2


class UsageError(ValueError):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _int_range(text: str) -> tuple[int, ...]:
    """``2..8`` (inclusive) or ``2,3,5``."""
    text = str(text).strip()
    m = re.fullmatch(r"(\d+)\s*\.\.\s*(\d+)", text)
    try:
        vals = tuple(range(int(m[1]), int(m[2]) + 1)) if m else tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad range {text!r}; use e.g. 2..8 or 2,3,4") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"bad range {text!r}")
    return vals


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _flag(p: argparse.ArgumentParser, name: str, help: str) -> None:
    p.add_argument(name, type=_bool, nargs="?", const=True, default=False, help=help)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value options file")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=_floats, help="quantile levels, one per outcome, e.g. 0.5,0.5")
    p.add_argument("--verbose", "-v", action="store_true")


def _fitting(p: argparse.ArgumentParser) -> None:
    p.add_argument("--starts", type=int, default=50, help="random starts per fit")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--m-shift", type=float, default=DEFAULT_M_SHIFT,
                   help="offset added to the MAL quadratic form when fitting (0 = exact density)")


def _data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", help="long-format CSV, one row per (subject, occasion)")
    p.add_argument("--id-col", default="id")
    p.add_argument("--time-col", default="time")
    p.add_argument("--y-cols", type=_names, help="outcome columns (default: y1, y2, ...)")
    p.add_argument("--x-cols", type=_names, help="covariate columns (default: all others)")
    p.add_argument("--z-cols", type=_names, default=[], help="X columns with random slopes")
    p.add_argument("--w-cols", type=_names, default=[], help="X columns with state-specific effects")
    _flag(p, "--x-intercept", "add a common intercept to X")
    _flag(p, "--z-intercept", "random intercept")
    _flag(p, "--w-intercept", "state-specific intercept")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qmhmm", description="Quantile mixed hidden Markov models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one (G, M) model")
    _common(p), _data(p), _fitting(p)
    p.add_argument("--G", type=int, default=1)
    p.add_argument("--M", type=int, default=1)

    p = sub.add_parser("select", help="grid search over G and M")
    _common(p), _data(p), _fitting(p)
    p.add_argument("--G-range", type=_int_range, default=(1, 2, 3))
    p.add_argument("--M-range", type=_int_range, default=(1, 2, 3))

    p = sub.add_parser("bootstrap", help="block bootstrap standard errors")
    _common(p), _data(p), _fitting(p)
    p.add_argument("--G", type=int, default=1)
    p.add_argument("--M", type=int, default=1)
    p.add_argument("--H", type=int, default=100, help="bootstrap replicates")

    p = sub.add_parser("simulate", help="Monte Carlo study under the benchmark design")
    _common(p), _fitting(p)
    p.add_argument("--preset", help="e.g. appB-NN-r03-N100-T5")
    p.add_argument("--scenario", choices=("NN", "TT"), default="NN")
    p.add_argument("--rho", type=float, default=0.3)
    p.add_argument("--N", type=int, default=100)
    p.add_argument("--T", type=int, default=5)
    p.add_argument("--B", type=int, default=50)
    p.add_argument("--G", type=int, default=2)
    p.add_argument("--M", type=int, default=2)
    p.add_argument("--G-range", type=_int_range)
    p.add_argument("--M-range", type=_int_range)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("sample", help="draw from a multivariate asymmetric Laplace law")
    _common(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--mu", type=_floats, help="locations (default 0)")
    p.add_argument("--d", type=_floats, help="scales (default 1)")
    p.add_argument("--psi", type=_floats, help="correlation matrix, row-major (default identity)")
    return parser


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def parse_args(argv: list[str] | None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config_file(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {unknown}")
        # string defaults are passed through each option's type
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------


def _fit_config(args) -> FitConfig:
    return FitConfig(max_iter=args.max_iter, tol=args.tol, n_starts=args.starts, seed=args.seed,
                     m_shift=args.m_shift)


def _load(args) -> tuple[LongitudinalDataset, QuantileSpec]:
    if not args.input:
        raise UsageError("--input is required")
    path = Path(args.input)
    if not path.exists():
        raise UsageError(f"{path}: no such file")
    with path.open(newline="") as fh:
        header = next(csv.reader(fh), [])
    y_cols = args.y_cols or sorted((c for c in header if re.fullmatch(r"y\d+", c)), key=lambda c: int(c[1:]))
    if not y_cols:
        raise UsageError("no outcome columns: name them y1, y2, ... or pass --y-cols")
    if args.x_cols is not None:
        x_cols = args.x_cols
    else:
        skip = {args.id_col, args.time_col, *y_cols}
        x_cols = [c for c in header if c not in skip]
    ds = read_long_csv(path, args.id_col, args.time_col or None, y_cols, x_cols,
                       z_cols=args.z_cols, w_cols=args.w_cols, z_intercept=args.z_intercept,
                       w_intercept=args.w_intercept, x_intercept=args.x_intercept)
    if args.tau is None:
        raise UsageError("--tau is required")
    if len(args.tau) != ds.p:
        raise UsageError(f"--tau has {len(args.tau)} values for {ds.p} outcomes")
    return ds, QuantileSpec(args.tau)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _g(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def write_fit_summary(res: FitResult, path: Path) -> None:
    p = res.params.p
    corr = res.response_correlation
    pairs = [(j, k) for j in range(p) for k in range(j + 1, p)]
    head = ["G", "M", "N", "loglik", "iterations", "converged", "retained", "n_params", "AIC", "BIC"]
    head += [f"r_{j + 1}_{k + 1}" for j, k in pairs]
    row = [res.G, res.M, res.n_subjects, res.loglik, res.iterations, res.converged, res.retained,
           res.n_free_params, res.aic, res.bic] + [corr[j, k] for j, k in pairs]
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(head)
        wr.writerow([_g(v) for v in row])


def write_posteriors(res: FitResult, ds: LongitudinalDataset, path: Path) -> None:
    post = res.posteriors
    G, M = res.G, res.M
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "time", "state", "component"] + [f"u_{j + 1}" for j in range(M)]
                    + [f"w_{g + 1}" for g in range(G)])
        for i, s in enumerate(ds.subjects):
            w = post.w_hat[i]
            comp = int(np.argmax(w)) + 1
            for t in range(s.T):
                u = post.u_hat[i, t]
                wr.writerow([s.id, int(s.time[t]), int(np.argmax(u)) + 1, comp]
                            + [_g(v) for v in u] + [_g(v) for v in w])


def cmd_fit(args) -> int:
    ds, spec = _load(args)
    res = fit(ds, spec, args.G, args.M, _fit_config(args))
    out = _out_dir(args)
    res.params.to_json(out / "params.json")
    write_fit_summary(res, out / "fit_summary.csv")
    write_posteriors(res, ds, out / "posteriors.csv")
    if not res.converged:
        log.warning("EM stopped at max-iter=%d before reaching tol=%g", args.max_iter, args.tol)
    if not res.retained:
        log.warning("fit not retained: some mixture mass or initial probability <= %g",
                    FitConfig().retain_floor)
        return EXIT_UNRETAINED
    return EXIT_OK


def cmd_select(args) -> int:
    ds, spec = _load(args)
    grid = grid_search(ds, spec, args.G_range, args.M_range, _fit_config(args))
    out = _out_dir(args)
    grid.to_csv(out / "grid.csv")
    best = grid.best
    best.params.to_json(out / "params.json")
    log.info("BIC selects G=%d, M=%d; AIC selects G=%d, M=%d", *grid.best_bic, *grid.best_aic)
    return EXIT_OK if grid.best_retained else EXIT_UNRETAINED


def cmd_bootstrap(args) -> int:
    ds, spec = _load(args)
    config = _fit_config(args)
    point = fit(ds, spec, args.G, args.M, config)
    res = block_bootstrap(ds, spec, args.G, args.M, args.H, config, point=point)
    out = _out_dir(args)
    point.params.to_json(out / "params.json")
    names = point.params.vector_names(ds.x_names, ds.z_names(), ds.w_names())
    res.to_csv(out / "bootstrap.csv", names)
    log.info("%d replicates succeeded, %d failed", res.H, res.failed)
    return EXIT_OK if point.retained else EXIT_UNRETAINED


def cmd_simulate(args) -> int:
    if args.preset:
        cfg = parse_preset(args.preset, B=args.B, seed=args.seed)
    else:
        cfg = ScenarioConfig(scenario=args.scenario, rho=args.rho, N=args.N, T=args.T, B=args.B,
                             seed=args.seed)
    if args.tau is not None:
        if len(args.tau) != 2:
            raise UsageError("the benchmark design has two outcomes; --tau needs two values")
        cfg = replace(cfg, tau=tuple(args.tau))
    settings = StudySettings(G=args.G, M=args.M, G_range=args.G_range, M_range=args.M_range,
                             n_starts=args.starts, max_iter=args.max_iter, tol=args.tol,
                             m_shift=args.m_shift)
    report = run_study(cfg, settings, n_jobs=args.jobs)
    out = _out_dir(args)
    write_report_csv([report], out / "study.csv")
    if report.selection:
        with (out / "selection.csv").open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["criterion", "M", "count"])
            for crit, counts in report.selection.items():
                for m, c in counts.items():
                    wr.writerow([crit, m, c])
    log.info("%d replications fitted, %d failed", report.n_ok, report.failed)
    return EXIT_OK


def cmd_sample(args) -> int:
    tau = args.tau or [0.5]
    spec = QuantileSpec(tau)
    p = spec.p
    mu = np.asarray(args.mu if args.mu is not None else np.zeros(p), dtype=float)
    d = np.asarray(args.d if args.d is not None else np.ones(p), dtype=float)
    psi = np.asarray(args.psi, dtype=float).reshape(p, p) if args.psi is not None else np.eye(p)
    if mu.shape != (p,) or d.shape != (p,):
        raise UsageError(f"--mu and --d need {p} values (one per --tau entry)")
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    params = MALParams(mu, d, psi)
    draws = mal_sample(params, spec, args.n, seed=args.seed) if args.n else np.zeros((0, p))
    out = _out_dir(args)
    with (out / "draws.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([f"y{j + 1}" for j in range(p)])
        for row in np.atleast_2d(draws).reshape(-1, p):
            wr.writerow([_g(v) for v in row])
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "select": cmd_select, "bootstrap": cmd_bootstrap,
            "simulate": cmd_simulate, "sample": cmd_sample}


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"qmhmm: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except SystemExit as exc:  # argparse usage errors
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="qmhmm: %(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, DataFormatError, FitFailure, ValueError, np.linalg.LinAlgError, OSError) as exc:
        print(f"qmhmm: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
