"""Longitudinal panel container and the QMHMM parameter set.

Random-effect (``Z``) and state-effect (``W``) designs are stored as column
subsets of the fixed-effect design ``X``, each with an optional constant
column placed first.  Panels may be unbalanced; the EM works on a padded
``(N, T_max, ...)`` view with a validity mask.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .mal import QuantileSpec

__all__ = [
    "Subject",
    "LongitudinalDataset",
    "Panel",
    "QMHMMParams",
    "PosteriorSet",
    "location",
    "locations",
    "validate",
    "center",
    "read_long_csv",
    "write_long_csv",
    "DataFormatError",
]

PARAM_FIELDS = ("beta", "b", "pi", "alpha", "q", "Q", "d", "psi")


class DataFormatError(ValueError):
    """Malformed input table (carries row/column diagnostics in the message)."""


@dataclass(frozen=True)
class Subject:
    id: str
    y: np.ndarray
    x: np.ndarray
    time: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(y), -1)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        if self.time is None:
            object.__setattr__(self, "time", np.arange(1, len(y) + 1))
        else:
            object.__setattr__(self, "time", np.asarray(self.time))

    @property
    def T(self) -> int:
        return self.y.shape[0]


class Panel(NamedTuple):
    """Padded arrays; entries past each subject's last occasion are zero."""

    y: np.ndarray  # (N, T, p)
    x: np.ndarray  # (N, T, k)
    z: np.ndarray  # (N, T, k_z)
    w: np.ndarray  # (N, T, k_w)
    mask: np.ndarray  # (N, T) bool
    lengths: np.ndarray  # (N,)


class LongitudinalDataset:
    """``N`` subjects, each with ``T_i`` occasions of a ``p``-variate response.

    Parameters
    ----------
    subjects : sequence of Subject
    z_cols, w_cols : column indices of ``X`` entering the random-effect and
        state-effect designs.
    z_intercept, w_intercept : prepend a constant column to ``Z`` / ``W``.
    x_names, y_names : optional labels used in output tables.
    """

    def __init__(self, subjects: Sequence[Subject], z_cols: Iterable[int] = (),
                 z_intercept: bool = False, w_cols: Iterable[int] = (),
                 w_intercept: bool = False, x_names: Sequence[str] | None = None,
                 y_names: Sequence[str] | None = None):
        subjects = list(subjects)
        if not subjects:
            raise ValueError("dataset must contain at least one subject")
        p = subjects[0].y.shape[1]
        k = subjects[0].x.shape[1]
        for s in subjects:
            if s.T < 1:
                raise ValueError(f"subject {s.id!r} has no observations")
            if s.y.shape[1] != p or s.x.shape != (s.T, k):
                raise ValueError(f"subject {s.id!r}: dimensions inconsistent with first subject")
            if not (np.all(np.isfinite(s.y)) and np.all(np.isfinite(s.x))):
                raise ValueError(f"subject {s.id!r} has non-finite entries")
        self.subjects = subjects
        self.z_cols = tuple(int(c) for c in z_cols)
        self.w_cols = tuple(int(c) for c in w_cols)
        self.z_intercept = bool(z_intercept)
        self.w_intercept = bool(w_intercept)
        for c in self.z_cols + self.w_cols:
            if not 0 <= c < k:
                raise ValueError(f"design column {c} out of range for k = {k}")
        self.x_names = list(x_names) if x_names is not None else [f"x{j + 1}" for j in range(k)]
        self.y_names = list(y_names) if y_names is not None else [f"y{j + 1}" for j in range(p)]
        if self.z_intercept and self.x_intercept_col is None and not self.w_intercept:
            raise ValueError("a random intercept needs a constant column in X or W "
                             "to absorb the centering shift")

    # dimensions -----------------------------------------------------------
    @property
    def N(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> int:
        return self.subjects[0].y.shape[1]

    @property
    def k(self) -> int:
        return self.subjects[0].x.shape[1]

    @property
    def k_z(self) -> int:
        return len(self.z_cols) + self.z_intercept

    @property
    def k_w(self) -> int:
        return len(self.w_cols) + self.w_intercept

    @property
    def lengths(self) -> np.ndarray:
        return np.array([s.T for s in self.subjects])

    @property
    def n_obs(self) -> int:
        return int(self.lengths.sum())

    @cached_property
    def x_intercept_col(self) -> int | None:
        for j in range(self.k):
            if all(np.all(s.x[:, j] == 1.0) for s in self.subjects):
                return j
        return None

    def design_z(self, x: np.ndarray) -> np.ndarray:
        cols = [np.ones(x.shape[:-1] + (1,))] if self.z_intercept else []
        cols.append(x[..., list(self.z_cols)])
        return np.concatenate(cols, axis=-1)

    def design_w(self, x: np.ndarray) -> np.ndarray:
        cols = [np.ones(x.shape[:-1] + (1,))] if self.w_intercept else []
        cols.append(x[..., list(self.w_cols)])
        return np.concatenate(cols, axis=-1)

    def z_names(self) -> list[str]:
        return (["(intercept)"] if self.z_intercept else []) + [self.x_names[c] for c in self.z_cols]

    def w_names(self) -> list[str]:
        return (["(intercept)"] if self.w_intercept else []) + [self.x_names[c] for c in self.w_cols]

    @cached_property
    def panel(self) -> Panel:
        n, tmax = self.N, int(self.lengths.max())
        y = np.zeros((n, tmax, self.p))
        x = np.zeros((n, tmax, self.k))
        mask = np.zeros((n, tmax), dtype=bool)
        for i, s in enumerate(self.subjects):
            y[i, : s.T] = s.y
            x[i, : s.T] = s.x
            mask[i, : s.T] = True
        z = self.design_z(x) * mask[..., None]
        w = self.design_w(x) * mask[..., None]
        return Panel(y, x, z, w, mask, self.lengths)

    def subset(self, indices: Sequence[int]) -> "LongitudinalDataset":
        """New dataset made of whole subjects (repeats allowed)."""
        return LongitudinalDataset(
            [self.subjects[i] for i in indices], self.z_cols, self.z_intercept,
            self.w_cols, self.w_intercept, self.x_names, self.y_names)

    def design_kwargs(self) -> dict:
        return dict(z_cols=self.z_cols, z_intercept=self.z_intercept, w_cols=self.w_cols,
                    w_intercept=self.w_intercept, x_names=self.x_names, y_names=self.y_names)

    def __repr__(self) -> str:
        return (f"LongitudinalDataset(N={self.N}, n_obs={self.n_obs}, p={self.p}, k={self.k}, "
                f"k_z={self.k_z}, k_w={self.k_w})")


@dataclass
class QMHMMParams:
    """Full parameter set.

    Shapes: ``beta (k, p)``, ``b (G, k_z, p)``, ``pi (G,)``, ``alpha (M, k_w, p)``,
    ``q (M,)``, ``Q (M, M)``, ``d (p,)``, ``psi (p, p)``.
    """

    beta: np.ndarray
    b: np.ndarray
    pi: np.ndarray
    alpha: np.ndarray
    q: np.ndarray
    Q: np.ndarray
    d: np.ndarray
    psi: np.ndarray
    spec: QuantileSpec

    def __post_init__(self):
        for name in PARAM_FIELDS:
            setattr(self, name, np.array(getattr(self, name), dtype=float))

    @property
    def G(self) -> int:
        return self.pi.shape[0]

    @property
    def M(self) -> int:
        return self.q.shape[0]

    @property
    def p(self) -> int:
        return self.spec.p

    def copy(self) -> "QMHMMParams":
        return QMHMMParams(*(getattr(self, f).copy() for f in PARAM_FIELDS), spec=self.spec)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, f).ravel() for f in PARAM_FIELDS])

    def from_vector(self, vec: np.ndarray) -> "QMHMMParams":
        """Same-shaped parameter set filled from a flat vector."""
        out, pos = [], 0
        for f in PARAM_FIELDS:
            shape = getattr(self, f).shape
            size = int(np.prod(shape))
            out.append(np.asarray(vec[pos: pos + size], dtype=float).reshape(shape))
            pos += size
        if pos != len(vec):
            raise ValueError("vector length does not match parameter shapes")
        return QMHMMParams(*out, spec=self.spec)

    def vector_names(self, x_names=None, z_names=None, w_names=None) -> list[str]:
        k, kz, kw = self.beta.shape[0], self.b.shape[1], self.alpha.shape[1]
        x_names = x_names or [str(r + 1) for r in range(k)]
        z_names = z_names or [str(r + 1) for r in range(kz)]
        w_names = w_names or [str(r + 1) for r in range(kw)]
        p, G, M = self.p, self.G, self.M
        names = [f"beta[{x_names[r]},{c + 1}]" for r in range(k) for c in range(p)]
        names += [f"b[{g + 1},{z_names[r]},{c + 1}]" for g in range(G) for r in range(kz) for c in range(p)]
        names += [f"pi[{g + 1}]" for g in range(G)]
        names += [f"alpha[{j + 1},{w_names[r]},{c + 1}]" for j in range(M) for r in range(kw) for c in range(p)]
        names += [f"q[{j + 1}]" for j in range(M)]
        names += [f"Q[{j + 1},{h + 1}]" for j in range(M) for h in range(M)]
        names += [f"d[{c + 1}]" for c in range(p)]
        names += [f"psi[{a + 1},{c + 1}]" for a in range(p) for c in range(p)]
        return names

    def to_dict(self) -> dict:
        out = {f: getattr(self, f).tolist() for f in PARAM_FIELDS}
        out["tau"] = list(self.spec.tau)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "QMHMMParams":
        spec = QuantileSpec(data["tau"])
        p = spec.p
        G, M = len(data["pi"]), len(data["q"])
        return cls(beta=_shaped(data["beta"], (), p), b=_shaped(data["b"], (G,), p),
                   pi=data["pi"], alpha=_shaped(data["alpha"], (M,), p), q=data["q"],
                   Q=np.array(data["Q"], dtype=float).reshape(M, M), d=data["d"],
                   psi=np.array(data["psi"], dtype=float).reshape(p, p), spec=spec)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, path: str | Path) -> "QMHMMParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _shaped(value, lead: tuple, p: int) -> np.ndarray:
    a = np.array(value, dtype=float)
    if a.size == 0:
        return np.zeros(lead + (0, p))
    return a.reshape(lead + (-1, p))


def location(params: QMHMMParams, dataset: LongitudinalDataset, subject: int, t: int,
             g: int, j: int) -> np.ndarray:
    """``X_it beta + Z_it b_g + W_it alpha_j`` for one cell (0-based indices)."""
    if not 0 <= subject < dataset.N:
        raise IndexError(f"subject index {subject} out of range")
    s = dataset.subjects[subject]
    if not 0 <= t < s.T:
        raise IndexError(f"time index {t} out of range for subject with T = {s.T}")
    if not 0 <= g < params.G:
        raise IndexError(f"component index {g} out of range")
    if not 0 <= j < params.M:
        raise IndexError(f"state index {j} out of range")
    x = s.x[t]
    return x @ params.beta + dataset.design_z(x) @ params.b[g] + dataset.design_w(x) @ params.alpha[j]


def locations(params: QMHMMParams, panel: Panel) -> np.ndarray:
    """All cell locations, shape ``(N, T, M, G, p)``."""
    xb = panel.x @ params.beta
    zb = np.einsum("ntk,gkp->ntgp", panel.z, params.b)
    wa = np.einsum("ntk,jkp->ntjp", panel.w, params.alpha)
    return xb[:, :, None, None, :] + wa[:, :, :, None, :] + zb[:, :, None, :, :]


def center(params: QMHMMParams, dataset: LongitudinalDataset) -> QMHMMParams:
    """Shift mixture locations to zero mean, absorbing the shift elsewhere.

    Every fitted location is unchanged: the mean ``m = sum_g pi_g b_g`` leaves
    ``b`` and re-enters through the matching ``beta`` rows (or, for a random
    intercept without a constant in ``X``, through every state intercept).
    """
    out = params.copy()
    if out.b.shape[1] == 0:
        return out
    m = np.einsum("g,gkp->kp", out.pi, out.b)
    out.b -= m[None]
    row = 0
    if dataset.z_intercept:
        if dataset.x_intercept_col is not None:
            out.beta[dataset.x_intercept_col] += m[0]
        else:
            out.alpha[:, 0, :] += m[0]
        row = 1
    for c in dataset.z_cols:
        out.beta[c] += m[row]
        row += 1
    return out


def validate(params: QMHMMParams, tol: float = 1e-8) -> list[str]:
    """Return a list of violated invariants (empty when the set is valid)."""
    problems: list[str] = []
    try:
        p = params.spec.p
        for name in PARAM_FIELDS:
            a = np.asarray(getattr(params, name), dtype=float)
            if not np.all(np.isfinite(a)):
                problems.append(f"{name}: non-finite entries")
        pi, q, Q = (np.asarray(a, dtype=float) for a in (params.pi, params.q, params.Q))
        if np.any(pi < -tol) or abs(pi.sum() - 1.0) > tol:
            problems.append(f"pi: masses must be non-negative and sum to 1 (sum = {pi.sum():.12g})")
        if np.any(q < -tol) or abs(q.sum() - 1.0) > tol:
            problems.append(f"q: initial law must be non-negative and sum to 1 (sum = {q.sum():.12g})")
        if Q.shape != (q.size, q.size):
            problems.append(f"Q: shape {Q.shape} does not match {q.size} states")
        else:
            for r, row in enumerate(Q):
                if np.any(row < -tol) or abs(row.sum() - 1.0) > tol:
                    problems.append(f"Q row {r + 1}: must be non-negative and sum to 1 "
                                    f"(sum = {row.sum():.12g})")
        b = np.asarray(params.b, dtype=float)
        if b.ndim != 3 or b.shape[0] != pi.size:
            problems.append(f"b: shape {b.shape} does not match {pi.size} components")
        elif b.shape[1] > 0:
            m = np.einsum("g,gkp->kp", pi, b)
            if np.max(np.abs(m)) > tol:
                problems.append(f"b: centering violated, max |sum_g pi_g b_g| = {np.max(np.abs(m)):.3g}")
        d = np.asarray(params.d, dtype=float)
        if d.shape != (p,) or np.any(d <= 0):
            problems.append("d: scales must be a positive p-vector")
        psi = np.asarray(params.psi, dtype=float)
        if psi.shape != (p, p):
            problems.append(f"psi: shape {psi.shape}, expected ({p}, {p})")
        elif np.all(np.isfinite(psi)):
            if np.max(np.abs(psi - psi.T)) > tol:
                problems.append("psi: not symmetric")
            if np.max(np.abs(np.diag(psi) - 1.0)) > tol:
                problems.append("psi: diagonal is not 1")
            if np.min(np.linalg.eigvalsh(0.5 * (psi + psi.T))) <= 0:
                problems.append("psi: not positive definite")
        alpha = np.asarray(params.alpha, dtype=float)
        if alpha.ndim != 3 or alpha.shape[0] != q.size:
            problems.append(f"alpha: shape {alpha.shape} does not match {q.size} states")
    except Exception as exc:  # validate is total: report rather than raise
        problems.append(f"malformed parameters: {exc}")
    return problems


@dataclass
class PosteriorSet:
    """E-step output on the padded panel grid.

    ``v_hat[:, t]`` holds transitions from occasion ``t-1`` into ``t``;
    ``v_hat[:, 0]`` and every padded cell are zero.
    """

    w_hat: np.ndarray  # (N, G)
    z_hat: np.ndarray  # (N, T, M, G)
    u_hat: np.ndarray  # (N, T, M)
    v_hat: np.ndarray  # (N, T, M, M)
    gig_c: np.ndarray  # (N, T, M, G)
    gig_z: np.ndarray  # (N, T, M, G)
    mask: np.ndarray
    loglik: float = float("nan")
    subject_loglik: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def subject(self, i: int) -> dict:
        T = int(self.mask[i].sum())
        return dict(w_hat=self.w_hat[i], z_hat=self.z_hat[i, :T], u_hat=self.u_hat[i, :T],
                    v_hat=self.v_hat[i, 1:T], gig_c=self.gig_c[i, :T], gig_z=self.gig_z[i, :T])


def read_long_csv(path: str | Path, id_col: str, time_col: str | None, y_cols: Sequence[str],
                  x_cols: Sequence[str], z_cols: Sequence[str] = (), w_cols: Sequence[str] = (),
                  z_intercept: bool = False, w_intercept: bool = False,
                  x_intercept: bool = False) -> LongitudinalDataset:
    """Read a long-format table: one row per (subject, occasion).

    Rows are grouped by ``id_col`` in order of first appearance and sorted by
    ``time_col`` within subject.  ``z_cols`` and ``w_cols`` name columns of
    ``x_cols``.  ``x_intercept`` prepends a constant column to ``X``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [id_col] + ([time_col] if time_col else []) + list(y_cols) + list(x_cols)
        for name in needed:
            if name not in header:
                raise DataFormatError(f"{path}: missing column {name!r} (have {header})")
        for name in list(z_cols) + list(w_cols):
            if name not in x_cols:
                raise DataFormatError(f"design column {name!r} must be one of the X columns {list(x_cols)}")
        groups: dict[str, list] = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                t = int(row[time_col]) if time_col else None
                yv = [float(row[c]) for c in y_cols]
                xv = [float(row[c]) for c in x_cols]
            except (TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
            if not all(np.isfinite(yv + xv)):
                raise DataFormatError(f"{path}: line {lineno}: non-finite value")
            groups.setdefault(row[id_col], []).append((t, yv, xv))
    if not groups:
        raise DataFormatError(f"{path}: no data rows")
    subjects = []
    for sid, rows in groups.items():
        if time_col:
            rows.sort(key=lambda r: r[0])
        y = np.array([r[1] for r in rows])
        x = np.array([r[2] for r in rows]).reshape(len(rows), len(x_cols))
        times = np.array([r[0] for r in rows]) if time_col else None
        if x_intercept:
            x = np.hstack([np.ones((len(rows), 1)), x])
        subjects.append(Subject(sid, y, x, times))
    x_names = (["(intercept)"] if x_intercept else []) + list(x_cols)
    offset = 1 if x_intercept else 0
    return LongitudinalDataset(
        subjects,
        z_cols=[list(x_cols).index(c) + offset for c in z_cols], z_intercept=z_intercept,
        w_cols=[list(x_cols).index(c) + offset for c in w_cols], w_intercept=w_intercept,
        x_names=x_names, y_names=list(y_cols))


def write_long_csv(dataset: LongitudinalDataset, path: str | Path) -> None:
    x_names = dataset.x_names
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "time"] + dataset.y_names + x_names)
        for s in dataset.subjects:
            for t in range(s.T):
                wr.writerow([s.id, int(s.time[t])] + [f"{v:.17g}" for v in s.y[t]]
                            + [f"{v:.17g}" for v in s.x[t]])
