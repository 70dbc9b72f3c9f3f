"""Elastic-net sparse coding over a fixed dictionary, solved by ADMM.

Objective, with ``n`` the number of observed samples (``L`` for a full fit)::

    F(a) = 1/(2n) ||x - D a||^2 + lam * ((1 - alpha)/2 ||a||^2 + alpha ||a||_1)

The ADMM quadratic step ``(D'D/n + s I) a = q`` is solved through the
eigendecomposition ``D D' = Q diag(ev) Q'`` (Woodbury), so one factorization
serves every ``lam``, ``alpha`` and ``rho``. Internally the solver works on
``G = Q' D`` and the rotated signal ``Q' x``, and handles a batch of signals
(columns) with per-column ``lam`` at once.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .gabor import Dictionary, GaborDictionary

log = logging.getLogger(__name__)

# lambda_max surrogate for the ridge end of the path
RIDGE_PATH_ALPHA = 1e-3
# "cv": held-out MSE over interleaved folds; "min_mse": in-sample MSE on the full signal
SELECTION_RULES = ("cv", "min_mse")


@dataclass(frozen=True)
class ElasticNetConfig:
    alpha: float = 1.0
    lambda_count: int = 100
    lambda_min_ratio: float = 1e-4
    rho: float = 1.0
    rho_mode: str = "relative"
    tol: float = 1e-4
    max_iter: int = 500
    cv_folds: int = 5
    nonzero_threshold: float = 1e-6
    selection: str = "cv"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha={self.alpha} outside [0, 1]")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.rho_mode not in ("relative", "absolute"):
            raise ValueError("rho_mode must be 'relative' or 'absolute'")
        if self.selection not in SELECTION_RULES:
            raise ValueError(f"selection must be one of {SELECTION_RULES}")
        if not 0.0 < self.lambda_min_ratio < 1.0:
            raise ValueError("lambda_min_ratio must lie in (0, 1)")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.lambda_count < 1 or self.max_iter < 1:
            raise ValueError("lambda_count and max_iter must be >= 1")


@dataclass
class FitResult:
    coeffs: np.ndarray
    lambda_selected: float
    alpha: float
    n_nonzero: int
    residual_energy: float
    coeff_energy: float
    iterations: int
    converged: bool
    cv_mse_curve: list = field(default_factory=list)

    def to_json(self) -> str:
        a = np.asarray(self.coeffs, dtype=np.float64)
        nz = np.flatnonzero(a)
        doc = {
            "alpha": float(self.alpha),
            "lambda_selected": float(self.lambda_selected),
            "n_nonzero": int(self.n_nonzero),
            "residual_energy": float(self.residual_energy),
            "coeff_energy": float(self.coeff_energy),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "cv_mse_curve": [[float(l), float(m)] for l, m in self.cv_mse_curve],
            "length": int(a.size),
        }
        if nz.size < 0.1 * a.size:
            doc["encoding"] = "sparse"
            doc["indices"] = nz.tolist()
            doc["values"] = a[nz].tolist()
        else:
            doc["encoding"] = "dense"
            doc["values"] = a.tolist()
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        doc = json.loads(text)
        if doc["encoding"] == "sparse":
            a = np.zeros(doc["length"])
            a[np.asarray(doc["indices"], dtype=np.int64)] = doc["values"]
        else:
            a = np.asarray(doc["values"], dtype=np.float64)
        return cls(a, doc["lambda_selected"], doc["alpha"], doc["n_nonzero"], doc["residual_energy"],
                   doc["coeff_energy"], doc["iterations"], doc["converged"],
                   [tuple(p) for p in doc["cv_mse_curve"]])


def objective(D: Dictionary, x, a, lam: float, alpha: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    r = x - D.apply(a)
    return (0.5 * r @ r / x.size
            + lam * (0.5 * (1 - alpha) * (a @ a) + alpha * np.abs(a).sum()))


def soft_threshold(v, kappa):
    return np.sign(v) * np.maximum(np.abs(v) - kappa, 0.0)


def count_nonzero(a, threshold: float) -> int:
    a = np.abs(np.asarray(a))
    top = a.max(initial=0.0)
    if top == 0:
        return 0
    return int(np.count_nonzero(a > threshold * top))


# ------------------------------------------------------------------- factors

@dataclass
class _Factor:
    G: np.ndarray       # Q' D[rows]
    evals: np.ndarray
    Q: np.ndarray
    rows: Optional[np.ndarray]

    @property
    def n_obs(self) -> int:
        return self.Q.shape[0]


def _factor(D: Dictionary, folds: int = 0, fold: int = 0) -> _Factor:
    """Eigen-factor of all rows (``folds == 0``) or of the rows held in by a fold."""
    key = ("factor", folds, fold)
    fac = D.cache.get(key)
    if fac is not None:
        return fac
    Dm = D.dense()
    if folds == 0:
        evals, Q = D.rowspace_eigen()
        rows = None
        G = Q.T @ Dm
    else:
        rows = np.flatnonzero(np.arange(D.L) % folds != fold)
        sub = Dm[rows]
        evals, Q = np.linalg.eigh(sub @ sub.T)
        G = Q.T @ sub
    fac = _Factor(G, evals, Q, rows)
    D.cache[key] = fac
    return fac


def _pinv_weights(evals, shift):
    """``1 / (shift + ev)`` with the zero-shift rank-deficient limit handled."""
    denom = shift + evals
    cut = 1e-12 * max(evals.max(initial=0.0), 1e-300)
    safe = np.where(denom > cut, denom, 1.0)
    return np.where(denom > cut, 1.0 / safe, 0.0)


@dataclass
class _State:
    z: np.ndarray
    u: np.ndarray
    a: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray


def _penalty(fac: _Factor, lam, rho, mode):
    """Per-column ADMM penalty; relative mode scales with ``lam`` (curvature at ``lam = 0``)."""
    if mode == "absolute":
        return np.full_like(lam, rho)
    curvature = max(fac.evals.mean(), 1e-12) / fac.n_obs
    return rho * np.where(lam > 0, lam, curvature)


def _admm(fac: _Factor, y, lam, alpha, rho, tol, max_iter, z0=None, u0=None, trace=None,
          rho_mode="relative") -> _State:
    """Batched ADMM on ``fac`` for rotated signals ``y`` (r x B), per-column ``lam``.

    Columns stop independently once ``||z_k - z_{k-1}|| / ||z_{k-1}|| < tol``
    with ``z_k`` nonzero (a zero ``z`` below lambda_max is never optimal).
    """
    n = fac.n_obs
    G, ev = fac.G, fac.evals
    M = G.shape[1]
    B = y.shape[1]
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (B,)).copy()
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(lam))):
        raise FloatingPointError("non-finite input to the elastic-net solver")
    c = G.T @ y / n
    rho = _penalty(fac, lam, rho, rho_mode)
    kappa = lam * alpha / rho
    s = lam * (1.0 - alpha) + rho
    W = 1.0 / (n * s[None, :] + ev[:, None])

    z = np.zeros((M, B)) if z0 is None else np.array(z0, dtype=np.float64).reshape(M, B)
    u = np.zeros((M, B)) if u0 is None else np.array(u0, dtype=np.float64).reshape(M, B)
    a = z.copy()
    iters = np.zeros(B, dtype=np.int64)

    cmax = np.abs(c).max(axis=0)
    at_zero = cmax <= lam * alpha
    z[:, at_zero] = 0.0
    a[:, at_zero] = 0.0
    u[:, at_zero] = c[:, at_zero] / rho[at_zero]
    converged = at_zero.copy()
    active = ~at_zero

    for k in range(1, max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        zi, ui = z[:, idx], u[:, idx]
        q = c[:, idx] + rho[idx] * (zi - ui)
        t = (G @ q) * W[:, idx]
        ai = (q - G.T @ t) / s[idx]
        v = ai + ui
        zn = soft_threshold(v, kappa[idx])
        u[:, idx] = v - zn
        z[:, idx] = zn
        a[:, idx] = ai
        iters[idx] = k
        znorm = np.linalg.norm(zn, axis=0)
        dz = np.linalg.norm(zn - zi, axis=0) / np.maximum(np.linalg.norm(zi, axis=0), 1e-12)
        done = (dz < tol) & (znorm > 0)
        if trace is not None and k % 10 == 0:
            trace.append((k, zn.copy()))
        if done.any():
            converged[idx[done]] = True
            active[idx[done]] = False
    return _State(z, u, a, iters, converged)


def _rotate(fac: _Factor, X):
    X = np.asarray(X, dtype=np.float64)
    if fac.rows is not None:
        X = X[fac.rows]
    return fac.Q.T @ X


def _residual_energy(fac: _Factor, X, Z):
    """``||x - D z||^2`` per column using the full-row factor."""
    R = X - fac.Q @ (fac.G @ Z)
    return np.einsum("ij,ij->j", R, R)


def _check_signal(D: Dictionary, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != D.L:
        raise ValueError(f"signal length {x.shape[0]} != L={D.L}")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("signal contains non-finite values")
    return x


# --------------------------------------------------------------- public ops

def lambda_max(D: Dictionary, x, alpha: float) -> float:
    """Smallest ``lam`` at which the zero vector is optimal."""
    if alpha <= 0:
        raise ValueError("lambda_max is undefined for alpha = 0")
    x = _check_signal(D, x)
    return float(np.abs(D.apply_adjoint(x)).max() / (D.L * alpha))


def lambda_path(lmax: float, count: int, min_ratio: float) -> np.ndarray:
    """Geometric sequence from ``lmax`` down to ``lmax * min_ratio``."""
    if not lmax > 0 or count < 1:
        raise ValueError("need lmax > 0 and count >= 1")
    if count == 1:
        return np.array([float(lmax)])
    return lmax * min_ratio ** (np.arange(count) / (count - 1))


def _as_result(D, fac, x, z, lam, alpha, cfg, iters, conv, curve=()) -> FitResult:
    return FitResult(
        coeffs=z,
        lambda_selected=float(lam),
        alpha=float(alpha),
        n_nonzero=count_nonzero(z, cfg.nonzero_threshold),
        residual_energy=float(_residual_energy(fac, x[:, None], z[:, None])[0]),
        coeff_energy=float(z @ z),
        iterations=int(iters),
        converged=bool(conv),
        cv_mse_curve=list(curve),
    )


def admm_solve(D: Dictionary, x, alpha: float, lam: float, cfg: ElasticNetConfig = ElasticNetConfig(),
               warm_start=None) -> FitResult:
    """Single ADMM solve at a fixed ``lam``; returns the (exactly sparse) ``z`` iterate."""
    x = _check_signal(D, x)
    if lam < 0 or not np.isfinite(lam):
        raise ValueError("lambda must be a finite nonnegative number")
    fac = _factor(D)
    st = _admm(fac, _rotate(fac, x[:, None]), lam, alpha, cfg.rho, cfg.tol, cfg.max_iter,
               z0=None if warm_start is None else np.asarray(warm_start)[:, None],
               rho_mode=cfg.rho_mode)
    return _as_result(D, fac, x, st.z[:, 0], lam, alpha, cfg, st.iterations[0], st.converged[0])


def ridge_closed_form(D: Dictionary, x, lam: float) -> np.ndarray:
    """Exact ``alpha = 0`` minimizer ``(D'D/L + lam I)^-1 D'x/L``.

    ``lam = 0`` gives the minimum-norm least-squares solution.
    """
    x = _check_signal(D, x)
    fac = _factor(D)
    return _ridge(fac, _rotate(fac, x[:, None]), np.array([lam]))[:, 0]


def _ridge(fac: _Factor, y, lam):
    n = fac.n_obs
    W = np.column_stack([_pinv_weights(fac.evals, n * l) for l in np.atleast_1d(lam)])
    return fac.G.T @ (y * W)


def _paths(D, X, alpha, cfg):
    """Per-column lambda paths (count x B); all-zero for columns with lmax = 0."""
    A = np.abs(D.apply_adjoint(X)).max(axis=0) / (D.L * (alpha if alpha > 0 else RIDGE_PATH_ALPHA))
    base = lambda_path(1.0, cfg.lambda_count, cfg.lambda_min_ratio)
    return base[:, None] * A[None, :]


def _cv_curves(D: Dictionary, X, alpha: float, paths, cfg: ElasticNetConfig):
    """Mean held-out MSE (count x B) over interleaved folds, warm-started along the path."""
    folds = cfg.cv_folds
    if folds < 2 or D.L < folds:
        raise ValueError(f"need 2 <= cv_folds <= L (got {folds}, L={D.L})")
    Dm = D.dense()
    count, B = paths.shape
    mse = np.zeros((count, B))
    for k in range(folds):
        out_rows = np.flatnonzero(np.arange(D.L) % folds == k)
        if out_rows.size == 0:
            raise ValueError("cross-validation fold has no rows")
        fac = _factor(D, folds, k)
        y = _rotate(fac, X)
        X_out, D_out = X[out_rows], Dm[out_rows]
        if alpha == 0:
            for i in range(count):
                Z = _ridge_cols(fac, y, paths[i])
                mse[i] += np.mean((X_out - D_out @ Z) ** 2, axis=0)
            continue
        z = u = None
        prev = None
        for i in range(count):
            lam = paths[i]
            if u is not None and cfg.rho_mode == "absolute":
                # scaled dual tracks lam * subgradient / rho
                ratio = np.divide(lam, prev, out=np.ones_like(lam), where=prev > 0)
                u = u * ratio[None, :]
            st = _admm(fac, y, lam, alpha, cfg.rho, cfg.tol, cfg.max_iter, z0=z, u0=u,
                       rho_mode=cfg.rho_mode)
            z, u, prev = st.z, st.u, lam
            mse[i] += np.mean((X_out - D_out @ z) ** 2, axis=0)
    return mse / folds


def _ridge_cols(fac, y, lam):
    n = fac.n_obs
    W = _pinv_weights(fac.evals[:, None], n * lam[None, :])
    return fac.G.T @ (y * W)


def cv_select_lambda(D: Dictionary, x, alpha: float, cfg: ElasticNetConfig = ElasticNetConfig(),
                     lambdas: Optional[Sequence[float]] = None):
    """Cross-validated lambda: minimum mean held-out MSE, ties to the larger lambda.

    Returns ``(lambda, [(lambda_i, mse_i), ...])`` with the path descending.
    """
    x = _check_signal(D, x)
    if lambdas is None:
        path = _paths(D, x[:, None], alpha, cfg)
    else:
        path = np.sort(np.asarray(lambdas, dtype=np.float64))[::-1][:, None]
    if len(path) == 1:
        return float(path[0, 0]), [(float(path[0, 0]), float("nan"))]
    mse = _cv_curves(D, x[:, None], alpha, path, cfg)[:, 0]
    best = int(np.argmin(mse))
    return float(path[best, 0]), [(float(l), float(m)) for l, m in zip(path[:, 0], mse)]


def _insample_path(fac: _Factor, X, alpha: float, paths, cfg: ElasticNetConfig):
    """Warm-started full-signal path; returns (mse, best Z, iterations, converged).

    The best column is the first minimum of the in-sample MSE, i.e. ties go
    to the larger lambda.
    """
    count, B = paths.shape
    y = _rotate(fac, X)
    mse = np.zeros((count, B))
    best = np.full(B, np.inf)
    Z = np.zeros((fac.G.shape[1], B))
    iters = np.zeros(B, dtype=np.int64)
    conv = np.ones(B, dtype=bool)
    z = u = None
    for i in range(count):
        lam = paths[i]
        if alpha == 0:
            z = _ridge_cols(fac, y, lam)
            it, ok = np.zeros(B, dtype=np.int64), np.ones(B, dtype=bool)
        else:
            st = _admm(fac, y, lam, alpha, cfg.rho, cfg.tol, cfg.max_iter, z0=z, u0=u,
                       rho_mode=cfg.rho_mode)
            z, u, it, ok = st.z, st.u, st.iterations, st.converged
        mse[i] = _residual_energy(fac, X, z) / X.shape[0]
        better = mse[i] < best
        best[better] = mse[i, better]
        Z[:, better] = z[:, better]
        iters[better] = it[better]
        conv[better] = ok[better]
    return mse, Z, iters, conv


def fit_many(D: Dictionary, X, alpha: float, cfg: ElasticNetConfig = ElasticNetConfig()) -> list[FitResult]:
    """Elastic-net fits of every column of ``X`` (L x B), lambda chosen by ``cfg.selection``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    X = _check_signal(D, X)
    B = X.shape[1]
    fac = _factor(D)
    paths = _paths(D, X, alpha, cfg)
    live = paths[0] > 0
    lam_sel = np.zeros(B)
    curves = [[] for _ in range(B)]
    Z = np.zeros((D.M, B))
    iters = np.zeros(B, dtype=np.int64)
    conv = np.ones(B, dtype=bool)
    if live.any():
        Xl, Pl = X[:, live], paths[:, live]
        cols = np.arange(Pl.shape[1])
        solved = False
        if cfg.selection == "min_mse":
            mse, Zl, it, ok = _insample_path(fac, Xl, alpha, Pl, cfg)
            sel = Pl[np.argmin(mse, axis=0), cols]
            Z[:, live], iters[live], conv[live] = Zl, it, ok
            solved = True
        elif Pl.shape[0] == 1:
            sel = Pl[0]
            mse = np.full_like(Pl, np.nan)
        else:
            mse = _cv_curves(D, Xl, alpha, Pl, cfg)
            sel = Pl[np.argmin(mse, axis=0), cols]
        lam_sel[live] = sel
        for col, b in enumerate(np.flatnonzero(live)):
            curves[b] = [(float(l), float(m)) for l, m in zip(Pl[:, col], mse[:, col])]
        if not solved:
            y = _rotate(fac, Xl)
            if alpha == 0:
                Z[:, live] = _ridge_cols(fac, y, sel)
            else:
                st = _admm(fac, y, sel, alpha, cfg.rho, cfg.tol, cfg.max_iter, rho_mode=cfg.rho_mode)
                Z[:, live] = st.z
                iters[live] = st.iterations
                conv[live] = st.converged
    res = _residual_energy(fac, X, Z)
    out = []
    for b in range(B):
        z = Z[:, b]
        out.append(FitResult(z, float(lam_sel[b]), float(alpha), count_nonzero(z, cfg.nonzero_threshold),
                             float(res[b]), float(z @ z), int(iters[b]), bool(conv[b]), curves[b]))
    return out


def fit(D: Dictionary, x, alpha: float, cfg: ElasticNetConfig = ElasticNetConfig()) -> FitResult:
    """Select lambda (cross-validation by default), then solve on the full signal."""
    return fit_many(D, np.asarray(x, dtype=np.float64)[:, None], alpha, cfg)[0]


# -------------------------------------------------------------------- sweep

DIAG_COLUMNS = ("j", "beta", "alpha", "class", "mean_residual_energy", "mean_coeff_energy",
                "mean_nonzero", "std_nonzero", "n_fits")


@dataclass
class FitRecord:
    id: str
    label: Optional[str]
    j: int
    alpha: float
    lambda_selected: float
    residual_energy: float
    coeff_energy: float
    n_nonzero: int
    converged: bool


@dataclass
class DiagnosticsTable:
    """Per-fit records plus per-(j, alpha, class) aggregates; class ``ALL`` pools every fit."""
    fits: list
    rows: list

    def to_csv(self, path, header_lines=()) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DIAG_COLUMNS)
            for r in self.rows:
                w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in DIAG_COLUMNS])

    def lookup(self, j, alpha, cls="ALL"):
        for r in self.rows:
            if r["j"] == j and r["alpha"] == alpha and r["class"] == cls:
                return r
        raise KeyError((j, alpha, cls))


def aggregate(fits: Sequence[FitRecord]) -> list[dict]:
    rows = []
    keys = sorted({(f.j, f.alpha) for f in fits})
    for j, alpha in keys:
        cell = [f for f in fits if f.j == j and f.alpha == alpha]
        classes = ["ALL"] + sorted({f.label for f in cell if f.label is not None})
        for cls in classes:
            grp = cell if cls == "ALL" else [f for f in cell if f.label == cls]
            nnz = np.array([f.n_nonzero for f in grp], dtype=np.float64)
            rows.append({
                "j": j, "beta": 2 ** j, "alpha": alpha, "class": cls,
                "mean_residual_energy": float(np.mean([f.residual_energy for f in grp])),
                "mean_coeff_energy": float(np.mean([f.coeff_energy for f in grp])),
                "mean_nonzero": float(nnz.mean()),
                "std_nonzero": float(nnz.std()),
                "n_fits": len(grp),
            })
    return rows


def _sweep_cell(args):
    j, N, alpha, X, ids, labels, cfg = args
    D = GaborDictionary(j, N)
    results = fit_many(D, X, alpha, cfg)
    return [FitRecord(i, l, j, alpha, r.lambda_selected, r.residual_energy, r.coeff_energy,
                      r.n_nonzero, r.converged) for i, l, r in zip(ids, labels, results)]


def sweep(recordings, j_values, alpha_values, cfg: ElasticNetConfig = ElasticNetConfig(),
          workers: int = 1) -> DiagnosticsTable:
    """Fit every recording for every (j, alpha) and aggregate the diagnostics.

    Cells run in a process pool when ``workers > 1``; results are merged in
    (j, alpha) order so the table does not depend on scheduling.
    """
    if not recordings:
        raise ValueError("sweep needs at least one recording")
    lengths = {len(r) for r in recordings}
    if len(lengths) != 1:
        raise ValueError(f"recordings have differing lengths {sorted(lengths)}")
    L = lengths.pop()
    N = L.bit_length() - 1
    if 2 ** N != L:
        raise ValueError(f"recording length {L} is not a power of two")
    X = np.column_stack([r.samples for r in recordings])
    ids = [r.id for r in recordings]
    labels = [None if r.label is None else r.label.name for r in recordings]
    tasks = [(j, N, float(a), X, ids, labels, cfg) for j in j_values for a in alpha_values]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_sweep_cell, tasks))
    else:
        chunks = [_sweep_cell(t) for t in tasks]
    fits = [f for chunk in chunks for f in chunk]
    return DiagnosticsTable(fits, aggregate(fits))
