"""Within estimator for regressions with high-dimensional fixed effects.

Fixed-effect factors are absorbed by alternating group demeaning; the
demeaned system is solved by rank-revealing QR, and inference uses the CR1
cluster-robust sandwich. Fits on a few hundred thousand rows with tens of
thousands of fixed-effect levels run in seconds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.csgraph
import scipy.stats

from ._core import cluster_scores, demean_by_factor

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10_000
DEFAULT_RANK_TOL = 1e-9
ABSORBED_TOL = 1e-9
STAR_LEVELS = ((0.01, "***"), (0.05, "**"), (0.1, "*"))


class EstimationError(RuntimeError):
    """Estimation failure carrying the name of the stage that raised it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass
class Factor:
    """A categorical factor with dense integer codes in [0, n_levels)."""

    name: str
    codes: np.ndarray
    n_levels: int
    levels: np.ndarray | None = None

    @classmethod
    def from_labels(cls, name, labels) -> "Factor":
        levels, codes = np.unique(np.asarray(labels), return_inverse=True)
        return cls(name, codes.astype(np.int32), len(levels), levels)

    def counts(self) -> np.ndarray:
        return np.bincount(self.codes, minlength=self.n_levels).astype(float)

    def validate(self, n: int):
        if self.codes.shape != (n,):
            raise EstimationError("design", f"factor {self.name}: wrong length")
        if self.n_levels and (self.codes.min() < 0 or self.codes.max() >= self.n_levels):
            raise EstimationError("design", f"factor {self.name}: codes out of range")


@dataclass
class DesignMatrix:
    """Response, named regressor columns, FE factors and the cluster factor."""

    y: np.ndarray
    x: np.ndarray
    column_names: list[str]
    fe_factors: list[Factor]
    cluster: Factor
    response_name: str = "y"

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def validate(self):
        n = self.n
        if self.x.shape != (n, len(self.column_names)):
            raise EstimationError("design", "column count does not match names")
        if not np.isfinite(self.y).all() or not np.isfinite(self.x).all():
            raise EstimationError("design", "non-finite entries in design")
        for f in self.fe_factors:
            f.validate(n)
        self.cluster.validate(n)


@dataclass
class WithinReport:
    iterations: int
    converged: bool
    max_change: np.ndarray
    absorbed: list[str]


def within_transform(matrix: DesignMatrix, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER):
    """Orthogonalize response and regressors against all FE dummy spans.

    Cycles through the factors subtracting group means until the largest
    group mean moved in a full cycle is below ``tol * (1 + column norm)``
    for every column. Returns ``(y_t, x_t, WithinReport)``; a single factor
    needs exactly one pass.
    """
    if tol <= 0:
        raise EstimationError("within_transform", "tol must be positive")
    if not matrix.fe_factors:
        raise EstimationError("within_transform", "at least one FE factor required")
    matrix.validate()

    m = np.ascontiguousarray(
        np.column_stack([matrix.y, matrix.x]) if matrix.x.size
        else matrix.y[:, None]
    ).astype(float)
    orig_inf = np.abs(m).max(axis=0) if m.size else np.zeros(m.shape[1])
    scale = tol * (1.0 + np.linalg.norm(m, axis=0))
    factors = [(f.codes, f.counts()) for f in matrix.fe_factors]

    if len(factors) == 1:
        codes, counts = factors[0]
        change = demean_by_factor(m, codes, counts)
        iterations, converged = 1, True
    else:
        converged = False
        change = np.zeros(m.shape[1])
        iterations = 0
        for iterations in range(1, max_iter + 1):
            change = np.zeros(m.shape[1])
            for codes, counts in factors:
                change += demean_by_factor(m, codes, counts)
            if (change < scale).all():
                converged = True
                break

    absorbed = [
        name
        for j, name in enumerate(matrix.column_names)
        if np.abs(m[:, j + 1]).max() <= ABSORBED_TOL * (1.0 + orig_inf[j + 1])
    ]
    report = WithinReport(iterations, converged, change, absorbed)
    return m[:, 0].copy(), np.ascontiguousarray(m[:, 1:]), report


@dataclass
class OlsResult:
    beta: np.ndarray
    kept: list[int]
    dropped: dict[str, str]
    residuals: np.ndarray
    bread: np.ndarray


def ols(y_t: np.ndarray, x_t: np.ndarray, column_names: list[str],
        rank_tol: float = DEFAULT_RANK_TOL,
        predropped: dict[str, str] | None = None) -> OlsResult:
    """Least squares on the demeaned system via pivoted QR.

    Columns whose pivot magnitude falls below ``rank_tol`` times the largest
    pivot are dropped with reason "collinear"; ``predropped`` columns (e.g.
    absorbed by the fixed effects) are removed before factorization.
    """
    dropped = dict(predropped or {})
    candidates = [j for j, name in enumerate(column_names) if name not in dropped]
    if not candidates:
        raise EstimationError("ols", "zero kept columns")
    xc = x_t[:, candidates]

    r, piv = scipy.linalg.qr(xc, mode="r", pivoting=True)
    diag = np.abs(np.diag(r))
    largest = diag[0] if diag.size else 0.0
    if largest == 0.0:
        raise EstimationError("ols", "zero kept columns")
    rank = int((diag >= rank_tol * largest).sum())
    for local in piv[rank:]:
        dropped[column_names[candidates[local]]] = "collinear"
    kept = sorted(candidates[local] for local in piv[:rank])
    if not kept:
        raise EstimationError("ols", "zero kept columns")

    xk = x_t[:, kept]
    (rk,) = scipy.linalg.qr(xk, mode="r", pivoting=False)
    rk = rk[: len(kept), :]
    xty = xk.T @ y_t
    beta = scipy.linalg.solve_triangular(
        rk, scipy.linalg.solve_triangular(rk, xty, trans="T"), trans="N"
    )
    residuals = y_t - xk @ beta
    rinv = scipy.linalg.solve_triangular(rk, np.eye(len(kept)))
    bread = rinv @ rinv.T
    return OlsResult(beta, kept, dropped, residuals, bread)


def cluster_robust_vcov(x_kept: np.ndarray, residuals: np.ndarray,
                        cluster: Factor, k_absorbed: int,
                        bread: np.ndarray | None = None):
    """CR1 sandwich: bread * (sum of per-cluster score outer products) * bread.

    The small-sample factor is G/(G-1) * (N-1)/(N-K) with K = kept regressors
    plus the absorbed fixed-effect degrees of freedom. Returns
    ``(vcov, correction)``.
    """
    n, k = x_kept.shape
    n_clusters = int(np.unique(cluster.codes).size)
    if n_clusters < 2:
        raise EstimationError("cluster_robust_vcov", "insufficient clusters")
    if bread is None:
        bread = np.linalg.pinv(x_kept.T @ x_kept)
    k_total = k + k_absorbed
    if n - k_total <= 0:
        raise EstimationError("cluster_robust_vcov", "non-positive residual dof")
    correction = (n_clusters / (n_clusters - 1.0)) * ((n - 1.0) / (n - k_total))
    xc = np.ascontiguousarray(x_kept)
    scores = cluster_scores(xc, residuals, cluster.codes, cluster.n_levels)
    meat = scores.T @ scores
    vcov = correction * (bread @ meat @ bread)
    vcov = (vcov + vcov.T) / 2.0
    return vcov, correction, n_clusters


def absorbed_dof(factors: list[Factor]) -> int:
    """Degrees of freedom soaked up by the absorbed fixed effects.

    One factor: its level count. Two factors: levels minus the number of
    connected components of the bipartite level graph (the exact rank of the
    joint dummy matrix). More factors: first factor full, each further factor
    contributes levels - 1 (conservative approximation).
    """
    if not factors:
        return 0
    used = [int(np.unique(f.codes).size) for f in factors]
    if len(factors) == 1:
        return used[0]
    if len(factors) == 2:
        return used[0] + used[1] - _n_components(factors[0], factors[1])
    return used[0] + sum(u - 1 for u in used[1:])


def _n_components(f1: Factor, f2: Factor) -> int:
    pairs = np.unique(f1.codes.astype(np.int64) * f2.n_levels + f2.codes)
    rows = pairs // f2.n_levels
    cols = pairs % f2.n_levels + f1.n_levels
    n_nodes = f1.n_levels + f2.n_levels
    graph = scipy.sparse.coo_matrix(
        (np.ones(len(pairs)), (rows, cols)), shape=(n_nodes, n_nodes)
    )
    n_comp, labels = scipy.sparse.csgraph.connected_components(graph, directed=False)
    # count only components containing occupied levels
    occupied = np.unique(np.concatenate([rows, cols]))
    return int(np.unique(labels[occupied]).size)


@dataclass
class FitResult:
    """Coefficients, CR1 covariance and fit statistics for one model."""

    response: str
    coefficients: dict[str, float]
    std_errors: dict[str, float]
    vcov: np.ndarray
    vcov_names: list[str]
    n_obs: int
    n_clusters: int
    r_squared: float
    r_squared_within: float
    dropped_columns: dict[str, str]
    residuals: np.ndarray
    converged: bool
    iterations: int
    correction: float
    absorbed_dof: int
    cluster_level: str
    meta: dict = field(default_factory=dict)

    def t_stat(self, name: str) -> float:
        return self.coefficients[name] / self.std_errors[name]

    def p_value(self, name: str) -> float:
        dof = max(self.n_clusters - 1, 1)
        return 2.0 * float(scipy.stats.t.sf(abs(self.t_stat(name)), dof))

    def stars(self, name: str) -> str:
        p = self.p_value(name)
        for level, mark in STAR_LEVELS:
            if p < level:
                return mark
        return ""

    def table(self) -> list[dict]:
        rows = []
        for name in self.vcov_names:
            rows.append({
                "term": name,
                "estimate": self.coefficients[name],
                "std_error": self.std_errors[name],
                "t": self.t_stat(name),
                "p": self.p_value(name),
                "stars": self.stars(name),
            })
        return rows

    def to_json(self, **extra) -> str:
        payload = {
            "response": self.response,
            "coefficients": self.table(),
            "dropped_columns": self.dropped_columns,
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "cluster_level": self.cluster_level,
            "r_squared": self.r_squared,
            "r_squared_within": self.r_squared_within,
            "converged": self.converged,
            "iterations": self.iterations,
            "cr1_correction": self.correction,
            "absorbed_dof": self.absorbed_dof,
            "meta": self.meta,
        }
        payload.update(extra)
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def fit_design(matrix: DesignMatrix, tol: float = DEFAULT_TOL,
               max_iter: int = DEFAULT_MAX_ITER,
               rank_tol: float = DEFAULT_RANK_TOL,
               force: bool = False) -> FitResult:
    """Estimate a built design: within transform, OLS, CR1 sandwich, R^2."""
    y_t, x_t, report = within_transform(matrix, tol=tol, max_iter=max_iter)
    if not report.converged and not force:
        raise EstimationError(
            "within_transform",
            f"no convergence after {report.iterations} iterations (pass force=True to override)",
        )
    predropped = {name: "absorbed" for name in report.absorbed}
    res = ols(y_t, x_t, matrix.column_names, rank_tol=rank_tol, predropped=predropped)
    kept_names = [matrix.column_names[j] for j in res.kept]
    x_kept = x_t[:, res.kept]
    vcov, correction, n_clusters = cluster_robust_vcov(
        x_kept, res.residuals, matrix.cluster,
        k_absorbed=absorbed_dof(matrix.fe_factors), bread=res.bread
    )
    se = np.sqrt(np.diag(vcov))

    ssr = float(res.residuals @ res.residuals)
    sst = float(np.sum((matrix.y - matrix.y.mean()) ** 2))
    sst_within = float(y_t @ y_t)
    r2 = 1.0 - ssr / sst if sst > 0 else math.nan
    r2_within = 1.0 - ssr / sst_within if sst_within > 0 else math.nan

    return FitResult(
        response=matrix.response_name,
        coefficients=dict(zip(kept_names, res.beta.tolist())),
        std_errors=dict(zip(kept_names, se.tolist())),
        vcov=vcov,
        vcov_names=kept_names,
        n_obs=matrix.n,
        n_clusters=n_clusters,
        r_squared=r2,
        r_squared_within=r2_within,
        dropped_columns=res.dropped,
        residuals=res.residuals,
        converged=report.converged,
        iterations=report.iterations,
        correction=correction,
        absorbed_dof=absorbed_dof(matrix.fe_factors),
        cluster_level=matrix.cluster.name,
    )


def fit(spec, data, tau_days=None, **kwargs) -> FitResult:
    """Estimate a declarative model spec against a transaction table.

    Builds columns (including trimming when the spec asks for it), then runs
    the within pipeline. ``spec`` is a ``designs.ModelSpec``.
    """
    from . import designs  # deferred to avoid a circular import

    matrix, meta = designs.build_design(spec, data)
    result = fit_design(matrix, **kwargs)
    result.meta.update(meta)
    return result
