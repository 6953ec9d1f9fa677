"""Arm-mean and treatment-effect estimation for randomized experiments.

Three regression specifications share one coefficient layout: the first Q
columns are arm indicators, optionally followed by J common covariate
columns (additive spec) or JQ arm-by-covariate interaction columns
(interacted spec), interactions grouped by arm and then covariate.

Restrictions are always expressed against the interacted layout. The
unadjusted and additive estimators are reachable both as ordinary fits of
their own specifications and as restricted fits of the interacted one; the
numeric identity between the two routes is covered by tests, not assumed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import (
    RANK_TOL,
    as_float_matrix,
    as_float_vector,
    center_columns,
    freeze,
)
from .design import Assignment, BalanceFilter, TreatmentStructure
from .errors import NumericalError, RankError, ValidationError
from .lsq import DesignMatrix, FitResult, Restriction, ddt_cov, ehw_cov, ols_fit, rls_fit
from .special import chi2_cdf, chi2_sf

SPEC_KINDS = ("N", "F", "L")
_KIND_ALIASES = {
    "n": "N", "unadjusted": "N",
    "f": "F", "additive": "F",
    "l": "L", "interacted": "L", "fully_interacted": "L",
}


def normalize_kind(kind: str) -> str:
    k = _KIND_ALIASES.get(str(kind).lower(), str(kind).upper())
    if k not in SPEC_KINDS:
        raise ValidationError(f"unknown specification kind {kind!r}; expected N, F, or L")
    return k


@dataclass(frozen=True, eq=False)
class ExperimentData:
    """Observed outcomes, assignment, and internally centered covariates."""

    y: np.ndarray
    z: Assignment
    X: np.ndarray
    structure: TreatmentStructure
    x_shift: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y", freeze(np.asarray(self.y, dtype=float)))
        object.__setattr__(self, "X", freeze(np.asarray(self.X, dtype=float)))
        object.__setattr__(self, "x_shift", freeze(np.asarray(self.x_shift, dtype=float)))

    @classmethod
    def build(cls, y, z, X=None, structure: TreatmentStructure | None = None) -> "ExperimentData":
        y = as_float_vector(y, "y")
        if not isinstance(z, Assignment):
            z = Assignment(z)
        n = y.shape[0]
        if z.z.shape[0] != n:
            raise ValidationError(f"y has {n} entries, assignment has {z.z.shape[0]}")
        if X is None:
            X = np.zeros((n, 0))
        X = as_float_matrix(X, "X", allow_empty_cols=True)
        if X.shape[0] != n:
            raise ValidationError(f"X has {X.shape[0]} rows, y has {n} entries")
        if structure is None:
            counts = z.counts(int(z.z.max()))
            if counts.min() == 0:
                missing = int(np.flatnonzero(counts == 0)[0]) + 1
                raise ValidationError(f"arm {missing} has no units")
            structure = TreatmentStructure(tuple(int(c) for c in counts))
        z.check_structure(structure)
        Xc, shift = center_columns(X)
        return cls(y=y, z=z, X=Xc, structure=structure, x_shift=shift)

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def n_arms(self) -> int:
        return self.structure.n_arms

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    def group_mask(self, q: int) -> np.ndarray:
        return self.z.z == q

    def group_outcome_means(self) -> np.ndarray:
        return np.array([self.y[self.group_mask(q)].mean() for q in range(1, self.n_arms + 1)])

    def group_covariate_means(self) -> np.ndarray:
        if self.n_covariates == 0:
            return np.zeros((self.n_arms, 0))
        return np.stack(
            [self.X[self.group_mask(q)].mean(axis=0) for q in range(1, self.n_arms + 1)]
        )


def contrast_matrix(C, n_arms: int) -> np.ndarray:
    """Validate an H x Q matrix whose rows are orthogonal to the ones vector."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[1] != n_arms:
        raise ValidationError(f"contrast matrix has {C.shape[1]} columns for {n_arms} arms")
    rowsums = np.abs(C.sum(axis=1))
    if C.shape[0] and rowsums.max() > 1e-10 * (1.0 + np.abs(C).max()):
        raise ValidationError("every contrast row must sum to zero")
    return C


def default_contrast(n_arms: int) -> np.ndarray:
    """Each arm versus arm 1."""
    return np.hstack([-np.ones((n_arms - 1, 1)), np.eye(n_arms - 1)])


@dataclass(frozen=True)
class SpecBuilder:
    """Column layout of one regression specification."""

    kind: str
    n_arms: int
    n_covariates: int

    @property
    def column_labels(self) -> tuple[str, ...]:
        q, j = self.n_arms, self.n_covariates
        labels = [f"arm{a}" for a in range(1, q + 1)]
        if self.kind == "F":
            labels += [f"x{b}" for b in range(1, j + 1)]
        elif self.kind == "L":
            labels += [f"arm{a}:x{b}" for a in range(1, q + 1) for b in range(1, j + 1)]
        return tuple(labels)

    @property
    def n_cols(self) -> int:
        return len(self.column_labels)

    def build(self, z: Assignment, X) -> DesignMatrix:
        X = as_float_matrix(X, "X", allow_empty_cols=True)
        n = z.z.shape[0]
        T = np.zeros((n, self.n_arms))
        T[np.arange(n), z.z - 1] = 1.0
        if self.kind == "N":
            values = T
        elif self.kind == "F":
            values = np.hstack([T, X])
        else:
            inter = (T[:, :, None] * X[:, None, :]).reshape(n, self.n_arms * self.n_covariates)
            values = np.hstack([T, inter])
        return DesignMatrix(values, self.column_labels)


def build_spec(kind: str, structure: TreatmentStructure, n_covariates: int) -> SpecBuilder:
    """Specification builder; with no covariates every kind reduces to 'N'."""
    kind = normalize_kind(kind)
    if n_covariates < 0:
        raise ValidationError(f"covariate count must be nonnegative, got {n_covariates}")
    if n_covariates == 0:
        kind = "N"
    return SpecBuilder(kind=kind, n_arms=structure.n_arms, n_covariates=n_covariates)


# ---------------------------------------------------------------------------
# Restriction builders (always on the interacted coefficient layout)
# ---------------------------------------------------------------------------


def restriction_zero_correlation(n_arms: int, n_covariates: int) -> Restriction:
    """All interaction coefficients are zero."""
    q, j = n_arms, n_covariates
    rho_gamma = np.eye(j * q)
    R = np.hstack([np.zeros((j * q, q)), rho_gamma])
    return Restriction(
        R, np.zeros(j * q), kind="correlation_only",
        rho_gamma=rho_gamma, r_gamma=np.zeros(j * q),
    )


def restriction_equal_correlation(n_arms: int, n_covariates: int) -> Restriction:
    """Interaction coefficients are equal across arms."""
    q, j = n_arms, n_covariates
    diff = np.hstack([-np.ones((q - 1, 1)), np.eye(q - 1)])
    rho_gamma = np.kron(diff, np.eye(j))
    R = np.hstack([np.zeros((j * (q - 1), q)), rho_gamma])
    return Restriction(
        R, np.zeros(j * (q - 1)), kind="correlation_only",
        rho_gamma=rho_gamma, r_gamma=np.zeros(j * (q - 1)),
    )


def restriction_separable(
    rho_y, r_y, rho_gamma, r_gamma, *, n_arms: int, n_covariates: int
) -> Restriction:
    """Block-diagonal restriction with separate mean and interaction blocks.

    Either block may be empty (pass None or a zero-row matrix); with an
    empty mean block the result is classified correlation-only, with both
    blocks empty it is the empty restriction.
    """
    q, j = n_arms, n_covariates

    def _block(mat, rhs, width, name):
        if mat is None:
            return np.zeros((0, width)), np.zeros(0)
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        if mat.shape[0] == 0:
            return np.zeros((0, width)), np.zeros(0)
        if mat.shape[1] != width:
            raise ValidationError(f"{name} must have {width} columns, got {mat.shape[1]}")
        rhs = np.atleast_1d(np.zeros(mat.shape[0]) if rhs is None else np.asarray(rhs, dtype=float))
        if rhs.shape[0] != mat.shape[0]:
            raise ValidationError(f"{name} right side has {rhs.shape[0]} entries for {mat.shape[0]} rows")
        sv = np.linalg.svd(mat, compute_uv=False)
        if sv.max() == 0.0 or sv.min() < RANK_TOL * sv.max():
            raise RankError(f"{name} does not have full row rank")
        return mat, rhs

    ry_mat, ry_rhs = _block(rho_y, r_y, q, "mean-block restriction")
    rg_mat, rg_rhs = _block(rho_gamma, r_gamma, j * q, "interaction-block restriction")
    m_y, m_g = ry_mat.shape[0], rg_mat.shape[0]
    if m_y == 0 and m_g == 0:
        return Restriction.empty(q + j * q)
    R = np.zeros((m_y + m_g, q + j * q))
    R[:m_y, :q] = ry_mat
    R[m_y:, q:] = rg_mat
    rhs = np.concatenate([ry_rhs, rg_rhs])
    kind = "correlation_only" if m_y == 0 else "separable"
    return Restriction(
        R, rhs, kind=kind,
        rho_y=ry_mat if m_y else None, r_y=ry_rhs if m_y else None,
        rho_gamma=rg_mat if m_g else None, r_gamma=rg_rhs if m_g else None,
    )


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EstimationResult:
    """Point estimates and robust covariance for a set of contrasts."""

    tau_hat: np.ndarray
    tau_cov: np.ndarray
    y_hat: np.ndarray
    y_hat_cov: np.ndarray
    gamma_hat: np.ndarray
    spec_kind: str
    restriction: Restriction
    contrast: np.ndarray
    contrast_labels: tuple[str, ...]
    x_shift: np.ndarray

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.tau_cov), 0.0, None))


def _check_group_sizes_for_interacted(data: ExperimentData) -> None:
    j = data.n_covariates
    if j == 0:
        return
    for q, n_q in enumerate(data.structure.group_sizes, start=1):
        if n_q < j + 2:
            raise ValidationError(
                f"arm {q} has {n_q} units; the interacted specification needs "
                f"at least {j + 2} per arm with {j} covariates"
            )


def _fit_spec(
    data: ExperimentData,
    kind: str,
    restriction: Restriction | None,
    cache: dict | None = None,
) -> tuple[FitResult, str]:
    """Shared fitting path; ``cache`` may hold the interacted base fit."""
    kind = normalize_kind(kind)
    empty = restriction is None or restriction.is_empty
    if not empty and kind != "L":
        raise ValidationError("restrictions are defined on the interacted specification (kind L)")
    if kind == "L":
        _check_group_sizes_for_interacted(data)
    builder = build_spec(kind, data.structure, data.n_covariates)
    if cache is not None and builder.kind == "L":
        base = cache.get("L")
        if base is None:
            design = builder.build(data.z, data.X)
            base = ols_fit(design, data.y)
            cache["L"] = base
        design = base.design
    else:
        design = builder.build(data.z, data.X)
        base = None
    if empty:
        fit = base if base is not None else ols_fit(design, data.y)
    else:
        if restriction.matrix.shape[1] != builder.n_cols:
            raise ValidationError(
                f"restriction has {restriction.matrix.shape[1]} columns; the interacted "
                f"layout has {builder.n_cols}"
            )
        fit = rls_fit(design, data.y, restriction, base=base)
    return fit, builder.kind


def _gamma_from_fit(fit: FitResult, kind: str, n_arms: int, n_covariates: int) -> np.ndarray:
    q, j = n_arms, n_covariates
    if j == 0 or kind == "N":
        return np.zeros(j * q)
    if kind == "F":
        return np.tile(fit.beta[q:], q)
    return fit.beta[q:].copy()


def estimate(
    data: ExperimentData,
    kind: str,
    restriction: Restriction | None = None,
    contrast=None,
    *,
    _cache: dict | None = None,
) -> EstimationResult:
    """Estimate arm means and contrasts with the matching robust covariance.

    With an empty restriction this is the ordinary fit of the requested
    specification with its HC0 covariance block; with a restriction it is
    the restricted fit of the interacted specification with the projected
    robust covariance block. For a general (non-separable) restriction the
    point estimate and covariance are reported as computed, with the kind
    echoed, and carry no consistency guarantee.
    """
    q = data.n_arms
    C = contrast_matrix(contrast if contrast is not None else default_contrast(q), q)
    fit, kind = _fit_spec(data, kind, restriction, _cache)
    y_hat = fit.beta[:q]
    cov_full = ehw_cov(fit) if fit.restriction.is_empty else ddt_cov(fit)
    psi = cov_full[:q, :q]
    tau_hat = C @ y_hat
    tau_cov = C @ psi @ C.T
    labels = tuple(f"c{i + 1}" for i in range(C.shape[0]))
    return EstimationResult(
        tau_hat=freeze(tau_hat),
        tau_cov=freeze(tau_cov),
        y_hat=freeze(y_hat.copy()),
        y_hat_cov=freeze(psi),
        gamma_hat=freeze(_gamma_from_fit(fit, kind, q, data.n_covariates)),
        spec_kind=kind,
        restriction=fit.restriction,
        contrast=freeze(C),
        contrast_labels=labels,
        x_shift=data.x_shift,
    )


def adjusted_means(data: ExperimentData, b) -> np.ndarray:
    """Linearly adjusted arm means: mean(y | arm q) - mean(x | arm q)' b_q."""
    q, j = data.n_arms, data.n_covariates
    b = as_float_vector(b, "b")
    if b.shape[0] != j * q:
        raise ValidationError(f"b must have length {j * q}, got {b.shape[0]}")
    means = data.group_outcome_means()
    if j == 0:
        return means
    xbar = data.group_covariate_means()
    return means - np.einsum("qj,qj->q", xbar, b.reshape(q, j))


def within_group_slopes(data: ExperimentData) -> np.ndarray:
    """Per-arm regression slopes of outcome on covariates, stacked arm-major."""
    q, j = data.n_arms, data.n_covariates
    if j == 0:
        return np.zeros(0)
    _check_group_sizes_for_interacted(data)
    out = np.empty((q, j))
    for arm in range(1, q + 1):
        mask = data.group_mask(arm)
        Xg = data.X[mask] - data.X[mask].mean(axis=0)
        yg = data.y[mask] - data.y[mask].mean()
        gram = Xg.T @ Xg
        eig = np.linalg.eigvalsh(gram)
        if eig[0] < RANK_TOL * max(eig[-1], 0.0) or eig[-1] <= 0.0:
            raise RankError(f"covariates are collinear within arm {arm}")
        out[arm - 1] = np.linalg.solve(gram, Xg.T @ yg)
    return out.ravel()


@dataclass(frozen=True)
class WaldTestResult:
    statistic: float
    df: int
    p_value: float


def wald_restriction_test(data: ExperimentData, R, r) -> WaldTestResult:
    """Wald test of ``R theta = r`` on the interacted-fit coefficients.

    Uses the full HC0 covariance of the interacted fit and a chi-square
    reference with rank(R) degrees of freedom.
    """
    restriction = Restriction(np.atleast_2d(np.asarray(R, dtype=float)),
                              np.atleast_1d(np.asarray(r, dtype=float)))
    fit, _ = _fit_spec(data, "L", None, None)
    if restriction.matrix.shape[1] != fit.beta.shape[0]:
        raise ValidationError(
            f"restriction has {restriction.matrix.shape[1]} columns; the interacted "
            f"layout has {fit.beta.shape[0]}"
        )
    sigma = ehw_cov(fit)
    Rm = restriction.matrix
    mid = Rm @ sigma @ Rm.T
    eig = np.linalg.eigvalsh(mid)
    if eig[0] < RANK_TOL * max(eig[-1], 0.0) or eig[-1] <= 0.0:
        raise RankError("R Sigma R' is singular; the Wald statistic is undefined")
    diff = Rm @ fit.beta - restriction.rhs
    stat = float(diff @ np.linalg.solve(mid, diff))
    df = Rm.shape[0]
    return WaldTestResult(statistic=stat, df=df, p_value=chi2_sf(stat, df))


# ---------------------------------------------------------------------------
# Rerandomization-specific covariance pieces
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RemCovParts:
    """Split of the scaled covariance of adjusted arm means under balance
    truncation: the part unaffected by truncation and the truncated part.
    All matrices are on the 'times N' scale."""

    v_perp: np.ndarray
    v_par: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.v_perp + self.v_par


def rem_plugin_cov(data: ExperimentData, b, G) -> RemCovParts:
    """Plug-in covariance split for adjusted means under balance truncation.

    ``v_par`` is the component the balance criterion shrinks; ``v_perp`` is
    the remainder, so the parts sum to the plain plug-in covariance.
    """
    q, j = data.n_arms, data.n_covariates
    b = as_float_vector(b, "b")
    if b.shape[0] != j * q:
        raise ValidationError(f"b must have length {j * q}, got {b.shape[0]}")
    G = BalanceFilter(G).contrasts
    if G.shape[1] != q:
        raise ValidationError(f"balance contrasts have {G.shape[1]} columns for {q} arms")
    slopes = within_group_slopes(data).reshape(q, j)
    b_mat = b.reshape(q, j)
    e = data.structure.proportions
    n = data.n_units

    s_adj = np.empty(q)
    for arm in range(1, q + 1):
        mask = data.group_mask(arm)
        resid = data.y[mask] - data.X[mask] @ b_mat[arm - 1]
        s_adj[arm - 1] = resid.var(ddof=1)
    v_total = np.diag(s_adj / e)

    pi_inv = np.diag(1.0 / e)
    phi = pi_inv @ G.T @ np.linalg.solve(G @ pi_inv @ G.T, G @ pi_inv)
    s_xx = data.X.T @ data.X / (n - 1)
    d_hat = np.zeros((q, j * q))
    for arm in range(q):
        d_hat[arm, arm * j:(arm + 1) * j] = b_mat[arm] - slopes[arm]
    v_par = d_hat @ np.kron(phi, s_xx) @ d_hat.T
    return RemCovParts(v_perp=freeze(v_total - v_par), v_par=freeze(v_par))


def _psd_factor(mat: np.ndarray, name: str, n_cols: int | None = None) -> np.ndarray:
    """Symmetric PSD square root with small negative eigenvalues clipped.

    Clip magnitudes beyond 1e-8 of the largest eigenvalue are an error.
    When ``n_cols`` is given the factor is rectangular with that many
    columns, keeping the largest-eigenvalue directions.
    """
    mat = np.asarray(mat, dtype=float)
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    top = max(vals[-1], 0.0)
    if vals[0] < -1e-8 * max(top, 1e-300):
        raise NumericalError(f"{name} is not positive semidefinite: eigenvalue {vals[0]:.3g}")
    vals = np.clip(vals, 0.0, None)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    if n_cols is not None:
        if n_cols < mat.shape[0] and vals[n_cols:].max(initial=0.0) > 1e-8 * max(top, 1e-300):
            raise ValidationError(
                f"{name} has rank above {n_cols}; cannot factor with {n_cols} columns"
            )
        width = min(n_cols, mat.shape[0])
        factor = vecs[:, :width] * np.sqrt(vals[:width])
        if n_cols > mat.shape[0]:
            factor = np.hstack([factor, np.zeros((mat.shape[0], n_cols - mat.shape[0]))])
        return factor
    return vecs * np.sqrt(vals)


def rem_reference_sample(
    v_perp, v_par, threshold: float, jh: int, draws: int, seed: int
) -> np.ndarray:
    """Draws from the balance-truncated reference distribution.

    Samples normal(0, v_perp) plus a rectangular square root of ``v_par``
    applied to a standard normal conditioned on squared norm <= threshold.
    Deterministic given the seed.
    """
    if jh < 1:
        raise ValidationError(f"jh must be at least 1, got {jh}")
    if draws < 1:
        raise ValidationError(f"draws must be at least 1, got {draws}")
    if not threshold > 0.0:
        raise ValidationError(f"threshold must be positive, got {threshold}")
    v_perp = as_float_matrix(v_perp, "v_perp")
    v_par = as_float_matrix(v_par, "v_par")
    if v_perp.shape != v_par.shape or v_perp.shape[0] != v_perp.shape[1]:
        raise ValidationError("v_perp and v_par must be square matrices of equal size")
    root_perp = _psd_factor(v_perp, "v_perp")
    root_par = _psd_factor(v_par, "v_par", n_cols=jh)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    out = rng.standard_normal((draws, v_perp.shape[0])) @ root_perp.T
    if np.abs(root_par).max(initial=0.0) == 0.0:
        return out
    accept_prob = 1.0 if np.isinf(threshold) else chi2_cdf(threshold, jh)
    if accept_prob <= 0.0:
        raise ValidationError(f"threshold {threshold} has zero acceptance probability")
    collected = np.empty((0, jh))
    guard = 0
    while collected.shape[0] < draws:
        batch = int(max(1024, (draws - collected.shape[0]) / accept_prob * 1.2))
        cand = rng.standard_normal((batch, jh))
        if not np.isinf(threshold):
            cand = cand[np.einsum("ij,ij->i", cand, cand) <= threshold]
        collected = np.vstack([collected, cand])
        guard += 1
        if guard > 10_000:
            raise NumericalError("truncated-normal sampling failed to collect enough draws")
    return out + collected[:draws] @ root_par.T
