"""Ordinary and equality-restricted least squares with robust covariances.

Fits go through a rank-revealing pivoted QR factorization; the inverse
normal-equations matrix is assembled from the triangular factor because the
restricted-fit and robust-covariance formulas consume it directly.

Covariance estimators are plain HC0: no small-sample rescaling, since the
numeric equivalences between restricted fits and ordinary fits of the
corresponding restricted specifications hold only for the unscaled form.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from ._validation import RANK_TOL, as_float_matrix, as_float_vector, freeze
from .errors import NumericalError, RankError, ValidationError

# Constraint satisfaction and symmetry tolerances for fitted results.
CONSTRAINT_TOL = 1e-8
SYMMETRY_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Regressor matrix plus a label per column for error reporting."""

    values: np.ndarray
    column_labels: tuple[str, ...]

    def __post_init__(self):
        values = as_float_matrix(self.values, "design matrix")
        labels = tuple(str(c) for c in self.column_labels)
        if len(labels) != values.shape[1]:
            raise ValidationError(
                f"{len(labels)} column labels for {values.shape[1]} columns"
            )
        object.__setattr__(self, "values", freeze(values))
        object.__setattr__(self, "column_labels", labels)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class Restriction:
    """Full-row-rank linear equality system ``matrix @ beta = rhs``.

    ``kind`` classifies the structure relative to a coefficient vector that
    stacks Q arm-mean coordinates before JQ interaction coordinates:
    ``empty``, ``correlation_only`` (rows touch only the interaction block),
    ``separable`` (block-diagonal over the two blocks), or ``general``.
    """

    matrix: np.ndarray
    rhs: np.ndarray
    kind: str = "general"
    rho_y: np.ndarray | None = None
    r_y: np.ndarray | None = None
    rho_gamma: np.ndarray | None = None
    r_gamma: np.ndarray | None = None

    def __post_init__(self):
        R = as_float_matrix(self.matrix, "restriction matrix", allow_empty_cols=False) \
            if np.asarray(self.matrix).size else np.asarray(self.matrix, dtype=float)
        if R.ndim != 2:
            raise ValidationError("restriction matrix must be two-dimensional")
        r = as_float_vector(self.rhs, "restriction rhs") if np.asarray(self.rhs).size \
            else np.zeros(R.shape[0])
        if r.shape[0] != R.shape[0]:
            raise ValidationError(
                f"restriction rhs has {r.shape[0]} entries for {R.shape[0]} rows"
            )
        if self.kind not in ("empty", "correlation_only", "separable", "general"):
            raise ValidationError(f"unknown restriction kind {self.kind!r}")
        if R.shape[0] > 0:
            if R.shape[0] > R.shape[1]:
                raise RankError("restriction has more rows than coefficients")
            sv = np.linalg.svd(R, compute_uv=False)
            if sv.min() < RANK_TOL * sv.max():
                raise RankError("restriction matrix does not have full row rank")
        elif self.kind != "empty":
            raise ValidationError("a zero-row restriction must have kind 'empty'")
        object.__setattr__(self, "matrix", freeze(R))
        object.__setattr__(self, "rhs", freeze(r))
        for name in ("rho_y", "r_y", "rho_gamma", "r_gamma"):
            block = getattr(self, name)
            if block is not None:
                object.__setattr__(self, name, freeze(np.asarray(block, dtype=float)))

    @classmethod
    def empty(cls, n_cols: int) -> "Restriction":
        return cls(np.zeros((0, n_cols)), np.zeros(0), kind="empty")

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.n_rows == 0


@dataclass(frozen=True, eq=False)
class FitResult:
    """A solved least-squares problem with the pieces robust formulas need.

    ``projector`` is the restricted-fit map I - M R (identity for an
    ordinary fit), where M = (X'X)^-1 R' {R (X'X)^-1 R'}^-1.
    """

    design: DesignMatrix
    y: np.ndarray
    beta: np.ndarray
    residuals: np.ndarray
    xtx_inv: np.ndarray
    restriction: Restriction
    projector: np.ndarray

    @property
    def fitted(self) -> np.ndarray:
        return self.y - self.residuals


def ols_fit(design: DesignMatrix, y) -> FitResult:
    """Least-squares fit; raises ``RankError`` naming dependent columns."""
    y = as_float_vector(y, "y")
    A = design.values
    if y.shape[0] != A.shape[0]:
        raise ValidationError(f"y has {y.shape[0]} entries, design has {A.shape[0]} rows")
    q, r_fac, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r_fac))
    if diag.size == 0:
        raise ValidationError("design matrix has no columns")
    rank = 0 if diag[0] == 0.0 else int(np.sum(diag >= RANK_TOL * diag[0]))
    p = A.shape[1]
    if rank < p:
        offending = [design.column_labels[j] for j in piv[rank:]]
        raise RankError(
            "design matrix is rank deficient; linearly dependent columns: "
            + ", ".join(offending),
            columns=offending,
        )
    beta_piv = scipy.linalg.solve_triangular(r_fac, q.T @ y)
    beta = np.empty(p)
    beta[piv] = beta_piv
    r_inv = scipy.linalg.solve_triangular(r_fac, np.eye(p))
    xtx_inv = np.empty((p, p))
    xtx_inv[np.ix_(piv, piv)] = r_inv @ r_inv.T
    residuals = y - A @ beta
    return FitResult(
        design=design,
        y=freeze(y),
        beta=freeze(beta),
        residuals=freeze(residuals),
        xtx_inv=freeze(xtx_inv),
        restriction=Restriction.empty(p),
        projector=freeze(np.eye(p)),
    )


def rls_fit(
    design: DesignMatrix,
    y,
    restriction: Restriction,
    *,
    base: FitResult | None = None,
) -> FitResult:
    """Least squares subject to ``restriction``, via the closed form
    ``beta_r = (I - M R) beta_ols + M rhs``.

    ``base`` may supply a previously computed unrestricted fit of the same
    problem to avoid refactorizing the design.
    """
    if restriction.is_empty:
        fit = base if base is not None else ols_fit(design, y)
        return replace(fit, restriction=restriction) if restriction is not fit.restriction else fit
    if restriction.matrix.shape[1] != design.n_cols:
        raise ValidationError(
            f"restriction has {restriction.matrix.shape[1]} columns, "
            f"design has {design.n_cols}"
        )
    fit = base if base is not None else ols_fit(design, y)
    if fit.design is not design and fit.design.values.shape != design.values.shape:
        raise ValidationError("base fit does not match the design matrix")
    R = restriction.matrix
    V = fit.xtx_inv
    mid = R @ V @ R.T
    eig = np.linalg.eigvalsh(mid)
    if eig[0] < RANK_TOL * max(eig[-1], 0.0) or eig[-1] <= 0.0:
        raise RankError("R (X'X)^-1 R' is singular; restriction rows may be redundant")
    m_mat = V @ R.T @ np.linalg.inv(mid)
    projector = np.eye(design.n_cols) - m_mat @ R
    beta = projector @ fit.beta + m_mat @ restriction.rhs
    # Ill-conditioned designs leave a small constraint residual in the
    # closed form; a refinement step or two removes it.
    scale = 1.0 + np.abs(restriction.rhs).max(initial=0.0)
    for _ in range(3):
        gap_vec = R @ beta - restriction.rhs
        if np.abs(gap_vec).max() <= 1e-12 * scale:
            break
        beta = beta - m_mat @ gap_vec
    gap = np.abs(R @ beta - restriction.rhs).max()
    if gap > CONSTRAINT_TOL * scale:
        raise NumericalError(f"restricted fit violates its constraints by {gap:.3g}")
    residuals = fit.y - design.values @ beta
    return FitResult(
        design=design,
        y=fit.y,
        beta=freeze(beta),
        residuals=freeze(residuals),
        xtx_inv=fit.xtx_inv,
        restriction=restriction,
        projector=freeze(projector),
    )


def _symmetrize(cov: np.ndarray) -> np.ndarray:
    scale = np.abs(cov).max(initial=0.0)
    if scale > 0.0:
        asym = np.abs(cov - cov.T).max() / scale
        if asym > SYMMETRY_TOL:
            raise NumericalError(f"covariance asymmetric beyond tolerance: {asym:.3g}")
    return (cov + cov.T) / 2.0


def _half_sandwich(fit: FitResult) -> np.ndarray:
    # N x p factor H with H'H equal to the HC0 sandwich; the Gram form
    # keeps the covariance symmetric to machine precision.
    return (fit.design.values * fit.residuals[:, None]) @ fit.xtx_inv


def ehw_cov(fit: FitResult) -> np.ndarray:
    """HC0 sandwich covariance of an ordinary (unrestricted) fit."""
    if not fit.restriction.is_empty:
        raise ValidationError("ehw_cov applies to unrestricted fits; use ddt_cov")
    half = _half_sandwich(fit)
    return _symmetrize(half.T @ half)


def ddt_cov(fit: FitResult) -> np.ndarray:
    """Robust covariance for a restricted fit.

    Wraps the HC0 sandwich built from the restricted residuals in the
    restricted-fit projector: (I - M R) S (I - M R)'. With an empty
    restriction this equals ``ehw_cov`` exactly.
    """
    half = _half_sandwich(fit) @ fit.projector.T
    return _symmetrize(half.T @ half)


def transform_regressors(design: DesignMatrix, gamma) -> DesignMatrix:
    """Reparameterize columns by a nonsingular matrix: X -> X @ gamma.

    Columns are relabeled m1..mp since linear mixtures lose their roles.
    """
    gamma = as_float_matrix(gamma, "transform")
    p = design.n_cols
    if gamma.shape != (p, p):
        raise ValidationError(f"transform must be {p}x{p}, got {gamma.shape}")
    sv = np.linalg.svd(gamma, compute_uv=False)
    if sv.max() == 0.0 or sv.min() < RANK_TOL * sv.max():
        raise RankError("transform matrix is singular")
    labels = tuple(f"m{j + 1}" for j in range(p))
    return DesignMatrix(design.values @ gamma, labels)
