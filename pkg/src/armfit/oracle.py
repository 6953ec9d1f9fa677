"""Finite-population ground truth and exact randomization moments.

Everything here works on the complete potential-outcome table, so these
quantities are the reference values estimators are judged against: exact
means, population adjustment coefficients, the covariance formulas for
adjusted arm means, restricted-fit probability limits, and brute-force
moments over every complete-randomization assignment.

Population covariances use the 1/(N-1) convention throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._validation import RANK_TOL, as_float_matrix, as_float_vector, center_columns, freeze
from .design import Assignment, TreatmentStructure, enumerate_assignments
from .errors import RankError, ValidationError
from .estimators import ExperimentData
from .lsq import Restriction
from .special import chi2_cdf


@dataclass(frozen=True, eq=False)
class PotentialTable:
    """Complete N x Q potential-outcome table with centered covariates."""

    Y: np.ndarray
    X: np.ndarray
    structure: TreatmentStructure
    x_shift: np.ndarray | None = None

    def __post_init__(self):
        Y = as_float_matrix(self.Y, "Y")
        X = as_float_matrix(self.X, "X", allow_empty_cols=True)
        if Y.shape[0] != X.shape[0]:
            raise ValidationError(f"Y has {Y.shape[0]} rows, X has {X.shape[0]}")
        if Y.shape[1] != self.structure.n_arms:
            raise ValidationError(
                f"Y has {Y.shape[1]} columns, structure has {self.structure.n_arms} arms"
            )
        if Y.shape[0] != self.structure.n_units:
            raise ValidationError(
                f"table has {Y.shape[0]} units, structure has {self.structure.n_units}"
            )
        Xc, shift = center_columns(X)
        object.__setattr__(self, "Y", freeze(Y))
        object.__setattr__(self, "X", freeze(Xc))
        object.__setattr__(self, "x_shift", freeze(shift))

    @property
    def n_units(self) -> int:
        return self.Y.shape[0]

    @property
    def n_arms(self) -> int:
        return self.Y.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    def reveal(self, assignment: Assignment) -> ExperimentData:
        """Observed data under one assignment."""
        assignment.check_structure(self.structure)
        y_obs = self.Y[np.arange(self.n_units), assignment.z - 1]
        return ExperimentData.build(y_obs, assignment, self.X, self.structure)


def pop_means(table: PotentialTable) -> np.ndarray:
    """Finite-population average potential outcome per arm."""
    return table.Y.mean(axis=0)


def covariate_covariance(table: PotentialTable) -> np.ndarray:
    return table.X.T @ table.X / (table.n_units - 1)


def pop_gamma(table: PotentialTable) -> np.ndarray:
    """Population regression coefficients of each arm's potential outcome on
    the covariates, stacked arm-major (length J*Q)."""
    j, q = table.n_covariates, table.n_arms
    if j == 0:
        return np.zeros(0)
    s_xx = covariate_covariance(table)
    eig = np.linalg.eigvalsh(s_xx)
    if eig[0] < RANK_TOL * max(eig[-1], 0.0) or eig[-1] <= 0.0:
        raise RankError("covariate covariance matrix is singular")
    yc = table.Y - table.Y.mean(axis=0)
    s_xy = table.X.T @ yc / (table.n_units - 1)
    return np.linalg.solve(s_xx, s_xy).T.ravel()


def adjusted_outcome_covariance(table: PotentialTable, b) -> np.ndarray:
    """Covariance matrix across arms of the adjusted potential outcomes
    Y_i(q) - b_q' x_i."""
    q, j = table.n_arms, table.n_covariates
    b = as_float_vector(b, "b") if j else np.zeros(0)
    if b.shape[0] != j * q:
        raise ValidationError(f"b must have length {j * q}, got {b.shape[0]}")
    adjusted = table.Y - (table.X @ b.reshape(q, j).T if j else 0.0)
    centered = adjusted - adjusted.mean(axis=0)
    return centered.T @ centered / (table.n_units - 1)


def v_matrix(table: PotentialTable, b) -> np.ndarray:
    """Scaled covariance of the adjusted arm means under complete
    randomization: diag(S_qq / e_q) - S for the adjusted outcomes."""
    s_mat = adjusted_outcome_covariance(table, b)
    e = table.structure.proportions
    return np.diag(np.diag(s_mat) / e) - s_mat


def u_mu(rho_y, r_y, proportions, ybar) -> tuple[np.ndarray, np.ndarray]:
    """Mean-restriction projector and asymptotic offset.

    U = I - P rho' (rho P rho')^-1 rho with P = diag(1/e); mu is the offset
    the restricted arm means converge to when the mean restriction is off.
    """
    rho = np.atleast_2d(np.asarray(rho_y, dtype=float))
    r = np.atleast_1d(np.asarray(r_y, dtype=float))
    e = as_float_vector(proportions, "proportions")
    ybar = as_float_vector(ybar, "ybar")
    q = e.shape[0]
    if rho.shape[1] != q or ybar.shape[0] != q or r.shape[0] != rho.shape[0]:
        raise ValidationError("inconsistent shapes in mean-restriction inputs")
    pi_inv = np.diag(1.0 / e)
    mid = rho @ pi_inv @ rho.T
    core = pi_inv @ rho.T @ np.linalg.solve(mid, np.eye(rho.shape[0]))
    u = np.eye(q) - core @ rho
    mu = -core @ (rho @ ybar - r)
    return u, mu


def nu_factor(jh: int, threshold: float) -> float:
    """Variance shrinkage of the balance-truncated component:
    P(chi2_{jh+2} < a) / P(chi2_{jh} < a), in [0, 1]."""
    if jh < 1:
        raise ValidationError(f"jh must be at least 1, got {jh}")
    if not threshold > 0.0:
        raise ValidationError(f"threshold must be positive, got {threshold}")
    if math.isinf(threshold):
        return 1.0
    denom = chi2_cdf(threshold, jh)
    if denom == 0.0:
        return 0.0
    return chi2_cdf(threshold, jh + 2) / denom


def exact_randomization_moments(table: PotentialTable, estimator) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean and covariance of an estimator over all assignments.

    ``estimator`` maps an ``ExperimentData`` to a vector; the distribution
    is uniform over every complete-randomization assignment, obtained by
    full enumeration (pairwise-summed accumulation keeps the 1e-10 exactness
    targets over large enumerations).
    """
    assignments = enumerate_assignments(table.structure)
    values = np.stack([np.atleast_1d(np.asarray(estimator(table.reveal(a)), dtype=float))
                       for a in assignments])
    mean = values.mean(axis=0)
    centered = values - mean
    cov = centered.T @ centered / values.shape[0]
    return mean, cov


@dataclass(frozen=True, eq=False)
class TheoryQuantities:
    """Population limits implied by a restriction on the interacted fit."""

    gamma_r_limit: np.ndarray
    v_r: np.ndarray
    s_r: np.ndarray


def theory_quantities(table: PotentialTable, restriction: Restriction) -> TheoryQuantities:
    """Probability limit of the restricted adjustment coefficients and the
    covariance of the correspondingly adjusted arm means."""
    q, j = table.n_arms, table.n_covariates
    p = q + j * q
    gamma = pop_gamma(table)
    if restriction.is_empty:
        gamma_r = gamma
    else:
        if restriction.matrix.shape[1] != p:
            raise ValidationError(
                f"restriction has {restriction.matrix.shape[1]} columns, expected {p}"
            )
        theta = np.concatenate([pop_means(table), gamma])
        e = table.structure.proportions
        s_xx = covariate_covariance(table)
        block = np.kron(np.diag(e), s_xx) if j else np.zeros((0, 0))
        inv_blocks = np.zeros((p, p))
        inv_blocks[:q, :q] = np.diag(1.0 / e)
        if j:
            inv_blocks[q:, q:] = np.linalg.inv(block)
        R = restriction.matrix
        delta0 = np.linalg.inv(R @ inv_blocks @ R.T)
        gap = R @ theta - restriction.rhs
        if j:
            r_gamma_part = R[:, q:]
            gamma_r = gamma - np.linalg.solve(block, r_gamma_part.T @ (delta0 @ gap))
        else:
            gamma_r = gamma
    s_r = adjusted_outcome_covariance(table, gamma_r)
    e = table.structure.proportions
    v_r = np.diag(np.diag(s_r) / e) - s_r
    return TheoryQuantities(gamma_r_limit=freeze(gamma_r), v_r=freeze(v_r), s_r=freeze(s_r))


# ---------------------------------------------------------------------------
# Condition predicates on the potential-outcome table
# ---------------------------------------------------------------------------


def is_zero_correlation(table: PotentialTable, atol: float = 1e-10) -> bool:
    """Every arm's population covariate coefficient vector is zero."""
    gamma = pop_gamma(table)
    return bool(gamma.size == 0 or np.abs(gamma).max() <= atol)


def is_equal_correlation(table: PotentialTable, atol: float = 1e-10) -> bool:
    """All arms share one population covariate coefficient vector."""
    j = table.n_covariates
    if j == 0:
        return True
    gamma = pop_gamma(table).reshape(table.n_arms, j)
    return bool(np.abs(gamma - gamma[0]).max() <= atol)


def is_constant_effects(table: PotentialTable, atol: float = 1e-10) -> bool:
    """Unit-level effects are constant: Y_i(q) - Y_i(q') does not vary in i."""
    diffs = table.Y - table.Y[:, [0]]
    spread = diffs.max(axis=0) - diffs.min(axis=0)
    return bool(spread.max() <= atol)
