"""Scikit-learn style estimator classes over the functional core.

Both estimators follow the usual conventions: constructor arguments are
plain hyperparameters (so ``get_params``/``set_params``/``clone`` work),
``fit`` validates inputs and stores results in trailing-underscore
attributes, and ``predict`` returns model-implied outcomes.

The fit signature takes the outcome first: randomization inference has no
feature/target split, the regressors are the assignment and covariates.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .design import FactorSpec, TreatmentStructure
from .errors import ValidationError
from .estimators import (
    ExperimentData,
    estimate,
    restriction_equal_correlation,
    restriction_zero_correlation,
)
from .factorial import (
    EffectSet,
    canonical_subsets,
    factor_levels_to_assignment,
    factor_regress,
    parse_subset_label,
)
from .lsq import Restriction


class _FittedPredictMixin:
    def _predict_arms(self, z, X=None):
        if not hasattr(self, "y_hat_"):
            raise ValidationError("estimator is not fitted yet")
        z = np.asarray(z, dtype=np.int64)
        q = self.y_hat_.shape[0]
        if z.size and (z.min() < 1 or z.max() > q):
            raise ValidationError(f"arm indices must lie in 1..{q}")
        out = self.y_hat_[z - 1]
        j = self.gamma_hat_.shape[0] // q if q else 0
        if X is not None and j:
            X = np.asarray(X, dtype=float) - self.x_shift_
            gamma = self.gamma_hat_.reshape(q, j)
            out = out + np.einsum("ij,ij->i", X, gamma[z - 1])
        return out


class TreatmentEffectEstimator(_FittedPredictMixin, BaseEstimator):
    """Arm-mean contrasts by unadjusted, additive, or interacted regression.

    Parameters
    ----------
    spec : {"N", "F", "L"}
        Unadjusted, additive, or per-arm interacted covariate adjustment.
    restriction : None, "zero_correlation", "equal_correlation", or Restriction
        Optional equality restriction on the interacted coefficients
        (requires ``spec="L"``).
    contrast : array-like of shape (H, Q), optional
        Rows must sum to zero. Defaults to each arm versus arm 1.
    """

    def __init__(self, spec="L", restriction=None, contrast=None):
        self.spec = spec
        self.restriction = restriction
        self.contrast = contrast

    def fit(self, y, z, X=None):
        data = ExperimentData.build(y, z, X)
        q, j = data.n_arms, data.n_covariates
        restriction = self.restriction
        if isinstance(restriction, str):
            name = restriction.lower()
            if name in ("zero", "zero_correlation"):
                restriction = restriction_zero_correlation(q, j)
            elif name in ("equal", "equal_correlation"):
                restriction = restriction_equal_correlation(q, j)
            else:
                raise ValidationError(f"unknown restriction name {restriction!r}")
        elif restriction is not None and not isinstance(restriction, Restriction):
            raise ValidationError("restriction must be None, a name, or a Restriction")
        result = estimate(data, self.spec, restriction, self.contrast)
        self.result_ = result
        self.tau_ = result.tau_hat
        self.tau_cov_ = result.tau_cov
        self.std_errors_ = result.std_errors
        self.y_hat_ = result.y_hat
        self.gamma_hat_ = result.gamma_hat
        self.x_shift_ = result.x_shift
        self.n_arms_ = q
        return self

    def predict(self, z, X=None):
        """Model-implied outcomes for arm indices ``z`` and covariates ``X``."""
        return self._predict_arms(z, X)


class FactorialEffectEstimator(_FittedPredictMixin, BaseEstimator):
    """Factorial effects from a two-level design, with covariate adjustment.

    Parameters
    ----------
    effects : "saturated" or iterable of subset labels like ("A", "AB")
        Which effects enter the mean model.
    adjustment : {"none", "additive", "interacted"}
        How covariates enter.
    coding : {"pm1", "01"}
        Effect parameterization: orthogonal contrasts or baseline effects.
    """

    def __init__(self, effects="saturated", adjustment="none", coding="pm1"):
        self.effects = effects
        self.adjustment = adjustment
        self.coding = coding

    @staticmethod
    def _as_levels(factors) -> np.ndarray:
        factors = np.asarray(factors)
        if factors.ndim != 2:
            raise ValidationError("factors must be an N x K matrix of two-level codes")
        values = set(np.unique(factors).tolist())
        if values <= {0, 1, 0.0, 1.0}:
            factors = 2 * factors.astype(np.int64) - 1
        return factors

    def fit(self, y, factors, X=None):
        levels = self._as_levels(factors)
        k = levels.shape[1]
        spec = FactorSpec(k)
        assignment = factor_levels_to_assignment(levels, spec)
        counts = assignment.counts(spec.n_levels)
        if counts.min() == 0:
            missing = spec.level_tuple(int(np.flatnonzero(counts == 0)[0]) + 1)
            raise ValidationError(f"no units at factor combination {missing}")
        structure = TreatmentStructure(tuple(int(c) for c in counts), factor_spec=spec)
        data = ExperimentData.build(y, assignment, X, structure)
        if self.effects == "saturated":
            interest = canonical_subsets(k)
        else:
            interest = tuple(
                parse_subset_label(lbl, k) if isinstance(lbl, str) else tuple(lbl)
                for lbl in self.effects
            )
        effect_set = EffectSet.unsaturated(k, interest, self.adjustment)
        result = factor_regress(data, effect_set, self.coding)
        self.result_ = result
        self.n_factors_ = k
        self.effects_ = dict(zip(result.labels, result.estimates))
        self.effect_cov_ = result.cov
        self.std_errors_ = result.std_errors
        self.y_hat_ = result.fit.y_hat
        self.gamma_hat_ = result.fit.gamma_hat
        self.x_shift_ = result.fit.x_shift
        return self

    def predict(self, factors, X=None):
        """Model-implied outcomes for factor levels ``factors`` and covariates ``X``."""
        if not hasattr(self, "n_factors_"):
            raise ValidationError("estimator is not fitted yet")
        levels = self._as_levels(factors)
        assignment = factor_levels_to_assignment(levels, FactorSpec(self.n_factors_))
        return self._predict_arms(assignment.z, X)
