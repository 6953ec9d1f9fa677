"""Two-level factorial effects: contrast construction and regression.

Effects are keyed by subsets of factors, globally ordered by size and then
lexicographically, and labeled with factor letters (factor 1 = "A").

Two codings are supported. Under plus-minus-one coding the effect of a
subset is the classic orthogonal contrast of arm means. Under zero-one
(baseline) coding effects compare arms against the all-low cell and the
contrast rows come from a unit lower-triangular Kronecker construction.

The regression path is implemented once, as a restricted fit of the
interacted arm-level specification; the explicitly factor-coded ordinary
fit exists only in the test suite as a cross-check.
"""
from __future__ import annotations

import itertools
import string
from dataclasses import dataclass

import numpy as np

from .design import Assignment, FactorSpec, TreatmentStructure
from .errors import ValidationError
from .estimators import (
    EstimationResult,
    ExperimentData,
    estimate,
    restriction_separable,
)
from .lsq import Restriction

MAX_FACTORS = 20

CODING_PM1 = "pm1"
CODING_01 = "01"
_CODING_ALIASES = {
    "pm1": CODING_PM1, "+-1": CODING_PM1, "plusminusone": CODING_PM1, "standard": CODING_PM1,
    "01": CODING_01, "zeroone": CODING_01, "baseline": CODING_01,
}


def normalize_coding(coding: str) -> str:
    c = _CODING_ALIASES.get(str(coding).lower())
    if c is None:
        raise ValidationError(f"unknown coding {coding!r}; expected 'pm1' or '01'")
    return c


def canonical_subsets(n_factors: int) -> tuple[tuple[int, ...], ...]:
    """All non-empty factor subsets, sorted by size then lexicographically."""
    subsets = itertools.chain.from_iterable(
        itertools.combinations(range(1, n_factors + 1), size)
        for size in range(1, n_factors + 1)
    )
    return tuple(subsets)


def subset_label(subset) -> str:
    return "".join(string.ascii_uppercase[k - 1] for k in sorted(subset))


def parse_subset_label(label: str, n_factors: int) -> tuple[int, ...]:
    label = label.strip().upper()
    if not label:
        raise ValidationError("empty factor subset label")
    factors = []
    for ch in label:
        k = string.ascii_uppercase.find(ch) + 1
        if k < 1 or k > n_factors:
            raise ValidationError(
                f"factor letter {ch!r} outside A..{string.ascii_uppercase[n_factors - 1]}"
            )
        factors.append(k)
    if len(set(factors)) != len(factors):
        raise ValidationError(f"repeated factor letter in subset label {label!r}")
    return tuple(sorted(factors))


def _check_n_factors(n_factors: int) -> None:
    if not 1 <= n_factors <= MAX_FACTORS:
        raise ValidationError(f"factor count must lie in 1..{MAX_FACTORS}, got {n_factors}")


def standard_contrasts(n_factors: int) -> np.ndarray:
    """Contrast rows of all plus-minus-one factorial effects, one per subset.

    Rows follow the canonical subset order; entries are exactly
    +-2^(1-K), rows are mutually orthogonal and orthogonal to ones.
    """
    _check_n_factors(n_factors)
    levels = np.array(FactorSpec(n_factors).levels(), dtype=float)
    scale = 2.0 ** (1 - n_factors)
    rows = [
        scale * np.prod(levels[:, [k - 1 for k in subset]], axis=1)
        for subset in canonical_subsets(n_factors)
    ]
    return np.array(rows)


def baseline_contrasts(n_factors: int) -> tuple[np.ndarray, np.ndarray]:
    """The zero-one coding map and its effect rows.

    Returns (gamma0, c0) where gamma0 is the Kronecker power of
    [[1, 0], [-1, 1]] (unit lower triangular, determinant one) and c0 is
    its rows 2..2^K; each row of c0 sums to zero.
    """
    _check_n_factors(n_factors)
    block = np.array([[1.0, 0.0], [-1.0, 1.0]])
    out = np.array([[1.0]])
    for _ in range(n_factors):
        out = np.kron(out, block)
    return out, out[1:]


def _baseline_row_index(subset, n_factors: int) -> int:
    # Rows of the Kronecker power are indexed by inclusion bits, factor 1
    # as the most significant bit.
    return sum(2 ** (n_factors - k) for k in subset)


def effect_contrast(n_factors: int, subset, coding: str = CODING_PM1) -> np.ndarray:
    """Contrast row extracting one factorial effect from the arm means."""
    _check_n_factors(n_factors)
    subset = tuple(sorted(int(k) for k in subset))
    if not subset or any(not 1 <= k <= n_factors for k in subset) or len(set(subset)) != len(subset):
        raise ValidationError(f"{subset} is not a valid non-empty factor subset")
    coding = normalize_coding(coding)
    if coding == CODING_PM1:
        levels = np.array(FactorSpec(n_factors).levels(), dtype=float)
        return 2.0 ** (1 - n_factors) * np.prod(levels[:, [k - 1 for k in subset]], axis=1)
    gamma0, _ = baseline_contrasts(n_factors)
    return gamma0[_baseline_row_index(subset, n_factors)].copy()


def _mean_row(n_factors: int, subset, coding: str) -> np.ndarray:
    """Like effect_contrast but also defined for the empty subset."""
    if subset:
        return effect_contrast(n_factors, subset, coding)
    if coding == CODING_PM1:
        return np.full(2 ** n_factors, 2.0 ** (1 - n_factors))
    row = np.zeros(2 ** n_factors)
    row[0] = 1.0
    return row


@dataclass(frozen=True)
class EffectSet:
    """Which factorial effects enter the mean model and which interactions
    are covariate-adjusted.

    ``interest`` holds the non-empty subsets whose effects the regression
    carries; ``adjust`` holds the subsets (possibly including the empty
    subset, for a common covariate term) whose interactions with the
    covariates are included.
    """

    n_factors: int
    interest: tuple[tuple[int, ...], ...]
    adjust: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        _check_n_factors(self.n_factors)
        interest = _canonicalize(self.interest, self.n_factors, allow_empty_subset=False)
        adjust = _canonicalize(self.adjust, self.n_factors, allow_empty_subset=True)
        if not interest:
            raise ValidationError("the effect set must contain at least one subset of interest")
        object.__setattr__(self, "interest", interest)
        object.__setattr__(self, "adjust", adjust)

    @classmethod
    def saturated(cls, n_factors: int, adjustment: str = "none") -> "EffectSet":
        """All effects; adjustment is 'none', 'additive', or 'interacted'."""
        return cls.unsaturated(n_factors, canonical_subsets(n_factors), adjustment)

    @classmethod
    def unsaturated(cls, n_factors: int, interest, adjustment: str = "none") -> "EffectSet":
        interest = _canonicalize(interest, n_factors, allow_empty_subset=False)
        if adjustment == "none":
            adjust: tuple = ()
        elif adjustment == "additive":
            adjust = ((),)
        elif adjustment == "interacted":
            adjust = ((),) + interest
        else:
            raise ValidationError(
                f"unknown adjustment {adjustment!r}; expected none, additive, or interacted"
            )
        return cls(n_factors, interest, adjust)

    @property
    def nuisance(self) -> tuple[tuple[int, ...], ...]:
        keep = set(self.interest)
        return tuple(s for s in canonical_subsets(self.n_factors) if s not in keep)

    @property
    def nuisance_adjust(self) -> tuple[tuple[int, ...], ...]:
        keep = set(self.adjust)
        universe = ((),) + canonical_subsets(self.n_factors)
        return tuple(s for s in universe if s not in keep)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(subset_label(s) for s in self.interest)


def _canonicalize(subsets, n_factors: int, allow_empty_subset: bool):
    seen = set()
    for s in subsets:
        s = tuple(sorted(int(k) for k in s))
        if len(set(s)) != len(s) or any(not 1 <= k <= n_factors for k in s):
            raise ValidationError(f"{s} is not a valid subset of 1..{n_factors}")
        if not s and not allow_empty_subset:
            raise ValidationError("subsets of interest must be non-empty")
        if s in seen:
            raise ValidationError(f"subset {subset_label(s) or 'empty'} listed twice")
        seen.add(s)
    order = {s: i for i, s in enumerate(((),) + canonical_subsets(n_factors))}
    return tuple(sorted(seen, key=order.__getitem__))


def unsaturated_restriction(
    effects: EffectSet, coding: str, n_covariates: int
) -> Restriction:
    """Restriction pinning the omitted effects and omitted interactions to zero.

    Omitted mean-model effects restrict the arm means through their contrast
    rows; omitted covariate interactions restrict the interaction
    coefficients through the same rows Kronecker the covariate identity.
    """
    coding = normalize_coding(coding)
    k = effects.n_factors
    n_arms = 2 ** k
    rho_y = (
        np.array([_mean_row(k, s, coding) for s in effects.nuisance])
        if effects.nuisance
        else None
    )
    rho_gamma = None
    if n_covariates > 0 and effects.nuisance_adjust:
        rows = np.array([_mean_row(k, s, coding) for s in effects.nuisance_adjust])
        rho_gamma = np.kron(rows, np.eye(n_covariates))
    return restriction_separable(
        rho_y, None, rho_gamma, None, n_arms=n_arms, n_covariates=n_covariates
    )


@dataclass(frozen=True, eq=False)
class FactorialResult:
    """Factorial-effect estimates extracted from a fitted regression."""

    effects: dict
    cov: np.ndarray
    labels: tuple[str, ...]
    coding: str
    effect_set: EffectSet
    fit: EstimationResult

    @property
    def estimates(self) -> np.ndarray:
        return np.array([self.effects[s] for s in self.effect_set.interest])

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


def factor_regress(
    data: ExperimentData, effects: EffectSet, coding: str = CODING_PM1
) -> FactorialResult:
    """Estimate the selected factorial effects with covariate adjustment.

    Fits the interacted arm-level regression under the restriction implied
    by the omitted terms and extracts the effects by contrast rows; this
    equals the directly factor-coded ordinary fit.
    """
    coding = normalize_coding(coding)
    spec = data.structure.factor_spec
    if spec is None:
        raise ValidationError("factor_regress needs a structure with a factor layout")
    if spec.n_factors != effects.n_factors:
        raise ValidationError(
            f"effect set is for {effects.n_factors} factors, data has {spec.n_factors}"
        )
    restriction = unsaturated_restriction(effects, coding, data.n_covariates)
    rows = np.array([_mean_row(effects.n_factors, s, coding) for s in effects.interest])
    result = estimate(data, "L", restriction if not restriction.is_empty else None, rows)
    values = dict(zip(effects.interest, result.tau_hat))
    return FactorialResult(
        effects=values,
        cov=result.tau_cov,
        labels=effects.labels,
        coding=coding,
        effect_set=effects,
        fit=result,
    )


def factor_levels_to_assignment(levels, spec: FactorSpec) -> Assignment:
    """Map an N x K matrix of factor levels in {-1, +1} to arm indices."""
    arr = np.asarray(levels)
    if arr.ndim != 2 or arr.shape[1] != spec.n_factors:
        raise ValidationError(
            f"factor level matrix must have {spec.n_factors} columns, got shape {arr.shape}"
        )
    z = np.array([spec.level_index(row) for row in arr], dtype=np.int64)
    return Assignment(z)


def assignment_to_factor_levels(assignment: Assignment, spec: FactorSpec) -> np.ndarray:
    levels = np.array(spec.levels(), dtype=np.int64)
    return levels[assignment.z - 1]


def factorial_structure(group_sizes) -> TreatmentStructure:
    sizes = tuple(int(n) for n in group_sizes)
    k = len(sizes).bit_length() - 1
    if 2 ** k != len(sizes):
        raise ValidationError(f"{len(sizes)} group sizes is not a power of two")
    return TreatmentStructure(sizes, factor_spec=FactorSpec(k))
