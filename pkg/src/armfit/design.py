"""Treatment structures and assignment generation.

Covers completely randomized designs, rerandomization with a Mahalanobis
balance criterion, exhaustive assignment enumeration for exact
randomization distributions, and two-level fractional subsets defined by
generator relations.

Randomness discipline: every stochastic operation takes an explicit 64-bit
seed and uses a counter-based generator (Philox) keyed through
``numpy.random.SeedSequence``. Attempt ``k`` of any repeated draw derives
its stream from ``(seed, k)``, so results are reproducible and independent
of scheduling. A plain complete randomization is attempt 0.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from ._validation import (
    RANK_TOL,
    as_float_matrix,
    as_int_vector,
    center_columns,
    check_centered,
    freeze,
)
from .errors import BalanceExhaustedError, RankError, ValidationError

ENUMERATION_LIMIT = 1_000_000


@dataclass(frozen=True)
class FactorSpec:
    """Two-level factor layout: Q = 2^K arms ordered lexicographically.

    Level index q (1-based) maps to a tuple in {-1, +1}^K with factor 1
    varying slowest and -1 preceding +1, so q=1 is the all-minus cell.
    """

    n_factors: int

    def __post_init__(self):
        if self.n_factors < 1:
            raise ValidationError(f"need at least one factor, got {self.n_factors}")

    @property
    def n_levels(self) -> int:
        return 2 ** self.n_factors

    def levels(self) -> tuple[tuple[int, ...], ...]:
        return tuple(itertools.product((-1, +1), repeat=self.n_factors))

    def level_tuple(self, q: int) -> tuple[int, ...]:
        if not 1 <= q <= self.n_levels:
            raise ValidationError(f"level index {q} outside 1..{self.n_levels}")
        return self.levels()[q - 1]

    def level_index(self, combo) -> int:
        combo = tuple(int(v) for v in combo)
        if len(combo) != self.n_factors or any(v not in (-1, 1) for v in combo):
            raise ValidationError(f"{combo} is not a valid {self.n_factors}-factor combination")
        idx = 0
        for v in combo:
            idx = 2 * idx + (1 if v == 1 else 0)
        return idx + 1


@dataclass(frozen=True)
class TreatmentStructure:
    """Arm layout of an experiment: group sizes and optional factor structure."""

    group_sizes: tuple[int, ...]
    factor_spec: FactorSpec | None = None

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.group_sizes)
        object.__setattr__(self, "group_sizes", sizes)
        if len(sizes) < 1 or any(n <= 0 for n in sizes):
            raise ValidationError(f"group sizes must be positive integers, got {sizes}")
        if self.factor_spec is not None and self.factor_spec.n_levels != len(sizes):
            raise ValidationError(
                f"{self.factor_spec.n_factors} factors imply "
                f"{self.factor_spec.n_levels} arms, got {len(sizes)} group sizes"
            )

    @property
    def n_arms(self) -> int:
        return len(self.group_sizes)

    @property
    def n_units(self) -> int:
        return sum(self.group_sizes)

    @property
    def proportions(self) -> np.ndarray:
        return np.asarray(self.group_sizes, dtype=float) / self.n_units


@dataclass(frozen=True, eq=False)
class Assignment:
    """A realized allocation: z[i] in 1..Q is the arm of unit i."""

    z: np.ndarray

    def __post_init__(self):
        z = as_int_vector(self.z, "z")
        if z.size == 0 or z.min() < 1:
            raise ValidationError("assignment must be a nonempty vector of arm indices >= 1")
        object.__setattr__(self, "z", freeze(z))

    def counts(self, n_arms: int) -> np.ndarray:
        return np.bincount(self.z, minlength=n_arms + 1)[1:]

    def check_structure(self, structure: TreatmentStructure) -> None:
        got = tuple(int(c) for c in self.counts(structure.n_arms))
        if self.z.max() > structure.n_arms or got != structure.group_sizes:
            raise ValidationError(
                f"assignment group counts {got} do not match structure {structure.group_sizes}"
            )


@dataclass(frozen=True, eq=False)
class BalanceFilter:
    """Mahalanobis balance criterion: contrast rows G and threshold a."""

    contrasts: np.ndarray
    threshold: float = math.inf

    def __post_init__(self):
        G = as_float_matrix(self.contrasts, "contrasts")
        H, Q = G.shape
        if H > Q - 1:
            raise ValidationError(f"at most {Q - 1} independent contrasts possible, got {H}")
        rowsums = np.abs(G.sum(axis=1))
        if rowsums.max() > 1e-10 * (1.0 + np.abs(G).max()):
            raise ValidationError("every contrast row must sum to zero")
        sv = np.linalg.svd(G, compute_uv=False)
        if sv.max() == 0.0 or sv.min() < RANK_TOL * sv.max():
            raise RankError("contrast rows are linearly dependent")
        if not self.threshold >= 0.0:
            raise ValidationError(f"threshold must be nonnegative, got {self.threshold}")
        object.__setattr__(self, "contrasts", freeze(G))


def _attempt_rng(seed: int, attempt: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(attempt),))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *path: int) -> int:
    """Deterministic 63-bit sub-seed for nested stochastic stages."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def complete_randomize(structure: TreatmentStructure, seed: int) -> Assignment:
    """Uniform draw over all allocations with the prescribed group sizes."""
    return _randomize_attempt(structure, seed, 0)


def _randomize_attempt(structure: TreatmentStructure, seed: int, attempt: int) -> Assignment:
    rng = _attempt_rng(seed, attempt)
    z = np.repeat(np.arange(1, structure.n_arms + 1, dtype=np.int64), structure.group_sizes)
    rng.shuffle(z)
    return Assignment(z)


def count_assignments(structure: TreatmentStructure) -> int:
    """Multinomial coefficient N! / prod_q N_q!."""
    remaining = structure.n_units
    total = 1
    for n_q in structure.group_sizes:
        total *= math.comb(remaining, n_q)
        remaining -= n_q
    return total


def enumerate_assignments(structure: TreatmentStructure) -> list[Assignment]:
    """Every distinct assignment exactly once, in a deterministic order.

    Positions for each arm are chosen in ascending combination order, arm
    by arm. Refuses when the multinomial count exceeds ``ENUMERATION_LIMIT``.
    """
    total = count_assignments(structure)
    if total > ENUMERATION_LIMIT:
        raise ValidationError(
            f"{total} assignments exceed the enumeration limit of {ENUMERATION_LIMIT}"
        )
    n = structure.n_units
    sizes = structure.group_sizes
    out: list[Assignment] = []
    z = np.empty(n, dtype=np.int64)

    def fill(arm: int, free: tuple[int, ...]) -> None:
        if arm == len(sizes) - 1:
            z[list(free)] = arm + 1
            out.append(Assignment(z.copy()))
            return
        for chosen in itertools.combinations(free, sizes[arm]):
            z[list(chosen)] = arm + 1
            taken = set(chosen)
            fill(arm + 1, tuple(i for i in free if i not in taken))

    fill(0, tuple(range(n)))
    assert len(out) == total
    return out


def _balance_covariance(structure: TreatmentStructure, X: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Exact complete-randomization covariance of the contrast-aggregated means."""
    n = structure.n_units
    s_xx = X.T @ X / (n - 1)
    sv = np.linalg.svd(s_xx, compute_uv=False)
    if sv.max() == 0.0 or sv.min() < RANK_TOL * sv.max():
        raise RankError("covariate covariance matrix is singular")
    pi_inv = np.diag(1.0 / structure.proportions)
    return np.kron(G @ pi_inv @ G.T, s_xx) / n


def mahalanobis_imbalance(assignment: Assignment, X, contrasts) -> float:
    """Mahalanobis distance of the contrast-aggregated covariate means.

    Uses the exact finite-population complete-randomization covariance of
    the aggregated means, not a sample estimate. X must be centered.
    """
    X = as_float_matrix(X, "X")
    check_centered(X, "X")
    G = BalanceFilter(contrasts).contrasts
    n, _ = X.shape
    if assignment.z.size != n:
        raise ValidationError(f"assignment has {assignment.z.size} units, X has {n} rows")
    n_arms = G.shape[1]
    counts = assignment.counts(n_arms)
    if assignment.z.max() > n_arms or counts.min() == 0:
        raise ValidationError("assignment arms do not match the contrast dimension")
    structure = TreatmentStructure(tuple(int(c) for c in counts))
    cov = _balance_covariance(structure, X, G)
    group_means = np.stack([X[assignment.z == q].mean(axis=0) for q in range(1, n_arms + 1)])
    delta = (G @ group_means).ravel()
    return float(delta @ np.linalg.solve(cov, delta))


def rerandomize(
    structure: TreatmentStructure,
    X,
    balance: BalanceFilter,
    seed: int,
    max_tries: int = 10_000,
) -> tuple[Assignment, int]:
    """Redraw complete randomizations until the balance criterion accepts.

    Returns the accepted assignment and the number of attempts used.
    Attempt k draws from the (seed, k) stream, so a threshold of infinity
    reproduces ``complete_randomize(structure, seed)`` bit for bit.
    """
    if max_tries < 1:
        raise ValidationError(f"max_tries must be at least 1, got {max_tries}")
    X = as_float_matrix(X, "X")
    if X.shape[0] != structure.n_units:
        raise ValidationError(f"X has {X.shape[0]} rows, structure has {structure.n_units} units")
    Xc, _ = center_columns(X)
    G = balance.contrasts
    if G.shape[1] != structure.n_arms:
        raise ValidationError(
            f"balance contrasts have {G.shape[1]} columns, structure has {structure.n_arms} arms"
        )
    unconstrained = math.isinf(balance.threshold)
    if not unconstrained:
        cov = _balance_covariance(structure, Xc, G)
        cov_chol = np.linalg.cholesky(cov)
    arange = np.arange(1, structure.n_arms + 1)
    for attempt in range(max_tries):
        assignment = _randomize_attempt(structure, seed, attempt)
        if unconstrained:
            return assignment, attempt + 1
        group_means = np.stack([Xc[assignment.z == q].mean(axis=0) for q in arange])
        delta = (G @ group_means).ravel()
        w = np.linalg.solve(cov_chol, delta)
        if float(w @ w) <= balance.threshold:
            return assignment, attempt + 1
    raise BalanceExhaustedError(max_tries, balance.threshold)


def fractional_subset(n_factors: int, defining_relations) -> tuple[tuple[int, ...], ...]:
    """Treatment combinations of a 2^(K-p) fraction fixed by generator relations.

    Each relation is a pair (target factor, generator factors) and keeps the
    combinations where the target level equals the product of the generator
    levels. Returns the surviving combinations in lexicographic order.
    """
    if n_factors < 1:
        raise ValidationError(f"need at least one factor, got {n_factors}")
    relations = []
    seen_targets = set()
    for target, generators in defining_relations:
        target = int(target)
        gens = tuple(sorted(int(g) for g in generators))
        if not 1 <= target <= n_factors:
            raise ValidationError(f"target factor {target} outside 1..{n_factors}")
        if target in seen_targets:
            raise ValidationError(f"factor {target} appears as target in two relations")
        if not gens:
            raise ValidationError("a defining relation needs at least one generator factor")
        if any(not 1 <= g <= n_factors for g in gens) or target in gens:
            raise ValidationError(f"invalid generators {gens} for target {target}")
        seen_targets.add(target)
        relations.append((target, gens))

    def satisfies(combo: tuple[int, ...]) -> bool:
        return all(
            combo[t - 1] == math.prod(combo[g - 1] for g in gens) for t, gens in relations
        )

    kept = tuple(
        combo
        for combo in itertools.product((-1, +1), repeat=n_factors)
        if satisfies(combo)
    )
    expected = 2 ** (n_factors - len(relations))
    if len(kept) != expected:
        raise ValidationError(
            f"defining relations are contradictory or redundant: "
            f"{len(kept)} combinations survive, expected {expected}"
        )
    return kept
