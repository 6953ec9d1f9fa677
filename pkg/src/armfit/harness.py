"""Deterministic Monte Carlo studies over fixed potential-outcome tables.

A study fixes one table, draws assignments (complete randomization or
balance-constrained), runs a list of estimator specifications per draw, and
aggregates bias, spread, mean estimated standard error, and interval
coverage against the exact finite-population targets.

Per-replication seeds are derived by hashing (master seed, replication
index) through ``numpy.random.SeedSequence``, never by sharing a sequential
stream, so results do not depend on execution order or thread count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import (
    BalanceFilter,
    FactorSpec,
    TreatmentStructure,
    complete_randomize,
    derive_seed,
    enumerate_assignments,
    fractional_subset,
    rerandomize,
)
from .errors import ValidationError
from .estimators import (
    EstimationResult,
    contrast_matrix,
    default_contrast,
    estimate,
    normalize_kind,
    restriction_equal_correlation,
    restriction_zero_correlation,
)
from .factorial import (
    EffectSet,
    _mean_row,
    canonical_subsets,
    normalize_coding,
    subset_label,
    unsaturated_restriction,
)
from .lsq import Restriction
from .oracle import PotentialTable, pop_means


class StudyError(RuntimeError):
    """An estimator failed inside a study; carries the failing location."""

    def __init__(self, replication: int, spec_name: str, original: Exception):
        super().__init__(
            f"estimator failed at replication {replication} in spec {spec_name!r}: {original}"
        )
        self.replication = replication
        self.spec_name = spec_name


@dataclass(frozen=True)
class _Prepared:
    kind: str
    restriction: Restriction | None
    rows: np.ndarray
    labels: tuple[str, ...]


@dataclass(frozen=True)
class TreatmentSpec:
    """Arm-level estimation spec: kind N/F/L, optional named restriction,
    and the contrast rows to report."""

    name: str
    kind: str
    restriction: object = None  # None | "zero" | "equal" | Restriction
    contrast: object = None
    contrast_labels: tuple[str, ...] | None = None

    def prepare(self, table: PotentialTable) -> _Prepared:
        q, j = table.n_arms, table.n_covariates
        restriction = self.restriction
        if isinstance(restriction, str):
            if restriction == "zero":
                restriction = restriction_zero_correlation(q, j)
            elif restriction == "equal":
                restriction = restriction_equal_correlation(q, j)
            else:
                raise ValidationError(
                    f"unknown named restriction {restriction!r}; expected 'zero' or 'equal'"
                )
        rows = contrast_matrix(
            self.contrast if self.contrast is not None else default_contrast(q), q
        )
        labels = self.contrast_labels or tuple(f"c{i + 1}" for i in range(rows.shape[0]))
        if len(labels) != rows.shape[0]:
            raise ValidationError("one contrast label per contrast row is required")
        return _Prepared(normalize_kind(self.kind), restriction, rows, tuple(labels))


@dataclass(frozen=True)
class FactorialSpec:
    """Factorial estimation spec: an effect set, a coding, and the effect
    subsets to report (defaults to every effect; omitted effects are pinned
    at zero by the fitted restriction)."""

    name: str
    effects: EffectSet
    coding: str = "pm1"
    report: tuple = ()

    def prepare(self, table: PotentialTable) -> _Prepared:
        spec = table.structure.factor_spec
        if spec is None or spec.n_factors != self.effects.n_factors:
            raise ValidationError(
                f"spec {self.name!r} needs a table with {self.effects.n_factors} factors"
            )
        coding = normalize_coding(self.coding)
        k = self.effects.n_factors
        report = tuple(tuple(sorted(s)) for s in self.report) or canonical_subsets(k)
        restriction = unsaturated_restriction(self.effects, coding, table.n_covariates)
        rows = np.array([_mean_row(k, s, coding) for s in report])
        labels = tuple(subset_label(s) for s in report)
        return _Prepared("L", None if restriction.is_empty else restriction, rows, labels)


@dataclass(frozen=True)
class StudyConfig:
    table: PotentialTable
    specs: tuple
    replications: int
    seed: int
    balance: BalanceFilter | None = None
    mode: str = "sample"  # or "enumerate"
    max_tries: int = 100_000

    def __post_init__(self):
        if self.mode not in ("sample", "enumerate"):
            raise ValidationError(f"unknown study mode {self.mode!r}")
        if self.mode == "sample" and self.replications < 1:
            raise ValidationError(f"replications must be at least 1, got {self.replications}")
        if not self.specs:
            raise ValidationError("a study needs at least one estimator spec")


@dataclass(frozen=True)
class SummaryRow:
    spec: str
    contrast: str
    truth: float
    mc_mean: float
    bias: float
    mc_sd: float
    mean_se: float
    coverage95: float
    replications: int


@dataclass(frozen=True, eq=False)
class StudySummary:
    rows: tuple[SummaryRow, ...]
    row_keys: tuple[tuple[str, str], ...]
    truths: np.ndarray
    estimates: np.ndarray  # replications x rows
    std_errors: np.ndarray

    def row(self, spec: str, contrast: str) -> SummaryRow:
        for r in self.rows:
            if r.spec == spec and r.contrast == contrast:
                return r
        raise KeyError(f"no summary row for spec {spec!r}, contrast {contrast!r}")

    def column(self, spec: str, contrast: str) -> np.ndarray:
        idx = self.row_keys.index((spec, contrast))
        return self.estimates[:, idx]

    @staticmethod
    def merge(*parts: "StudySummary") -> "StudySummary":
        reps = {p.estimates.shape[0] for p in parts}
        if len(reps) != 1:
            raise ValidationError("cannot merge summaries with different replication counts")
        return StudySummary(
            rows=tuple(r for p in parts for r in p.rows),
            row_keys=tuple(k for p in parts for k in p.row_keys),
            truths=np.concatenate([p.truths for p in parts]),
            estimates=np.hstack([p.estimates for p in parts]),
            std_errors=np.hstack([p.std_errors for p in parts]),
        )


def _run_prepared(data, prep: _Prepared, cache: dict) -> EstimationResult:
    return estimate(data, prep.kind, prep.restriction, prep.rows, _cache=cache)


def run_study(config: StudyConfig) -> StudySummary:
    """Execute a study and aggregate it into a summary.

    Any estimator-level error aborts the study, wrapped in ``StudyError``
    with the replication index and spec name.
    """
    table = config.table
    prepared = [(spec, spec.prepare(table)) for spec in config.specs]
    keys: list[tuple[str, str]] = []
    truths: list[float] = []
    ybar = pop_means(table)
    for spec, prep in prepared:
        for label, row in zip(prep.labels, prep.rows):
            keys.append((spec.name, label))
            truths.append(float(row @ ybar))
    truths_arr = np.array(truths)

    if config.mode == "enumerate":
        assignments = enumerate_assignments(table.structure)
        n_reps = len(assignments)
    else:
        assignments = None
        n_reps = config.replications

    estimates = np.empty((n_reps, len(keys)))
    std_errors = np.empty((n_reps, len(keys)))
    for rep in range(n_reps):
        if assignments is not None:
            assignment = assignments[rep]
        else:
            rep_seed = derive_seed(config.seed, rep)
            if config.balance is None:
                assignment = complete_randomize(table.structure, rep_seed)
            else:
                assignment, _ = rerandomize(
                    table.structure, table.X, config.balance, rep_seed, config.max_tries
                )
        data = table.reveal(assignment)
        cache: dict = {}
        col = 0
        for spec, prep in prepared:
            try:
                result = _run_prepared(data, prep, cache)
            except Exception as exc:
                raise StudyError(rep, spec.name, exc) from exc
            width = prep.rows.shape[0]
            estimates[rep, col:col + width] = result.tau_hat
            std_errors[rep, col:col + width] = result.std_errors
            col += width

    rows = []
    for i, (spec_name, label) in enumerate(keys):
        est = estimates[:, i]
        se = std_errors[:, i]
        mc_mean = float(est.mean())
        mc_sd = float(est.std(ddof=1)) if n_reps > 1 else 0.0
        covered = np.abs(est - truths_arr[i]) <= 1.96 * se
        rows.append(
            SummaryRow(
                spec=spec_name,
                contrast=label,
                truth=float(truths_arr[i]),
                mc_mean=mc_mean,
                bias=mc_mean - float(truths_arr[i]),
                mc_sd=mc_sd,
                mean_se=float(se.mean()),
                coverage95=float(covered.mean()),
                replications=n_reps,
            )
        )
    return StudySummary(
        rows=tuple(rows),
        row_keys=tuple(keys),
        truths=truths_arr,
        estimates=estimates,
        std_errors=std_errors,
    )


# ---------------------------------------------------------------------------
# Built-in data generating processes
# ---------------------------------------------------------------------------

SECTION6_GROUP_SIZES = (22, 23, 24, 31)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def dgp_section6(seed: int, beta_variant: str = "heterogeneous", scale: int = 1) -> PotentialTable:
    """Built-in 2x2 benchmark table: 20 standard-normal covariates, three
    arms with normal outcomes around arm-specific linear signals, and the
    all-low arm defined so unit-level interaction effects vanish exactly.

    ``beta_variant`` 'heterogeneous' uses slopes (1, 0, -1) across the
    generated arms; 'equal' uses all-ones slopes. ``scale`` multiplies the
    (22, 23, 24, 31) group sizes.
    """
    if beta_variant not in ("heterogeneous", "equal"):
        raise ValidationError(
            f"unknown beta variant {beta_variant!r}; expected 'heterogeneous' or 'equal'"
        )
    if scale < 1:
        raise ValidationError(f"scale must be at least 1, got {scale}")
    sizes = tuple(scale * s for s in SECTION6_GROUP_SIZES)
    n, j = sum(sizes), 20
    rng = _rng(seed)
    x = rng.standard_normal((n, j))
    if beta_variant == "heterogeneous":
        slopes = [np.ones(j), np.zeros(j), -np.ones(j)]
    else:
        slopes = [np.ones(j), np.ones(j), np.ones(j)]
    y = np.empty((n, 4))
    # Columns in lexicographic cell order: (-,-), (-,+), (+,-), (+,+).
    for col, beta in zip((1, 2, 3), slopes):
        y[:, col] = x @ beta + rng.standard_normal(n)
    y[:, 0] = y[:, 2] + y[:, 1] - y[:, 3]
    structure = TreatmentStructure(sizes, factor_spec=FactorSpec(2))
    return PotentialTable(y, x, structure)


FRACTIONAL_RELATION = ((3, (1, 2)),)


def dgp_fractional(seed: int, scenario: str = "I", group_sizes=None) -> PotentialTable:
    """Built-in 2^3 benchmark table for the fractional-design comparison.

    One covariate with variance 4 and one unit-level noise draw shared
    across cells; cell means follow the scenario's effect pattern and each
    cell's stochastic part is de-meaned so the finite-population effects are
    exact: scenario 'I' has all interactions zero, scenario 'II' keeps the
    interaction between the first two factors at zero but not the rest.
    """
    if scenario not in ("I", "II"):
        raise ValidationError(f"unknown scenario {scenario!r}; expected 'I' or 'II'")
    sizes = tuple(group_sizes) if group_sizes is not None else (10,) * 8
    if len(sizes) != 8:
        raise ValidationError(f"the fractional benchmark needs 8 group sizes, got {len(sizes)}")
    n = sum(sizes)
    rng = _rng(seed)
    x = 2.0 * rng.standard_normal(n)
    eps = rng.standard_normal(n)
    spec = FactorSpec(3)
    y = np.empty((n, 8))
    for col, (a, b, c) in enumerate(spec.levels()):
        base = 4.0 + 2.0 * a + 2.0 * b + 2.0 * c
        if scenario == "II":
            base += a * c + b * c + 0.5 * a * b * c
        stoch = a * x + eps
        y[:, col] = base + stoch - stoch.mean()
    structure = TreatmentStructure(sizes, factor_spec=spec)
    return PotentialTable(y, x[:, None], structure)


def fractional_design_table(table: PotentialTable, group_size: int = 20) -> PotentialTable:
    """Restrict a full 2^3 table to the half fraction with the third factor
    equal to the product of the first two, as a plain 4-arm experiment."""
    spec = table.structure.factor_spec
    if spec is None or spec.n_factors != 3:
        raise ValidationError("fractional_design_table expects a 3-factor table")
    cells = fractional_subset(3, FRACTIONAL_RELATION)
    idx = [spec.level_index(c) - 1 for c in cells]
    structure = TreatmentStructure((group_size,) * len(cells))
    return PotentialTable(table.Y[:, idx], table.X, structure)


def fraction_main_effect_contrasts() -> tuple[np.ndarray, tuple[str, ...]]:
    """Main-effect contrast rows on the 4 cells of the half fraction."""
    cells = np.array(fractional_subset(3, FRACTIONAL_RELATION), dtype=float)
    rows = 0.5 * cells.T  # row k: half the level of factor k+1 in each cell
    return rows, ("A", "B", "C")


def table2_specs() -> tuple:
    """The six benchmark regressions on a 2x2 experiment: saturated and
    main-effects-only variants of the unadjusted, additive, and interacted
    adjustments."""
    mains = ((1,), (2,))
    return (
        FactorialSpec("N", EffectSet.saturated(2, "none")),
        FactorialSpec("F", EffectSet.saturated(2, "additive")),
        FactorialSpec("L", EffectSet.saturated(2, "interacted")),
        FactorialSpec("N_us", EffectSet.unsaturated(2, mains, "none")),
        FactorialSpec("F_us", EffectSet.unsaturated(2, mains, "additive")),
        FactorialSpec("L_us", EffectSet.unsaturated(2, mains, "interacted")),
    )


def fractional_full_design_specs() -> tuple:
    """Benchmark regressions m1-m3 on the full 2^3 design (all additive)."""
    mains = ((1,), (2,), (3,))
    m2_terms = mains + ((1, 3), (2, 3), (1, 2, 3))
    return (
        FactorialSpec("m1", EffectSet.unsaturated(3, mains, "additive"), report=mains),
        FactorialSpec("m2", EffectSet.unsaturated(3, m2_terms, "additive"), report=mains),
        FactorialSpec("m3", EffectSet.saturated(3, "additive"), report=mains),
    )


def run_section6_study(
    beta_variant: str, replications: int, seed: int, scale: int = 1
) -> StudySummary:
    """The six benchmark regressions on one generated 2x2 table."""
    table = dgp_section6(derive_seed(seed, 0), beta_variant, scale=scale)
    config = StudyConfig(
        table=table,
        specs=table2_specs(),
        replications=replications,
        seed=derive_seed(seed, 1),
    )
    return run_study(config)


def run_fractional_study(
    scenario: str, replications: int, seed: int, full_group_sizes=None
) -> StudySummary:
    """Full-design specs m1-m3 and the half-fraction spec m4, merged.

    Both arms use the same generated table; m4 sees only the four cells the
    defining relation keeps, with doubled group sizes.
    """
    table = dgp_fractional(derive_seed(seed, 0), scenario, group_sizes=full_group_sizes)
    full = run_study(
        StudyConfig(
            table=table,
            specs=fractional_full_design_specs(),
            replications=replications,
            seed=derive_seed(seed, 1),
        )
    )
    rows, labels = fraction_main_effect_contrasts()
    frac_table = fractional_design_table(table)
    frac = run_study(
        StudyConfig(
            table=frac_table,
            specs=(TreatmentSpec("m4", "F", contrast=rows, contrast_labels=labels),),
            replications=replications,
            seed=derive_seed(seed, 2),
        )
    )
    # Bias for m4 is judged against the full-design effects, which the
    # aliased fraction cannot identify; overwrite the naive cell-mean truth.
    truth_map = {("m4", lab): full.row("m1", lab).truth for lab in labels}
    frac = _retruth(frac, truth_map)
    return StudySummary.merge(full, frac)


def _retruth(summary: StudySummary, truth_map: dict) -> StudySummary:
    truths = summary.truths.copy()
    rows = []
    for i, key in enumerate(summary.row_keys):
        if key in truth_map:
            truths[i] = truth_map[key]
        est = summary.estimates[:, i]
        se = summary.std_errors[:, i]
        old = summary.rows[i]
        covered = np.abs(est - truths[i]) <= 1.96 * se
        rows.append(
            SummaryRow(
                spec=old.spec,
                contrast=old.contrast,
                truth=float(truths[i]),
                mc_mean=old.mc_mean,
                bias=old.mc_mean - float(truths[i]),
                mc_sd=old.mc_sd,
                mean_se=old.mean_se,
                coverage95=float(covered.mean()),
                replications=old.replications,
            )
        )
    return StudySummary(
        rows=tuple(rows),
        row_keys=summary.row_keys,
        truths=truths,
        estimates=summary.estimates,
        std_errors=summary.std_errors,
    )


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

SUMMARY_HEADER = "spec,contrast,truth,mc_mean,bias,mc_sd,mean_se,coverage95,replications"
RAW_HEADER = "replication,spec,contrast,estimate,std_error"


def _fmt(x: float) -> str:
    return repr(float(x))


def export_results(summary: StudySummary, out_dir) -> tuple[str, str]:
    """Write the aggregate summary and the per-replication long table.

    Output is locale independent and byte deterministic for a given
    summary: shortest round-trip float formatting, LF line endings.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    summary_path = os.path.join(out_dir, "summary.csv")
    raw_path = os.path.join(out_dir, "replications.csv")
    lines = [SUMMARY_HEADER]
    for r in summary.rows:
        lines.append(
            f"{r.spec},{r.contrast},{_fmt(r.truth)},{_fmt(r.mc_mean)},{_fmt(r.bias)},"
            f"{_fmt(r.mc_sd)},{_fmt(r.mean_se)},{_fmt(r.coverage95)},{r.replications}"
        )
    with open(summary_path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    raw_lines = [RAW_HEADER]
    for rep in range(summary.estimates.shape[0]):
        for i, (spec_name, label) in enumerate(summary.row_keys):
            raw_lines.append(
                f"{rep},{spec_name},{label},"
                f"{_fmt(summary.estimates[rep, i])},{_fmt(summary.std_errors[rep, i])}"
            )
    with open(raw_path, "w", newline="\n") as f:
        f.write("\n".join(raw_lines) + "\n")
    return summary_path, raw_path


def read_summary_csv(path) -> tuple[SummaryRow, ...]:
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != SUMMARY_HEADER:
            raise ValidationError(f"unexpected summary header in {path}")
        for line in f:
            parts = line.strip().split(",")
            if len(parts) != 9:
                raise ValidationError(f"malformed summary line: {line!r}")
            rows.append(
                SummaryRow(
                    spec=parts[0],
                    contrast=parts[1],
                    truth=float(parts[2]),
                    mc_mean=float(parts[3]),
                    bias=float(parts[4]),
                    mc_sd=float(parts[5]),
                    mean_se=float(parts[6]),
                    coverage95=float(parts[7]),
                    replications=int(parts[8]),
                )
            )
    return tuple(rows)
