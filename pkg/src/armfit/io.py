"""File formats: data files, assignments, tables, restrictions, results.

All CSV handling is locale independent (period decimal separator, comma
delimiter, LF line endings) and validation errors name the offending row
or column.
"""
from __future__ import annotations

import csv
import json
import re

import numpy as np

from .design import Assignment, FactorSpec, TreatmentStructure
from .errors import ValidationError
from .estimators import EstimationResult, ExperimentData
from .factorial import FactorialResult, factor_levels_to_assignment
from .oracle import PotentialTable


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path} is empty") from None
        rows = [row for row in reader if row]
    return [h.strip() for h in header], rows


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise ValidationError(
            f"value {cell!r} in column {column!r} at data row {row} is not a number"
        ) from None
    if not np.isfinite(value):
        raise ValidationError(f"non-finite value in column {column!r} at data row {row}")
    return value


def read_data_file(path, n_arms: int | None = None) -> ExperimentData:
    """Parse an experiment data file.

    Expected columns: ``y``; either ``z`` (arm indices 1..Q) or factor
    columns ``f1..fK`` (levels -1/+1 or 0/1, auto-detected per file);
    covariates ``x1..xJ``; optional ``id``. No missing values.
    """
    header, rows = _read_rows(path)
    if not rows:
        raise ValidationError(f"{path} has a header but no data rows")
    cols = {name: i for i, name in enumerate(header)}
    if len(cols) != len(header):
        raise ValidationError(f"{path} has duplicate column names")
    if "y" not in cols:
        raise ValidationError(f"{path} is missing the required column 'y'")

    factor_names = sorted(
        (name for name in cols if re.fullmatch(r"f\d+", name)), key=lambda s: int(s[1:])
    )
    covariate_names = sorted(
        (name for name in cols if re.fullmatch(r"x\d+", name)), key=lambda s: int(s[1:])
    )
    expected = {"y", *factor_names, *covariate_names, "z", "id"}
    unknown = [name for name in cols if name not in expected]
    if unknown:
        raise ValidationError(f"{path} has unrecognized columns: {', '.join(unknown)}")
    if factor_names and "z" in cols:
        raise ValidationError(f"{path} must not contain both 'z' and factor columns")
    if not factor_names and "z" not in cols:
        raise ValidationError(f"{path} needs either a 'z' column or factor columns f1..fK")
    if factor_names != [f"f{k}" for k in range(1, len(factor_names) + 1)]:
        raise ValidationError(f"{path} factor columns must be consecutive f1..fK")
    if covariate_names != [f"x{j}" for j in range(1, len(covariate_names) + 1)]:
        raise ValidationError(f"{path} covariate columns must be consecutive x1..xJ")

    n = len(rows)
    for i, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ValidationError(f"{path} data row {i} has {len(row)} fields, expected {len(header)}")

    y = np.array([_parse_float(rows[i][cols["y"]], i + 1, "y") for i in range(n)])
    X = np.column_stack(
        [
            np.array([_parse_float(rows[i][cols[name]], i + 1, name) for i in range(n)])
            for name in covariate_names
        ]
    ) if covariate_names else np.zeros((n, 0))

    if factor_names:
        k = len(factor_names)
        raw = np.empty((n, k))
        for j, name in enumerate(factor_names):
            for i in range(n):
                raw[i, j] = _parse_float(rows[i][cols[name]], i + 1, name)
        values = set(np.unique(raw).tolist())
        if values <= {-1.0, 1.0}:
            levels = raw.astype(np.int64)
        elif values <= {0.0, 1.0}:
            levels = (2.0 * raw - 1.0).astype(np.int64)
        else:
            bad = sorted(values - {-1.0, 0.0, 1.0})
            raise ValidationError(
                f"{path} factor columns must use -1/+1 or 0/1 levels; found {bad}"
            )
        spec = FactorSpec(k)
        assignment = factor_levels_to_assignment(levels, spec)
        counts = assignment.counts(spec.n_levels)
        if counts.min() == 0:
            missing = spec.level_tuple(int(np.flatnonzero(counts == 0)[0]) + 1)
            raise ValidationError(f"{path} has no units at factor combination {missing}")
        structure = TreatmentStructure(tuple(int(c) for c in counts), factor_spec=spec)
        return ExperimentData.build(y, assignment, X, structure)

    z = np.empty(n, dtype=np.int64)
    for i in range(n):
        cell = rows[i][cols["z"]]
        try:
            z[i] = int(cell)
        except ValueError:
            raise ValidationError(
                f"value {cell!r} in column 'z' at data row {i + 1} is not an integer"
            ) from None
        if z[i] < 1:
            raise ValidationError(f"arm index {z[i]} at data row {i + 1} must be at least 1")
        if n_arms is not None and z[i] > n_arms:
            raise ValidationError(
                f"arm index {z[i]} at data row {i + 1} exceeds the declared {n_arms} arms"
            )
    q = n_arms if n_arms is not None else int(z.max())
    counts = np.bincount(z, minlength=q + 1)[1:]
    if counts.min() == 0:
        missing = int(np.flatnonzero(counts == 0)[0]) + 1
        raise ValidationError(f"{path} has no units at arm {missing} (of {q} declared)")
    structure = TreatmentStructure(tuple(int(c) for c in counts))
    return ExperimentData.build(y, Assignment(z), X, structure)


def write_assignment_csv(assignment: Assignment, structure: TreatmentStructure, path) -> None:
    """Single ``z`` column, or ``f1..fK`` level columns for factorial layouts."""
    spec = structure.factor_spec
    with open(path, "w", newline="\n") as f:
        if spec is None:
            f.write("z\n")
            for v in assignment.z:
                f.write(f"{int(v)}\n")
        else:
            levels = np.array(spec.levels(), dtype=np.int64)
            f.write(",".join(f"f{k}" for k in range(1, spec.n_factors + 1)) + "\n")
            for v in assignment.z:
                f.write(",".join(str(int(x)) for x in levels[v - 1]) + "\n")


def read_numeric_csv(path, name: str) -> np.ndarray:
    """Headerless rectangular numeric CSV."""
    with open(path, newline="") as f:
        rows = [row for row in csv.reader(f) if row]
    if not rows:
        raise ValidationError(f"{name} file {path} is empty")
    width = len(rows[0])
    out = np.empty((len(rows), width))
    for i, row in enumerate(rows, start=1):
        if len(row) != width:
            raise ValidationError(f"{name} file {path} row {i} has {len(row)} fields, expected {width}")
        for j, cell in enumerate(row):
            out[i - 1, j] = _parse_float(cell, i, f"{name}[{j + 1}]")
    return out


def read_restriction_file(path, n_cols: int) -> tuple[np.ndarray, np.ndarray]:
    """Numeric CSV with one row per restriction: coefficients then the
    right-hand side in the final column."""
    mat = read_numeric_csv(path, "restriction")
    if mat.shape[1] != n_cols + 1:
        raise ValidationError(
            f"restriction file {path} has {mat.shape[1]} columns; expected "
            f"{n_cols} coefficients plus one right-hand side"
        )
    return mat[:, :-1], mat[:, -1]


def read_contrast_file(path, n_arms: int) -> np.ndarray:
    mat = read_numeric_csv(path, "contrast")
    if mat.shape[1] != n_arms:
        raise ValidationError(
            f"contrast file {path} has {mat.shape[1]} columns for {n_arms} arms"
        )
    return mat


def write_potential_table_csv(table: PotentialTable, path) -> None:
    q, j = table.n_arms, table.n_covariates
    header = [f"y{a}" for a in range(1, q + 1)] + [f"x{b}" for b in range(1, j + 1)]
    with open(path, "w", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for i in range(table.n_units):
            cells = [repr(float(v)) for v in table.Y[i]]
            cells += [repr(float(v)) for v in table.X[i]]
            f.write(",".join(cells) + "\n")


def read_potential_table_csv(path, structure: TreatmentStructure) -> PotentialTable:
    header, rows = _read_rows(path)
    q = structure.n_arms
    y_names = [f"y{a}" for a in range(1, q + 1)]
    x_names = [h for h in header if re.fullmatch(r"x\d+", h)]
    if header[:q] != y_names:
        raise ValidationError(f"{path} must start with columns {', '.join(y_names)}")
    data = np.empty((len(rows), len(header)))
    for i, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ValidationError(f"{path} row {i} has {len(row)} fields, expected {len(header)}")
        for jcol, cell in enumerate(row):
            data[i - 1, jcol] = _parse_float(cell, i, header[jcol])
    return PotentialTable(data[:, :q], data[:, q:q + len(x_names)], structure)


def estimation_result_csv_lines(result: EstimationResult) -> list[str]:
    h = len(result.contrast_labels)
    header = "contrast,estimate,std_error," + ",".join(f"cov_{i + 1}" for i in range(h))
    lines = [header]
    se = result.std_errors
    for i, label in enumerate(result.contrast_labels):
        cov_row = ",".join(repr(float(v)) for v in result.tau_cov[i])
        lines.append(f"{label},{float(result.tau_hat[i])!r},{float(se[i])!r},{cov_row}")
    return lines


def estimation_result_json(result: EstimationResult) -> dict:
    return {
        "spec": result.spec_kind,
        "restriction_kind": result.restriction.kind,
        "contrasts": list(result.contrast_labels),
        "estimates": result.tau_hat.tolist(),
        "std_errors": result.std_errors.tolist(),
        "estimate_covariance": result.tau_cov.tolist(),
        "arm_means": result.y_hat.tolist(),
        "arm_mean_covariance": result.y_hat_cov.tolist(),
        "adjustment_coefficients": result.gamma_hat.tolist(),
        "covariate_centering_shift": result.x_shift.tolist(),
    }


def factorial_result_csv_lines(result: FactorialResult) -> list[str]:
    lines = ["subset,estimate,std_error"]
    se = result.std_errors
    for label, est, s in zip(result.labels, result.estimates, se):
        lines.append(f"{label},{float(est)!r},{float(s)!r}")
    return lines


def factorial_result_json(result: FactorialResult) -> dict:
    return {
        "coding": result.coding,
        "subsets": list(result.labels),
        "estimates": result.estimates.tolist(),
        "std_errors": result.std_errors.tolist(),
        "effect_covariance": result.cov.tolist(),
        "arm_means": result.fit.y_hat.tolist(),
        "adjustment_coefficients": result.fit.gamma_hat.tolist(),
        "restriction_kind": result.fit.restriction.kind,
        "covariate_centering_shift": result.fit.x_shift.tolist(),
    }


def dump_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2)


def read_config_file(path) -> dict:
    """Plain key=value configuration, one pair per line, '#' comments."""
    out: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValidationError(f"{path} line {lineno}: expected key=value, got {stripped!r}")
            key, _, value = stripped.partition("=")
            out[key.strip()] = value.strip()
    return out
