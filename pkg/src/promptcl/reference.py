"""Bundled reference accuracy matrices and their expected metric values.

Three published 8-task continual instruction tuning result matrices ship
with the package as regression fixtures for the metric pipeline: computing
the metrics from each matrix must reproduce the stored values to +-0.01.
The "finetune" fixture intentionally carries no backward-transfer
expectations: its published per-stage forgetting values are not consistent
with its own matrix, so only matrix-consistent quantities are checked.
"""

from __future__ import annotations

import json
from importlib import resources

from .errors import InputError
from .evaluation import AccuracyMatrix, MetricReport, compute_report

FIXTURE_NAMES = ("ours", "moelora", "finetune")
TOLERANCE = 0.01


def _data_path(name: str):
    return resources.files("promptcl").joinpath("data", name)


def load_fixture(name: str) -> AccuracyMatrix:
    if name not in FIXTURE_NAMES:
        raise InputError(f"unknown fixture {name!r}; available: {FIXTURE_NAMES}")
    with resources.as_file(_data_path(f"{name}.csv")) as p:
        return AccuracyMatrix.from_csv(p)


def expected_metrics(name: str) -> dict:
    if name not in FIXTURE_NAMES:
        raise InputError(f"unknown fixture {name!r}; available: {FIXTURE_NAMES}")
    blob = json.loads(_data_path("expected_metrics.json").read_text())
    return blob[name]


def compare_report(report: MetricReport, expected: dict, tol: float = TOLERANCE) -> list[str]:
    """Differences between a computed report and stored expected values.

    Returns one human-readable line per mismatch; empty means pass.
    """
    diffs: list[str] = []

    def check(label: str, got: float, want: float) -> None:
        if abs(got - want) > tol:
            diffs.append(f"{label}: computed {got:.4f}, expected {want:.4f}")

    scalar_fields = (
        ("last_mean", report.last_mean),
        ("avg_mean", report.avg_mean),
        ("bwt_mean", report.bwt_mean),
        ("mean_acc_mean", report.mean_acc_mean),
    )
    for label, got in scalar_fields:
        if label in expected:
            check(label, got, expected[label])
    list_fields = (
        ("last", report.last),
        ("avg", report.avg),
        ("bwt", report.bwt),
        ("mean_acc", report.mean_acc),
    )
    for label, got_list in list_fields:
        if label not in expected:
            continue
        want_list = expected[label]
        if len(got_list) != len(want_list):
            diffs.append(f"{label}: computed {len(got_list)} entries, expected {len(want_list)}")
            continue
        for i, (got, want) in enumerate(zip(got_list, want_list)):
            check(f"{label}[{i}]", got, want)
    return diffs


def verify_fixture(name: str, matrix: AccuracyMatrix | None = None) -> list[str]:
    """Compute metrics for `matrix` (default: the bundled one) and diff them."""
    if matrix is None:
        matrix = load_fixture(name)
    return compare_report(compute_report(matrix), expected_metrics(name))
