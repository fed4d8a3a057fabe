"""Top-k prompt-set choice from guidance scores, and prefix assembly.

Train-time choice always keeps the current task's set and fills the rest
with the best-scoring earlier sets; inference-time choice is an unforced
top-k over every trained set. Whole sets are chosen or dropped together,
ties go to the lower task id, and the prefix concatenates chosen sets in
ascending task-id order regardless of score.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import torch

from .errors import InputError


@dataclass(frozen=True)
class SelectionResult:
    chosen_task_ids: tuple[int, ...]
    combined_scores: dict[int, float]
    k: int
    mode: str


def combine(alpha: float, beta: float, lam: float | None = None) -> float:
    """Combined routing score: plain alpha + beta, or lam-weighted blend."""
    if lam is None:
        return alpha + beta
    return lam * alpha + (1.0 - lam) * beta


def _validate_scores(scores: Mapping[int, tuple[float, float]], expected_ids: range) -> None:
    missing = [t for t in expected_ids if t not in scores]
    extra = [t for t in scores if t not in expected_ids]
    if missing:
        raise InputError(f"missing score entries for tasks {missing}")
    if extra:
        raise InputError(f"unexpected score entries for tasks {sorted(extra)}")


def _combined_map(scores: Mapping[int, tuple[float, float]], lam: float | None) -> dict[int, float]:
    return {t: combine(a, b, lam) for t, (a, b) in scores.items()}


def select_train(
    scores: Mapping[int, tuple[float, float]],
    current_t: int,
    k: int,
    lam: float | None = None,
) -> SelectionResult:
    """Choose the current task plus the k-1 best earlier tasks."""
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    _validate_scores(scores, range(1, current_t + 1))
    combined = _combined_map(scores, lam)
    previous = sorted(
        (t for t in combined if t != current_t),
        key=lambda t: (-combined[t], t),
    )
    chosen = sorted([current_t, *previous[: k - 1]])
    return SelectionResult(tuple(chosen), combined, k, "train")


def select_eval(
    scores: Mapping[int, tuple[float, float]],
    k: int,
    lam: float | None = None,
) -> SelectionResult:
    """Choose the k best tasks among all trained tasks, no forced inclusion."""
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    if not scores:
        raise InputError("empty score map")
    _validate_scores(scores, range(1, max(scores) + 1))
    combined = _combined_map(scores, lam)
    ranked = sorted(combined, key=lambda t: (-combined[t], t))
    chosen = sorted(ranked[:k])
    return SelectionResult(tuple(chosen), combined, k, "eval")


def assemble_prefix(store, result: SelectionResult | tuple[int, ...]) -> torch.Tensor:
    """Concatenate chosen prompt sets, ascending task id, into one prefix."""
    ids = result.chosen_task_ids if isinstance(result, SelectionResult) else tuple(result)
    if len(ids) == 0:
        return torch.zeros((0, store.d_m), dtype=torch.float64)
    parts = [store.embeddings_for(t) for t in sorted(ids)]
    return torch.cat(parts, dim=0)
