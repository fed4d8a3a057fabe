"""Inference with prompt selection, the accuracy matrix, and all metrics.

The accuracy matrix A[t][i] holds exact-match accuracy (in percent) on task
i after training stage t, defined for i <= t. Metrics derived from it:

  last:     row T, per task, plus its mean.
  avg:      mean of column i over stages t = i+1..T (the stage right after
            training is excluded), defined for i < T.
  bwt:      B_t = mean over i < t of (A[i][i] - A[t][i]); forgetting,
            lower is better.
  mean_acc: M_t = mean over i <= t of A[t][i]; higher is better.

bwt and mean_acc are reported for stages t = 2..T along with their means.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneModel
from .config import guidance_lambda
from .errors import InputError, ParseError, StateError, UndefinedMetricError
from .guidance import GuidanceEncoders, l2_normalize
from .prompts import PromptStore
from .selection import assemble_prefix, select_eval
from .tasks import TaskDataset
from .vocab import default_vocab

_F64 = torch.float64


def normalize_answer(text: str) -> str:
    return " ".join(text.split()).casefold()


def exact_match(prediction: str, target: str) -> bool:
    return normalize_answer(prediction) == normalize_answer(target)


# --------------------------------------------------------------------------
# accuracy matrix
# --------------------------------------------------------------------------

class AccuracyMatrix:
    """Lower-triangular T x T matrix of per-stage task accuracies."""

    def __init__(self, values: np.ndarray, task_names: list[str]):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise InputError(f"expected a square matrix, got shape {values.shape}")
        if len(task_names) != values.shape[0]:
            raise InputError("task_names length does not match matrix size")
        self.values = values
        self.task_names = list(task_names)

    @classmethod
    def empty(cls, T: int, task_names: list[str] | None = None) -> "AccuracyMatrix":
        names = task_names if task_names is not None else [f"task{i+1}" for i in range(T)]
        values = np.full((T, T), np.nan)
        return cls(values, names)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    def set(self, stage: int, task: int, accuracy: float) -> None:
        if not 1 <= task <= stage <= self.T:
            raise InputError(f"A[{stage}][{task}] is outside the lower triangle")
        self.values[stage - 1, task - 1] = float(accuracy)

    def get(self, stage: int, task: int) -> float:
        if not 1 <= task <= stage <= self.T:
            raise InputError(f"A[{stage}][{task}] is outside the lower triangle")
        return float(self.values[stage - 1, task - 1])

    def is_complete(self) -> bool:
        t = self.T
        lower = np.tril_indices(t)
        return not np.isnan(self.values[lower]).any()

    def require_complete(self) -> None:
        if not self.is_complete():
            raise InputError("accuracy matrix has undefined lower-triangle entries")

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", *self.task_names])
            for t in range(1, self.T + 1):
                row = [self.task_names[t - 1]]
                for i in range(1, self.T + 1):
                    row.append(f"{self.values[t - 1, i - 1]:.6g}" if i <= t else "")
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path: str | Path) -> "AccuracyMatrix":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or len(rows[0]) < 2 or rows[0][0] != "stage":
            raise ParseError(f"{path}: expected header 'stage,<task names...>'")
        names = rows[0][1:]
        t_total = len(names)
        if len(rows) - 1 != t_total:
            raise ParseError(f"{path}: expected {t_total} stage rows, found {len(rows) - 1}")
        values = np.full((t_total, t_total), np.nan)
        for r, row in enumerate(rows[1:], start=1):
            cells = row[1:]
            if len(cells) != t_total:
                raise ParseError(f"{path}: row {r + 1} has {len(cells)} cells, expected {t_total}")
            for c, cell in enumerate(cells, start=1):
                if cell.strip() == "":
                    if c <= r:
                        raise ParseError(f"{path}: row {r + 1}, column {c + 1}: missing value")
                    continue
                if c > r:
                    raise ParseError(
                        f"{path}: row {r + 1}, column {c + 1}: value above the diagonal"
                    )
                try:
                    values[r - 1, c - 1] = float(cell)
                except ValueError as e:
                    raise ParseError(
                        f"{path}: row {r + 1}, column {c + 1}: bad number {cell!r}"
                    ) from e
        return cls(values, names)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def _require(matrix: AccuracyMatrix, min_t: int = 2) -> None:
    matrix.require_complete()
    if matrix.T < min_t:
        raise UndefinedMetricError(f"metric undefined for T={matrix.T}")


def metric_last(matrix: AccuracyMatrix) -> tuple[list[float], float]:
    """Final-row accuracies A[T][i] for every task, plus their mean."""
    matrix.require_complete()
    row = [matrix.get(matrix.T, i) for i in range(1, matrix.T + 1)]
    return row, float(np.mean(row))


def metric_avg(matrix: AccuracyMatrix) -> tuple[list[float], float]:
    """Per-task mean accuracy over the stages after the task was trained."""
    _require(matrix)
    t_total = matrix.T
    out = []
    for i in range(1, t_total):
        vals = [matrix.get(t, i) for t in range(i + 1, t_total + 1)]
        out.append(float(np.mean(vals)))
    return out, float(np.mean(out))


def metric_bwt(matrix: AccuracyMatrix) -> tuple[list[float], float]:
    """Backward transfer B_t for t = 2..T, plus the mean; lower is better."""
    _require(matrix)
    out = []
    for t in range(2, matrix.T + 1):
        drops = [matrix.get(i, i) - matrix.get(t, i) for i in range(1, t)]
        out.append(float(np.mean(drops)))
    return out, float(np.mean(out))


def metric_mean_acc(matrix: AccuracyMatrix) -> tuple[list[float], float]:
    """Mean accuracy M_t over all seen tasks for t = 2..T, plus the mean."""
    _require(matrix)
    out = []
    for t in range(2, matrix.T + 1):
        out.append(float(np.mean([matrix.get(t, i) for i in range(1, t + 1)])))
    return out, float(np.mean(out))


@dataclass
class MetricReport:
    task_names: list[str]
    last: list[float]
    last_mean: float
    avg: list[float]
    avg_mean: float
    bwt: list[float]
    bwt_mean: float
    mean_acc: list[float]
    mean_acc_mean: float

    def to_dict(self) -> dict:
        return {
            "task_names": self.task_names,
            "last": self.last,
            "last_mean": self.last_mean,
            "avg": self.avg,
            "avg_mean": self.avg_mean,
            "bwt": self.bwt,
            "bwt_mean": self.bwt_mean,
            "mean_acc": self.mean_acc,
            "mean_acc_mean": self.mean_acc_mean,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)

    def table(self) -> str:
        lines = []
        lines.append("task        " + "  ".join(f"{n[:12]:>12}" for n in self.task_names) + "      mean")
        lines.append("last        " + "  ".join(f"{v:12.2f}" for v in self.last) + f"  {self.last_mean:8.2f}")
        avg_cells = [f"{v:12.2f}" for v in self.avg] + [f"{'-':>12}"]
        lines.append("avg         " + "  ".join(avg_cells) + f"  {self.avg_mean:8.2f}")
        lines.append(
            "bwt  (t=2..T)  " + "  ".join(f"{v:.2f}" for v in self.bwt) + f"   mean {self.bwt_mean:.2f}"
        )
        lines.append(
            "mean_acc       " + "  ".join(f"{v:.2f}" for v in self.mean_acc)
            + f"   mean {self.mean_acc_mean:.2f}"
        )
        return "\n".join(lines)


def compute_report(matrix: AccuracyMatrix) -> MetricReport:
    last, last_mean = metric_last(matrix)
    avg, avg_mean = metric_avg(matrix)
    bwt, bwt_mean = metric_bwt(matrix)
    mean_acc, mean_acc_mean = metric_mean_acc(matrix)
    return MetricReport(
        task_names=list(matrix.task_names),
        last=last,
        last_mean=last_mean,
        avg=avg,
        avg_mean=avg_mean,
        bwt=bwt,
        bwt_mean=bwt_mean,
        mean_acc=mean_acc,
        mean_acc_mean=mean_acc_mean,
    )


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def evaluate_task(
    model: BackboneModel,
    store: PromptStore,
    enc: GuidanceEncoders,
    dataset: TaskDataset,
    k: int,
    guidance_mode: str = "dual",
    prefix_mode: str = "select",
    fixed_prefix: torch.Tensor | None = None,
    trace_sink: list | None = None,
    max_len: int = 4,
) -> float:
    """Exact-match accuracy (percent) of one task's eval split.

    prefix_mode: "select" routes each sample through top-k prompt selection;
    "concat_all" prefixes every trained set; "none" evaluates the bare
    backbone; "fixed" uses `fixed_prefix` as-is.
    """
    if not dataset.eval:
        raise InputError(f"task {dataset.spec.task_id} has an empty eval split")
    if prefix_mode not in ("select", "concat_all", "none", "fixed"):
        raise InputError(f"unknown prefix_mode {prefix_mode!r}")

    vocab = default_vocab()
    n_tasks = len(store.cached_prototypes) if store is not None else 0
    if prefix_mode in ("select", "concat_all") and n_tasks < 1:
        raise StateError("prompt selection requires at least one finalized task")

    groups: dict[tuple, list[int]] = {}
    chosen_of: list[tuple[int, ...]] = []
    if prefix_mode == "select":
        lam = guidance_lambda(guidance_mode)
        protos = torch.stack([store.prototype_for(t) for t in range(1, n_tasks + 1)])
        x_v = enc.encode_images([s.image for s in dataset.eval])
        alphas = x_v @ protos.T                       # (N, n_tasks), all unit vectors
        text_cache: dict[tuple, torch.Tensor] = {}
        for idx, s in enumerate(dataset.eval):
            if s.instruction not in text_cache:
                text_cache[s.instruction] = enc.encode_text(s.instruction)
            betas = protos @ text_cache[s.instruction]
            scores = {
                t: (float(alphas[idx, t - 1]), float(betas[t - 1]))
                for t in range(1, n_tasks + 1)
            }
            sel = select_eval(scores, k, lam)
            chosen_of.append(sel.chosen_task_ids)
            groups.setdefault(sel.chosen_task_ids, []).append(idx)
            if trace_sink is not None:
                trace_sink.append(
                    {
                        "sample_id": idx,
                        "task_id_true": dataset.spec.task_id,
                        "chosen_ids": list(sel.chosen_task_ids),
                        "scores": {str(t): sel.combined_scores[t] for t in sel.combined_scores},
                    }
                )
    else:
        if prefix_mode == "concat_all":
            key = tuple(range(1, n_tasks + 1))
        else:
            key = ()
        groups[key] = list(range(len(dataset.eval)))
        chosen_of = [key] * len(dataset.eval)

    correct = 0
    for chosen, indices in sorted(groups.items()):
        if prefix_mode == "fixed":
            prefix = fixed_prefix if fixed_prefix is not None else torch.zeros(0, model.d_m, dtype=_F64)
        else:
            prefix = assemble_prefix(store, chosen) if chosen else torch.zeros(0, model.d_m, dtype=_F64)
        by_len: dict[int, list[int]] = {}
        for i in indices:
            by_len.setdefault(len(dataset.eval[i].instruction), []).append(i)
        for _, idxs in sorted(by_len.items()):
            samples = [dataset.eval[i] for i in idxs]
            outs = model.generate_batch(
                prefix,
                [s.image for s in samples],
                [list(s.instruction) for s in samples],
                max_len,
            )
            for s, out in zip(samples, outs):
                correct += int(exact_match(vocab.decode(out), s.answer))
    return 100.0 * correct / len(dataset.eval)


# --------------------------------------------------------------------------
# similarity and selection reports
# --------------------------------------------------------------------------

def similarity_heatmap(
    store: PromptStore,
    enc: GuidanceEncoders,
    suite: list[TaskDataset],
    modality: str = "dual",
) -> np.ndarray:
    """Matrix of combined guidance scores: prototype i vs task j's eval split."""
    if len(store.cached_prototypes) != len(suite):
        raise StateError("all tasks must be finalized before building the heatmap")
    T = len(suite)
    out = np.zeros((T, T))
    for j, ds in enumerate(suite):
        x_v = l2_normalize(enc.encode_images([s.image for s in ds.eval]).mean(dim=0))
        texts = [enc.encode_text(s.instruction) for s in ds.eval]
        x_i = l2_normalize(torch.stack(texts).mean(dim=0))
        for i in range(T):
            proto = store.prototype_for(i + 1)
            alpha = float(proto @ x_v)
            beta = float(proto @ x_i)
            if modality == "image":
                out[i, j] = alpha
            elif modality == "text":
                out[i, j] = beta
            else:
                out[i, j] = alpha + beta
    return out


def selection_histogram(traces: list[dict], T: int | None = None) -> np.ndarray:
    """Row-stochastic matrix: row i = distribution of chosen ids for true task i."""
    if not traces:
        raise InputError("empty selection traces")
    ids = [t["task_id_true"] for t in traces] + [c for t in traces for c in t["chosen_ids"]]
    t_total = T if T is not None else max(ids)
    counts = np.zeros((t_total, t_total))
    picks = np.zeros(t_total)
    for tr in traces:
        row = tr["task_id_true"] - 1
        for c in tr["chosen_ids"]:
            counts[row, c - 1] += 1
            picks[row] += 1
    with np.errstate(invalid="ignore"):
        out = counts / picks[:, None]
    return np.nan_to_num(out)


def own_task_inclusion(traces: list[dict], T: int | None = None) -> list[float]:
    """Per task: fraction of samples whose chosen set includes the true task."""
    if not traces:
        raise InputError("empty selection traces")
    t_total = T if T is not None else max(t["task_id_true"] for t in traces)
    hit = np.zeros(t_total)
    seen = np.zeros(t_total)
    for tr in traces:
        row = tr["task_id_true"] - 1
        seen[row] += 1
        hit[row] += int(tr["task_id_true"] in tr["chosen_ids"])
    return [float(hit[i] / seen[i]) if seen[i] else math.nan for i in range(t_total)]


def write_traces(traces: list[dict], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for tr in traces:
            fh.write(json.dumps(tr) + "\n")


def read_traces(path: str | Path) -> list[dict]:
    out = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
