"""Continual training: per-task prompt optimization under the joint loss.

Each stage optimizes only the current task's prompt set and the shared
prototype head with plain SGD. The batch prefix is assembled by train-time
fusion: cached prototype vectors score earlier (frozen) sets, the live
prototype scores the current set, and the current set is always kept.
Everything else - backbone, guidance encoders, earlier prompt sets, cached
prototypes - stays bit-identical across the stage.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .backbone import BackboneModel, batch_indices, prepare_batch, _token_nll
from .config import RunConfig, guidance_lambda
from .errors import ConfigError, InputError, StateError
from .guidance import GuidanceEncoders, l2_normalize, score
from .prompts import PromptStore, project_prototype
from .selection import SelectionResult, assemble_prefix, select_train
from .tasks import Sample, TaskDataset

_F64 = torch.float64


def proto_loss(prototype, x_v, x_instruct) -> torch.Tensor:
    """(1 - cos(prototype, x_v)) + (1 - cos(prototype, x_instruct)), in [0, 4]."""
    p = torch.as_tensor(prototype, dtype=_F64)
    a = F.cosine_similarity(p, torch.as_tensor(x_v, dtype=_F64), dim=-1)
    b = F.cosine_similarity(p, torch.as_tensor(x_instruct, dtype=_F64), dim=-1)
    return (1.0 - a) + (1.0 - b)


def _proto_loss_for_mode(prototype, x_v, x_instruct, mode: str) -> torch.Tensor:
    p = torch.as_tensor(prototype, dtype=_F64)
    if mode == "image_only":
        return 1.0 - F.cosine_similarity(p, x_v, dim=-1)
    if mode == "text_only":
        return 1.0 - F.cosine_similarity(p, x_instruct, dim=-1)
    return proto_loss(prototype, x_v, x_instruct)


def lmm_loss(model: BackboneModel, prefix, batch: list[Sample]) -> torch.Tensor:
    """Mean over the batch of the summed next-token NLL of the target."""
    if not batch:
        raise InputError("empty batch")
    images, instructions, targets = prepare_batch(batch)
    logits = model.forward_logits_batch(prefix, images, instructions, targets[:, :-1])
    return _token_nll(logits, targets).mean()


def batch_guidance(enc: GuidanceEncoders, batch: list[Sample]) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch-mean image and text guidance vectors, renormalized to unit length."""
    x_v = l2_normalize(enc.encode_images([s.image for s in batch]).mean(dim=0))
    texts = {}
    for s in batch:
        if s.instruction not in texts:
            texts[s.instruction] = enc.encode_text(s.instruction)
    weights = torch.tensor(
        [sum(1 for s in batch if s.instruction == key) for key in texts], dtype=_F64
    )
    stacked = torch.stack(list(texts.values()))
    x_i = l2_normalize((stacked * weights.unsqueeze(1)).sum(dim=0) / weights.sum())
    return x_v.detach(), x_i.detach()


def fusion_scores(
    store: PromptStore,
    live_prototype: torch.Tensor,
    x_v: torch.Tensor,
    x_instruct: torch.Tensor,
    current_t: int,
) -> dict[int, tuple[float, float]]:
    """Guidance scores for tasks 1..current_t: cached for the past, live for now."""
    scores = {
        t: score(store.prototype_for(t), x_v, x_instruct) for t in range(1, current_t)
    }
    scores[current_t] = score(live_prototype.detach(), x_v, x_instruct)
    return scores


@dataclass
class StageReport:
    task_id: int
    final_losses: tuple[float, float]      # (lmm, proto)
    steps: int
    wall_clock: float
    epoch_losses: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "final_losses": list(self.final_losses),
            "steps": self.steps,
            "wall_clock": self.wall_clock,
            "epoch_losses": [list(e) for e in self.epoch_losses],
        }


def train_task(
    store: PromptStore,
    model: BackboneModel,
    enc: GuidanceEncoders,
    dataset: TaskDataset,
    config: RunConfig,
) -> tuple[PromptStore, StageReport]:
    """Run one continual stage: add, optimize and finalize one prompt set."""
    t = dataset.spec.task_id
    if not model.frozen:
        raise StateError("backbone must be frozen before continual tuning")
    if any(not ps.frozen for ps in store.prompt_sets):
        raise StateError("an earlier task is not finalized")
    if len(store) != t - 1:
        raise StateError(f"store has {len(store)} finalized tasks, cannot train task {t}")
    if not dataset.train:
        raise InputError(f"task {t} has no training samples")

    current = store.add_task(t, init_seed=config.seed * 1000 + t)
    opt = torch.optim.SGD(
        [current.embeddings, *store.head.parameters()], lr=config.learning_rate
    )
    lam = guidance_lambda(config.guidance_mode)
    w_lmm, w_proto = config.loss_weights
    gen = torch.Generator().manual_seed(config.seed * 100 + t)

    steps = 0
    epoch_losses: list[tuple[float, float]] = []
    t0 = time.perf_counter()
    for _ in range(config.epochs_per_task):
        sum_lmm = 0.0
        sum_proto = 0.0
        n_seen = 0
        for idx in batch_indices(dataset.train, config.batch_size, gen):
            batch = [dataset.train[i] for i in idx]
            x_v, x_i = batch_guidance(enc, batch)
            live_proto = project_prototype(store.head, current)
            if config.fusion_enabled and t > 1:
                sel = select_train(
                    fusion_scores(store, live_proto, x_v, x_i, t), t, config.k, lam
                )
            else:
                sel = SelectionResult((t,), {}, config.k, "train")
            prefix = assemble_prefix(store, sel)
            l_lmm = lmm_loss(model, prefix, batch)
            l_proto = _proto_loss_for_mode(live_proto, x_v, x_i, config.guidance_mode)
            loss = w_lmm * l_lmm + w_proto * l_proto
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps += 1
            sum_lmm += float(l_lmm) * len(batch)
            sum_proto += float(l_proto) * len(batch)
            n_seen += len(batch)
        epoch_losses.append((sum_lmm / n_seen, sum_proto / n_seen))

    store.finalize_task(t)
    report = StageReport(
        task_id=t,
        final_losses=epoch_losses[-1],
        steps=steps,
        wall_clock=time.perf_counter() - t0,
        epoch_losses=epoch_losses,
    )
    return store, report


def run_continual(
    model: BackboneModel,
    enc: GuidanceEncoders,
    suite: list[TaskDataset],
    config: RunConfig,
    collect_traces: bool = False,
):
    """Sequentially train every task, evaluating all seen tasks after each stage.

    Returns (store, accuracy_matrix, stage_reports) and, when requested,
    selection traces from the final stage's evaluation.
    """
    from .evaluation import AccuracyMatrix, evaluate_task

    if not suite:
        raise InputError("empty suite")
    expected = list(range(1, len(suite) + 1))
    if [ds.spec.task_id for ds in suite] != expected:
        raise ConfigError("suite task ids must be consecutive from 1")

    T = len(suite)
    store = PromptStore(config.M, config.d_m, config.d_g, head_seed=config.seed + 11)
    matrix = AccuracyMatrix.empty(T, [ds.spec.name for ds in suite])
    reports = []
    traces: list[dict] = []
    prefix_mode = "select" if config.selection_enabled else "concat_all"
    for t in range(1, T + 1):
        _, report = train_task(store, model, enc, suite[t - 1], config)
        reports.append(report)
        for i in range(1, t + 1):
            sink = traces if (collect_traces and t == T) else None
            acc = evaluate_task(
                model,
                store,
                enc,
                suite[i - 1],
                config.k,
                guidance_mode=config.guidance_mode,
                prefix_mode=prefix_mode,
                trace_sink=sink,
            )
            matrix.set(t, i, acc)
    if collect_traces:
        return store, matrix, reports, traces
    return store, matrix, reports
