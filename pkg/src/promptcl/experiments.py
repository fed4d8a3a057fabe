"""Experiment grid: method variants, bounds rows, seeds, and the speed bench.

Variants map onto the ablation axes: "full" is the complete method
(train-time fusion + inference-time selection + dual guidance);
"fusion_only" drops selection and prefixes every trained set at inference;
"selection_only" trains each task's prompts alone; "concat_all" drops both;
"image_guidance"/"text_guidance" restrict the routing signal to one
modality. "finetune" tunes a single shared prompt set sequentially with no
routing at all, and "zeroshot"/"multitask" are the bounds rows.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneModel, batch_indices
from .config import RunConfig
from .errors import ConfigError, InputError
from .evaluation import (
    AccuracyMatrix,
    MetricReport,
    compute_report,
    evaluate_task,
    write_traces,
)
from .guidance import GuidanceEncoders
from .prompts import PromptStore
from .selection import assemble_prefix
from .tasks import TaskDataset, generate_confusable_suite, generate_suite, joint_mixture, load_suite, save_suite
from .training import StageReport, lmm_loss, run_continual
from .vocab import default_vocab

_F64 = torch.float64

VARIANTS = (
    "full",
    "finetune",
    "concat_all",
    "fusion_only",
    "selection_only",
    "image_guidance",
    "text_guidance",
    "multitask",
    "zeroshot",
)

# (fusion_enabled, selection_enabled, guidance_mode) for the routed variants
_ROUTED = {
    "full": (True, True, "dual"),
    "fusion_only": (True, False, "dual"),
    "selection_only": (False, True, "dual"),
    "concat_all": (False, False, "dual"),
    "image_guidance": (True, True, "image_only"),
    "text_guidance": (True, True, "text_only"),
}


@dataclass
class RunResult:
    variant: str
    seed: int
    matrix: AccuracyMatrix | None = None
    row: np.ndarray | None = None          # bounds variants: one accuracy row
    report: MetricReport | None = None
    stage_reports: list[StageReport] = field(default_factory=list)
    traces: list[dict] = field(default_factory=list)
    store: PromptStore | None = None


def _new_prompt(config: RunConfig, salt: int) -> nn.Parameter:
    gen = torch.Generator().manual_seed(config.seed * 1000 + salt)
    emb = torch.randn(config.M, config.d_m, generator=gen, dtype=_F64) * 0.02
    return nn.Parameter(emb)


def _train_single_prompt(
    model: BackboneModel,
    prompt: nn.Parameter,
    samples,
    config: RunConfig,
    seed_salt: int,
) -> int:
    opt = torch.optim.SGD([prompt], lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed * 100 + seed_salt)
    steps = 0
    for _ in range(config.epochs_per_task):
        for idx in batch_indices(samples, config.batch_size, gen):
            batch = [samples[i] for i in idx]
            loss = lmm_loss(model, prompt, batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps += 1
    return steps


def _run_finetune(model, enc, suite, config: RunConfig) -> RunResult:
    """Sequentially tune one shared prompt set; no routing, no freezing."""
    T = len(suite)
    matrix = AccuracyMatrix.empty(T, [ds.spec.name for ds in suite])
    prompt = _new_prompt(config, salt=1)
    result = RunResult("finetune", config.seed, matrix=matrix)
    for t in range(1, T + 1):
        t0 = time.perf_counter()
        steps = _train_single_prompt(model, prompt, suite[t - 1].train, config, seed_salt=t)
        result.stage_reports.append(
            StageReport(t, (0.0, 0.0), steps, time.perf_counter() - t0)
        )
        frozen_view = prompt.detach().clone()
        for i in range(1, t + 1):
            acc = evaluate_task(
                model, None, enc, suite[i - 1], config.k,
                prefix_mode="fixed", fixed_prefix=frozen_view,
            )
            matrix.set(t, i, acc)
    result.report = compute_report(matrix)
    return result


def _run_bounds(model, enc, suite, config: RunConfig, variant: str) -> RunResult:
    """Zero-shot / multi-task rows: one accuracy per task, no continual metrics."""
    T = len(suite)
    result = RunResult(variant, config.seed)
    if variant == "multitask":
        prompt = _new_prompt(config, salt=2)
        mixture = joint_mixture(suite, seed=config.seed)
        _train_single_prompt(model, prompt, mixture.train, config, seed_salt=99)
        fixed = prompt.detach().clone()
        row = [
            evaluate_task(model, None, enc, ds, config.k, prefix_mode="fixed", fixed_prefix=fixed)
            for ds in suite
        ]
    else:
        row = [
            evaluate_task(model, None, enc, ds, config.k, prefix_mode="none")
            for ds in suite
        ]
    result.row = np.asarray(row, dtype=np.float64)
    return result


def run_variant(
    variant: str,
    model: BackboneModel,
    enc: GuidanceEncoders,
    suite: list[TaskDataset],
    config: RunConfig,
    collect_traces: bool = False,
) -> RunResult:
    """Run one variant on one suite with one seed."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; valid: {VARIANTS}")
    if variant == "finetune":
        return _run_finetune(model, enc, suite, config)
    if variant in ("zeroshot", "multitask"):
        return _run_bounds(model, enc, suite, config, variant)

    fusion, selection, mode = _ROUTED[variant]
    cfg = config.replace(
        fusion_enabled=fusion, selection_enabled=selection, guidance_mode=mode
    )
    out = run_continual(model, enc, suite, cfg, collect_traces=collect_traces)
    store, matrix, reports = out[:3]
    traces = out[3] if collect_traces else []
    return RunResult(
        variant,
        config.seed,
        matrix=matrix,
        report=compute_report(matrix),
        stage_reports=reports,
        traces=traces,
        store=store,
    )


# --------------------------------------------------------------------------
# multi-seed aggregation
# --------------------------------------------------------------------------

def aggregate(reports: list[MetricReport]) -> tuple[MetricReport, MetricReport]:
    """Element-wise mean and sample standard deviation across seeds."""
    if not reports:
        raise InputError("no reports to aggregate")
    first = reports[0]
    fields = ("last", "avg", "bwt", "mean_acc")
    for rep in reports[1:]:
        for f in fields:
            if len(getattr(rep, f)) != len(getattr(first, f)):
                raise InputError(f"inconsistent report shapes in field {f!r}")

    def stats(values: list[float]) -> tuple[float, float]:
        arr = np.asarray(values, dtype=np.float64)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        return float(arr.mean()), std

    mean_kwargs = {"task_names": list(first.task_names)}
    std_kwargs = {"task_names": list(first.task_names)}
    for f in fields:
        cols = list(zip(*(getattr(r, f) for r in reports))) or []
        pairs = [stats(list(c)) for c in cols]
        mean_kwargs[f] = [m for m, _ in pairs]
        std_kwargs[f] = [s for _, s in pairs]
        m, s = stats([getattr(r, f + "_mean") for r in reports])
        mean_kwargs[f + "_mean"] = m
        std_kwargs[f + "_mean"] = s
    return MetricReport(**mean_kwargs), MetricReport(**std_kwargs)


# --------------------------------------------------------------------------
# complexity benchmark
# --------------------------------------------------------------------------

def _random_store(config: RunConfig, T: int, seed: int) -> PromptStore:
    store = PromptStore(config.M, config.d_m, config.d_g, head_seed=seed)
    for t in range(1, T + 1):
        store.add_task(t, init_seed=seed + t)
        store.finalize_task(t)
    return store


def complexity_benchmark(
    model: BackboneModel,
    config: RunConfig,
    T_values: tuple[int, ...] = (2, 4, 8),
    batch_size: int = 16,
    gen_len: int = 8,
    reps: int = 3,
    seed: int = 0,
) -> list[dict]:
    """Wall-clock per generated token for top-k prefixes vs concat-all.

    The top-k method's prefix stays at M*min(k,T) tokens however many tasks
    exist, while concat-all grows linearly in T. Timing uses forced-length
    greedy generation on synthetic inputs and keeps the best of `reps` runs.
    """
    vocab = default_vocab()
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(batch_size, config.d_img))
    instruction = vocab.encode("how many objects are there")
    instructions = [list(instruction)] * batch_size
    rows = []
    for T in T_values:
        store = _random_store(config, T, seed + 17)
        prefixes = {
            "selected": assemble_prefix(store, tuple(range(1, min(config.k, T) + 1))),
            "concat_all": assemble_prefix(store, tuple(range(1, T + 1))),
        }
        for method, prefix in prefixes.items():
            best = float("inf")
            for _ in range(reps):
                t0 = time.perf_counter()
                model.generate_batch(prefix, images, instructions, max_len=gen_len, ignore_eos=True)
                best = min(best, time.perf_counter() - t0)
            rows.append(
                {
                    "T": T,
                    "method": method,
                    "prefix_tokens": int(prefix.shape[0]),
                    "ms_per_token": 1000.0 * best / (batch_size * gen_len),
                }
            )
    return rows


def benchmark_speedup(rows: list[dict], T: int = 8) -> float:
    """concat_all / selected ms-per-token ratio at a given T."""
    sel = [r for r in rows if r["T"] == T and r["method"] == "selected"]
    cat = [r for r in rows if r["T"] == T and r["method"] == "concat_all"]
    if not sel or not cat:
        raise InputError(f"benchmark rows missing T={T}")
    return cat[0]["ms_per_token"] / sel[0]["ms_per_token"]


# --------------------------------------------------------------------------
# plans and the grid runner
# --------------------------------------------------------------------------

@dataclass
class ExperimentPlan:
    variants: list[str]
    seeds: list[int]
    config: RunConfig = field(default_factory=RunConfig)
    confusable: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("plan needs at least one seed")
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ConfigError(f"unknown variants {unknown}; valid: {VARIANTS}")

    def to_dict(self) -> dict:
        return {
            "variants": list(self.variants),
            "seeds": list(self.seeds),
            "config": self.config.to_dict(),
            "confusable": self.confusable,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        return cls(
            variants=list(d["variants"]),
            seeds=list(d["seeds"]),
            config=RunConfig.from_dict(d.get("config", {})),
            confusable=bool(d.get("confusable", False)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _grid_suite(plan: ExperimentPlan, seed: int, out_dir: Path | None) -> list[TaskDataset]:
    """One suite per seed, generated once and shared by every variant via file."""
    cfg = plan.config
    if out_dir is not None:
        path = out_dir / f"suite-seed{seed}.jsonl"
        if not path.exists():
            if plan.confusable:
                suite = generate_confusable_suite(seed, cfg.n_train, cfg.n_eval)
            else:
                suite = generate_suite(cfg.T, seed, cfg.n_train, cfg.n_eval)
            save_suite(suite, path)
        return load_suite(path)
    if plan.confusable:
        return generate_confusable_suite(seed, cfg.n_train, cfg.n_eval)
    return generate_suite(cfg.T, seed, cfg.n_train, cfg.n_eval)


def run_plan(
    plan: ExperimentPlan,
    model: BackboneModel,
    enc: GuidanceEncoders,
    out_dir: str | Path | None = None,
    collect_traces: bool = False,
    progress: bool = False,
) -> dict[str, dict[int, RunResult]]:
    """Run every (variant, seed) cell of the plan, optionally writing artifacts."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        for sub in ("matrices", "reports", "logs", "traces"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        plan.save(out / "plan.json")
        plan.config.save(out / "config.json")
    results: dict[str, dict[int, RunResult]] = {v: {} for v in plan.variants}
    for seed in plan.seeds:
        suite = _grid_suite(plan, seed, out)
        for variant in plan.variants:
            t0 = time.perf_counter()
            res = run_variant(
                variant, model, enc, suite,
                plan.config.replace(seed=seed),
                collect_traces=collect_traces,
            )
            results[variant][seed] = res
            if progress:
                print(f"grid: {variant} seed={seed} done in {time.perf_counter() - t0:.1f}s")
            if out is None:
                continue
            tag = f"{variant}-seed{seed}"
            if res.matrix is not None:
                res.matrix.to_csv(out / "matrices" / f"{tag}.csv")
            payload: dict = {"variant": variant, "seed": seed}
            if res.report is not None:
                payload["report"] = res.report.to_dict()
            if res.row is not None:
                payload["row"] = [float(v) for v in res.row]
            (out / "reports" / f"{tag}.json").write_text(json.dumps(payload, indent=2) + "\n")
            with (out / "logs" / f"{tag}.stages.jsonl").open("w") as fh:
                for rep in res.stage_reports:
                    fh.write(json.dumps(rep.to_dict()) + "\n")
            if res.traces:
                write_traces(res.traces, out / "traces" / f"{tag}.jsonl")
    if out is not None:
        for variant in plan.variants:
            reports = [r.report for r in results[variant].values() if r.report is not None]
            if not reports:
                continue
            mean, std = aggregate(reports)
            (out / "reports" / f"{variant}-aggregate.json").write_text(
                json.dumps({"mean": mean.to_dict(), "std": std.to_dict()}, indent=2) + "\n"
            )
    return results
