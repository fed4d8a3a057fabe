"""Command-line entry point.

Commands: gen-suite, pretrain, train, eval, metrics, oracle, grid, bench,
plot. Every command takes --seed and --out, writes its effective
configuration into the output directory, and never mutates its inputs.
Exit codes: 0 success, 1 check or processing failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneModel, heldout_accuracy, pretrain_backbone
from .config import GUIDANCE_MODES, RunConfig
from .errors import PromptclError
from .evaluation import (
    AccuracyMatrix,
    compute_report,
    evaluate_task,
    read_traces,
    selection_histogram,
    similarity_heatmap,
    write_traces,
)
from .experiments import (
    ExperimentPlan,
    benchmark_speedup,
    complexity_benchmark,
    run_plan,
)
from .guidance import GuidanceEncoders
from .prompts import PromptStore
from .reference import FIXTURE_NAMES, compare_report, expected_metrics, load_fixture
from .plots import load_matrix_csv, matrix_heatmap, save_matrix_csv
from .tasks import generate_confusable_suite, generate_pretrain_mixture, generate_suite, load_suite, save_suite
from .training import run_continual

_F64 = torch.float64


def _out_dir(args, command: str) -> Path:
    root = Path(os.environ.get("PROMPTCL_OUT", "runs"))
    out = Path(args.out) if args.out else root / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _record_config(out: Path, args, config: RunConfig | None = None) -> None:
    blob = {"argv": {k: v for k, v in vars(args).items() if k != "func"}}
    if config is not None:
        blob["config"] = config.to_dict()
    (out / "config.json").write_text(json.dumps(blob, indent=2, default=str) + "\n")


def _require_file(parser: argparse.ArgumentParser, path: str | None, what: str) -> Path:
    if path is None:
        parser.error(f"missing required {what}")
    p = Path(path)
    if not p.exists():
        parser.error(f"{what} not found: {p}")
    return p


def _config_from_args(args, T: int | None = None) -> RunConfig:
    cfg = RunConfig(seed=args.seed)
    overrides = {}
    for name in ("M", "k", "epochs_per_task", "batch_size", "learning_rate",
                 "guidance_mode", "encoder_seed"):
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = val
    if getattr(args, "no_fusion", False):
        overrides["fusion_enabled"] = False
    if getattr(args, "no_selection", False):
        overrides["selection_enabled"] = False
    if T is not None:
        overrides["T"] = T
    return cfg.replace(**overrides)


def _encoders(config: RunConfig) -> GuidanceEncoders:
    return GuidanceEncoders(config.d_img, config.d_g, config.vocab_size, config.encoder_seed)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_suite(parser, args) -> int:
    out = _out_dir(args, "gen-suite")
    if args.confusable:
        suite = generate_confusable_suite(args.seed, args.n_train, args.n_eval)
    else:
        suite = generate_suite(args.T, args.seed, args.n_train, args.n_eval)
    path = save_suite(suite, out / "suite.jsonl")
    _record_config(out, args)
    print(f"wrote {sum(len(d.train) + len(d.eval) for d in suite)} records for "
          f"{len(suite)} tasks to {path}")
    return 0


def cmd_pretrain(parser, args) -> int:
    out = _out_dir(args, "pretrain")
    config = RunConfig(
        seed=args.seed,
        pretrain_samples=args.samples,
        pretrain_epochs=args.epochs,
    )
    mixture = generate_pretrain_mixture(config.pretrain_samples, args.seed)
    model = pretrain_backbone(mixture, config, progress=not args.quiet)
    acc = heldout_accuracy(model, mixture)
    model.save(out / "backbone.pt")
    _record_config(out, args, config)
    (out / "pretrain_report.json").write_text(
        json.dumps({"heldout_accuracy": acc, "samples": config.pretrain_samples,
                    "epochs": config.pretrain_epochs}, indent=2) + "\n"
    )
    print(f"pretrained backbone saved to {out / 'backbone.pt'}; held-out accuracy {acc:.3f}")
    return 0


def cmd_train(parser, args) -> int:
    backbone_path = _require_file(parser, args.backbone, "--backbone checkpoint")
    suite_path = _require_file(parser, args.suite, "--suite file")
    out = _out_dir(args, "train")
    model = BackboneModel.load(backbone_path)
    suite = load_suite(suite_path)
    config = _config_from_args(args, T=len(suite))
    enc = _encoders(config)
    _record_config(out, args, config)

    store, matrix, reports, traces = run_continual(model, enc, suite, config, collect_traces=True)
    store.save(out / "store.pt")
    torch.save({"kind": "encoders", "state": enc.state()}, out / "encoders.pt")
    matrix.to_csv(out / "matrix.csv")
    report = compute_report(matrix) if len(suite) > 1 else None
    if report is not None:
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    with (out / "stage_reports.jsonl").open("w") as fh:
        for rep in reports:
            fh.write(json.dumps(rep.to_dict()) + "\n")
    write_traces(traces, out / "traces.jsonl")
    heat = similarity_heatmap(store, enc, suite)
    names = [ds.spec.name for ds in suite]
    save_matrix_csv(heat, names, out / "heatmap.csv")
    print(f"run artifacts in {out}")
    if report is not None:
        print(report.table())
    else:
        print(f"single-task accuracy: {matrix.get(1, 1):.2f}")
    return 0


def cmd_eval(parser, args) -> int:
    backbone_path = _require_file(parser, args.backbone, "--backbone checkpoint")
    store_path = _require_file(parser, args.store, "--store file")
    suite_path = _require_file(parser, args.suite, "--suite file")
    out = _out_dir(args, "eval")
    model = BackboneModel.load(backbone_path)
    suite = load_suite(suite_path)
    config = _config_from_args(args, T=len(suite))
    store = PromptStore.load(store_path, expect={"M": config.M, "d_m": config.d_m, "d_g": config.d_g})
    enc = _encoders(config)
    _record_config(out, args, config)
    traces: list[dict] = []
    prefix_mode = "concat_all" if args.no_selection else "select"
    row = {}
    for ds in suite:
        row[ds.spec.name] = evaluate_task(
            model, store, enc, ds, config.k,
            guidance_mode=config.guidance_mode,
            prefix_mode=prefix_mode,
            trace_sink=traces,
        )
    (out / "eval.json").write_text(json.dumps(row, indent=2) + "\n")
    if traces:
        write_traces(traces, out / "traces.jsonl")
    for name, acc in row.items():
        print(f"{name}: {acc:.2f}")
    print(f"mean: {np.mean(list(row.values())):.2f}")
    return 0


def cmd_metrics(parser, args) -> int:
    matrix_path = _require_file(parser, args.matrix, "matrix CSV")
    matrix = AccuracyMatrix.from_csv(matrix_path)
    report = compute_report(matrix)
    print(report.table())
    if args.out:
        out = _out_dir(args, "metrics")
        _record_config(out, args)
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return 0


def cmd_oracle(parser, args) -> int:
    name_or_path = args.matrix
    if name_or_path in FIXTURE_NAMES:
        matrix = load_fixture(name_or_path)
        expect_name = name_or_path
    else:
        matrix_path = _require_file(parser, name_or_path, "matrix CSV or fixture name")
        matrix = AccuracyMatrix.from_csv(matrix_path)
        stem = matrix_path.stem
        expect_name = args.expect or (stem if stem in FIXTURE_NAMES else None)
    report = compute_report(matrix)
    print(report.table())
    if expect_name is None:
        print("no embedded fixture matched; metrics printed without comparison")
        return 0
    diffs = compare_report(report, expected_metrics(expect_name))
    if diffs:
        print(f"oracle[{expect_name}]: FAIL ({len(diffs)} mismatches)")
        for d in diffs:
            print(f"  {d}")
        return 1
    print(f"oracle[{expect_name}]: PASS (all values within 0.01)")
    return 0


def cmd_grid(parser, args) -> int:
    plan_path = _require_file(parser, args.plan, "--plan file")
    out = _out_dir(args, "grid")
    plan = ExperimentPlan.load(plan_path)
    if args.backbone:
        model = BackboneModel.load(_require_file(parser, args.backbone, "--backbone checkpoint"))
    else:
        mixture = generate_pretrain_mixture(plan.config.pretrain_samples, plan.config.seed)
        model = pretrain_backbone(mixture, plan.config, progress=not args.quiet)
        model.save(out / "backbone.pt")
    enc = _encoders(plan.config)
    _record_config(out, args, plan.config)
    results = run_plan(plan, model, enc, out, collect_traces=True, progress=not args.quiet)
    for variant, by_seed in results.items():
        reports = [r.report for r in by_seed.values() if r.report is not None]
        if reports:
            means = [r.last_mean for r in reports]
            print(f"{variant}: last mean {np.mean(means):.2f} over {len(means)} seed(s)")
        else:
            rows = [r.row for r in by_seed.values() if r.row is not None]
            if rows:
                print(f"{variant}: row mean {np.mean([np.mean(r) for r in rows]):.2f}")
    print(f"grid artifacts in {out}")
    return 0


def cmd_bench(parser, args) -> int:
    out = _out_dir(args, "bench")
    config = RunConfig(seed=args.seed)
    if args.backbone:
        model = BackboneModel.load(_require_file(parser, args.backbone, "--backbone checkpoint"))
    else:
        model = BackboneModel.from_config(config).freeze()
    t_values = tuple(int(v) for v in args.T_values.split(","))
    rows = complexity_benchmark(
        model, config, t_values,
        batch_size=args.batch_size or 16,
        gen_len=args.gen_len, reps=args.reps, seed=args.seed,
    )
    _record_config(out, args, config)
    header = f"{'T':>4} {'method':>12} {'prefix_tokens':>14} {'ms_per_token':>13}"
    print(header)
    lines = ["T,method,prefix_tokens,ms_per_token"]
    for r in rows:
        print(f"{r['T']:>4} {r['method']:>12} {r['prefix_tokens']:>14} {r['ms_per_token']:>13.4f}")
        lines.append(f"{r['T']},{r['method']},{r['prefix_tokens']},{r['ms_per_token']:.6f}")
    (out / "bench.csv").write_text("\n".join(lines) + "\n")
    if max(t_values) >= 8:
        print(f"speedup at T=8: x{benchmark_speedup(rows, 8):.2f}")
    return 0


def cmd_plot(parser, args) -> int:
    run_dir = _require_file(parser, args.run, "--run directory")
    out = Path(args.out) if args.out else run_dir / "plots"
    out.mkdir(parents=True, exist_ok=True)
    made = []
    heat_csv = run_dir / "heatmap.csv"
    if heat_csv.exists():
        heat, labels = load_matrix_csv(heat_csv)
        made.append(matrix_heatmap(
            heat, labels, labels, out / "similarity_heatmap.png",
            title="prototype vs task guidance similarity",
        ))
    traces_path = run_dir / "traces.jsonl"
    if traces_path.exists():
        traces = read_traces(traces_path)
        hist = selection_histogram(traces)
        labels = [f"task{i+1}" for i in range(hist.shape[0])]
        save_matrix_csv(hist, labels, out / "selection_histogram.csv")
        made.append(matrix_heatmap(
            hist, labels, labels, out / "selection_histogram.png",
            title="selection probability by true task",
        ))
    if not made:
        parser.error(f"nothing to plot in {run_dir} (need heatmap.csv or traces.jsonl)")
    for p in made:
        print(f"wrote {p}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptcl",
        description="continual instruction tuning lab with dual-guided prompt routing",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=str, default=None,
                       help="output directory (default: $PROMPTCL_OUT/<command>)")

    p = sub.add_parser("gen-suite", help="generate a synthetic task suite")
    common(p)
    p.add_argument("--T", type=int, default=4)
    p.add_argument("--n-train", dest="n_train", type=int, default=500)
    p.add_argument("--n-eval", dest="n_eval", type=int, default=200)
    p.add_argument("--confusable", action="store_true",
                   help="suite separable only by joint image+text guidance")
    p.set_defaults(func=cmd_gen_suite)

    p = sub.add_parser("pretrain", help="pretrain and freeze the backbone")
    common(p)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    def train_flags(p):
        p.add_argument("--M", type=int, default=None)
        p.add_argument("--k", type=int, default=None)
        p.add_argument("--epochs-per-task", dest="epochs_per_task", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--lr", dest="learning_rate", type=float, default=None)
        p.add_argument("--guidance-mode", dest="guidance_mode", choices=GUIDANCE_MODES, default=None)
        p.add_argument("--encoder-seed", dest="encoder_seed", type=int, default=None)
        p.add_argument("--no-fusion", action="store_true")
        p.add_argument("--no-selection", action="store_true")

    p = sub.add_parser("train", help="run the continual training loop")
    common(p)
    p.add_argument("--backbone", type=str, required=True)
    p.add_argument("--suite", type=str, required=True)
    train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained store on a suite")
    common(p)
    p.add_argument("--backbone", type=str, required=True)
    p.add_argument("--store", type=str, required=True)
    p.add_argument("--suite", type=str, required=True)
    train_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics", help="compute continual metrics from a matrix CSV")
    common(p)
    p.add_argument("matrix", type=str)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("oracle", help="check metrics against embedded fixtures")
    common(p)
    p.add_argument("matrix", type=str,
                   help=f"fixture name {FIXTURE_NAMES} or a matrix CSV path")
    p.add_argument("--expect", choices=FIXTURE_NAMES, default=None,
                   help="compare a CSV against this fixture's expected values")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("grid", help="run an experiment plan over variants and seeds")
    common(p)
    p.add_argument("--plan", type=str, required=True)
    p.add_argument("--backbone", type=str, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("bench", help="prefix-size complexity benchmark")
    common(p)
    p.add_argument("--T-values", dest="T_values", type=str, default="2,4,8")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--gen-len", dest="gen_len", type=int, default=8)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--backbone", type=str, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plot", help="render heatmap and selection histogram images")
    common(p)
    p.add_argument("--run", type=str, required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(parser, args)
    except PromptclError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
