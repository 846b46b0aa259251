import argparse
import json
import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Optional

# Add the current directory to sys.path to ensure imports work
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from core.errors import InputError, MoATTSError, OutputExistsError
from core.serialization import atomic_write_text
from evaluation.benchmark import bench_items, rtf_bench
from evaluation.evaluate import Evaluator, compare_reports, load_eval_config, synthesize_corpus
from evaluation.experiment import ExperimentConfig, load_experiment, run_experiment
from evaluation.gating import (collect_traces, gating_correlation, group_means, write_correlation_csv,
                               write_heatmap_data, write_traces_csv)
from evaluation.tracer import EventType, RunTracer, tracing_enabled
from tools.corpus import build_corpus, load_corpus
from tools.synth import CorpusConfig
from training.config import TrainConfig
from training.orchestrator import train_two_phase
from tts.config import FULL_SCALE, FULL_SCALE_DENSE, FULL_SCALE_SPARSE, ModelConfig, load_config, validate_config
from tts.model import count_parameters, load_checkpoint

logger = logging.getLogger("moa_tts")

COMMANDS = ("gen-data", "train", "synth", "eval", "bench", "analyze-gates", "count-params", "compare",
            "experiment")


def runs_dir() -> Path:
    return Path(os.getenv("MOA_TTS_RUNS_DIR", "runs"))


def make_run_dir(command: str, seed: int) -> Path:
    run_dir = runs_dir() / f"{datetime.now().strftime('%Y%m%d_%H%M%S_%f')}_seed{seed}_{command}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def setup_logging(run_dir: Path, level: Optional[str]) -> None:
    level = (level or os.getenv("LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(sys.stdout),
            logging.FileHandler(run_dir / "moa_tts.log")
        ],
        force=True,
    )


def _require_empty(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise OutputExistsError(f"{path} already exists; pass --force to overwrite it")


def _print_table(rows: List[List[str]]) -> None:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    for row in rows:
        cells = [str(cell).rjust(w) if i else str(cell).ljust(w) for i, (cell, w) in enumerate(zip(row, widths))]
        print("  ".join(cells))


# -- sub-commands ---------------------------------------------------------

def cmd_gen_data(args, run_dir: Path, provenance: dict) -> int:
    config = validate_config(CorpusConfig, {"n_per_group": args.n_per_group, "utts_per_speaker": args.utts,
                                            "seed": args.seed}, source="gen-data options")
    corpus = build_corpus(args.out, config, force=args.force, progress=not args.quiet)
    print(f"wrote {len(corpus.entries)} utterances by {len(corpus.speakers)} speakers to {corpus.root} "
          f"(manifest sha256 {corpus.manifest_hash()})")
    return 0


def cmd_train(args, run_dir: Path, provenance: dict) -> int:
    corpus = load_corpus(args.corpus)
    model_config = load_config(args.config)
    train_data = load_config(args.train, TrainConfig).model_dump() if args.train else {}
    for key in ("seed", "phase1_steps", "phase2_steps", "batch_size"):
        if getattr(args, key) is not None:
            train_data[key] = getattr(args, key)
    train_config = validate_config(TrainConfig, train_data, source="train options")
    out = Path(args.out) if args.out else run_dir / "train"
    if not args.resume:
        _require_empty(out, args.force)

    tracer = RunTracer(run_dir.name) if tracing_enabled(default=True) else None
    if tracer:
        tracer.log_event(EventType.RUN_START, {"command": "train", "config": model_config.name,
                                               "baseline": args.baseline, "seed": train_config.seed})
    try:
        result = train_two_phase(corpus, model_config, train_config, out, baseline=args.baseline, tracer=tracer,
                                 resume=args.resume, progress=not args.quiet)
    except MoATTSError as exc:
        if tracer:
            tracer.log_event(EventType.ERROR, {"error": exc.one_line()})
            tracer.save_trace(str(out / "trace.json"))
        raise
    if tracer:
        tracer.log_event(EventType.RUN_END, {"steps": result.steps, "final": str(result.final_checkpoint)})
        tracer.save_trace(str(out / "trace.json"))
    print(f"trained {model_config.name} for {sum(result.steps.values())} steps "
          f"({', '.join(f'{k}={v}' for k, v in result.steps.items())}); final checkpoint {result.final_checkpoint}")
    return 0


def cmd_synth(args, run_dir: Path, provenance: dict) -> int:
    model, meta, _ = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.corpus)
    out = Path(args.out) if args.out else run_dir / "synth"
    _require_empty(out, args.force)
    provenance = {**provenance, "checkpoint": str(args.ckpt), "seed": meta.get("seed"),
                  "config": model.config.model_dump(mode="json")}
    written = synthesize_corpus(model, corpus, out, split=args.split, gt_durations=args.gt_durations,
                                non_parallel=args.non_parallel, n_refs=args.refs, provenance=provenance)
    print(f"synthesized {written} utterances into {out}")
    return 0


def cmd_eval(args, run_dir: Path, provenance: dict) -> int:
    if (args.ref is None) == (args.corpus is None):
        raise InputError("eval needs exactly one of --ref and --corpus")
    evaluator = Evaluator(args.eval_config)
    out = Path(args.out) if args.out else run_dir / "eval"
    corpus = load_corpus(args.corpus) if args.corpus else None
    report = evaluator.run(args.pred, ref_dir=args.ref, corpus=corpus, out_dir=out, provenance=provenance)
    rows = [["subset", "metric", "q1", "median", "q3", "n"]]
    for subset, metrics in report["summary"].items():
        for metric, q in metrics.items():
            rows.append([subset, metric] + ["-" if q[k] is None else f"{q[k]:.4f}" for k in ("q1", "median", "q3")]
                        + [str(q["n"])])
    _print_table(rows)
    return 0


def cmd_bench(args, run_dir: Path, provenance: dict) -> int:
    eval_config = load_eval_config(args.eval_config)
    corpus = load_corpus(args.corpus)
    entries = corpus.split(args.split)[: eval_config.bench_utterances]
    if not entries:
        raise InputError(f"split {args.split!r} of {corpus.root} is empty")
    utterances = [corpus.load(e) for e in entries]
    repeats = args.repeats or eval_config.rtf_repeats
    tracer = RunTracer(run_dir.name) if tracing_enabled() else None

    rows, results = [["checkpoint", "model", "params", "rtf_median", "rtf_iqr"]], []
    for ckpt in args.ckpt:
        model, meta, _ = load_checkpoint(ckpt)
        items = bench_items(model, utterances)
        report = rtf_bench(model, items, repeats=repeats, warmup=eval_config.rtf_warmup,
                           min_seconds=eval_config.min_bench_seconds)
        params = count_parameters(model)
        results.append({"checkpoint": str(ckpt), "model": model.config.name, "seed": meta.get("seed"),
                        "config": model.config.model_dump(mode="json"), "total": params.total,
                        "inference": params.inference, "rtf_median": report.rtf_median, "rtf_iqr": report.rtf_iqr,
                        "rtfs": report.rtfs, "frames": report.frames, "lengthen": report.lengthen})
        rows.append([Path(ckpt).name, model.config.name, str(params.total), f"{report.rtf_median:.5f}",
                     f"{report.rtf_iqr:.5f}"])
        if tracer:
            tracer.log_event(EventType.BENCH, results[-1])
    seeds = sorted({r["seed"] for r in results if r["seed"] is not None})
    record = {**provenance, "seed": seeds[0] if len(seeds) == 1 else seeds,
              "eval_config": eval_config.model_dump(mode="json"), "repeats": repeats}
    atomic_write_text(run_dir / "bench.json", json.dumps({**record, "results": results}, indent=2))
    if tracer:
        tracer.save_trace(str(run_dir / "trace.json"))
    _print_table(rows)
    return 0


def cmd_analyze_gates(args, run_dir: Path, provenance: dict) -> int:
    corpus = load_corpus(args.corpus)
    out = Path(args.out) if args.out else run_dir / "gates"
    out.mkdir(parents=True, exist_ok=True)
    layers = args.layer or ["0", "-1"]
    summary, rows = {}, [["checkpoint", "mode", "site", "within", "between"]]
    for ckpt in args.ckpt:
        model, meta, _ = load_checkpoint(ckpt)
        mode = model.config.moa.mode.value if model.has_moa else "none"
        tag = f"{Path(ckpt).stem}_{mode}"
        header = {**provenance, "checkpoint": str(ckpt), "seed": meta.get("seed")}
        traces = collect_traces(model, corpus, split=args.split, seed=args.seed)
        write_traces_csv(out / f"{tag}_traces.csv", traces, header)
        for layer in layers:
            matrix = gating_correlation(traces, layer)
            site = matrix.site.replace(".", "")
            write_correlation_csv(out / f"{tag}_{site}_corr.csv", matrix, header)
            write_heatmap_data(out / f"{tag}_{site}_heatmap.dat", matrix, header)
            means = group_means(matrix)
            summary.setdefault(tag, {})[matrix.site] = means
            rows.append([Path(ckpt).name, mode, matrix.site] +
                        ["-" if means[k] is None else f"{means[k]:.4f}" for k in ("within", "between")])
    atomic_write_text(out / "gating_summary.json", json.dumps({**provenance, "sites": summary}, indent=2))
    _print_table(rows)
    return 0


def cmd_count_params(args, run_dir: Path, provenance: dict) -> int:
    configs = [FULL_SCALE, FULL_SCALE_SPARSE, FULL_SCALE_DENSE] if args.full_scale else []
    configs += [load_config(path) for path in args.config or []]
    if not configs:
        raise InputError("count-params needs --config or --full-scale")
    for config in configs:
        counts = count_parameters(config)
        print(f"{config.name}")
        rows = [["component", "params"]] + [[k, str(v)] for k, v in counts.per_component.items()]
        rows += [["backbone", str(counts.backbone)], ["moa_added", str(counts.moa_added)],
                 ["inference", str(counts.inference)], ["total", str(counts.total)]]
        _print_table(rows)
        print()
    return 0


def cmd_compare(args, run_dir: Path, provenance: dict) -> int:
    comparison = compare_reports(args.report, args.out, names=args.name)
    rows = [["run", "subset", "mcd", "f0_rmse", "dur_rmse"]]
    for run, subsets in comparison["table"].items():
        for subset, metrics in subsets.items():
            rows.append([run, subset] + ["-" if metrics[m]["median"] is None else f"{metrics[m]['median']:.4f}"
                                         for m in ("mcd", "f0_rmse", "dur_rmse")])
    _print_table(rows)
    return 0


def cmd_experiment(args, run_dir: Path, provenance: dict) -> int:
    config, models = load_experiment(args.config)
    if args.seeds:
        config = validate_config(ExperimentConfig, {**config.model_dump(), "seeds": args.seeds},
                                 source="experiment options")
    out = Path(args.out) if args.out else run_dir / "experiment"
    _require_empty(out, args.force)
    corpus = load_corpus(args.corpus) if args.corpus else None
    result = run_experiment(config, models, out, corpus=corpus, eval_config_path=args.eval_config,
                            provenance=provenance, progress=not args.quiet)

    rows = [["role", "model", "mcd", "dur_rmse", "f0_rmse", "rtf", "within", "between"]]
    for role, metrics in result["summary"].items():
        rows.append([role, models[role].name] + ["-" if metrics[m] is None else f"{metrics[m]:.4f}"
                                                 for m in ("mcd", "dur_rmse", "f0_rmse", "rtf", "within", "between")])
    _print_table(rows)
    print()
    verdicts = {True: "pass", False: "FAIL", None: "n/a"}
    _print_table([["claim", "verdict", "detail"]] +
                 [[name, verdicts[v["passed"]], v["detail"]] for name, v in result["claims"].items()])
    return 0


# -- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moa-tts", description="Desk-scale mixture-of-adapters zero-shot TTS")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default: $LOG_LEVEL or INFO)")
    parser.add_argument("--quiet", action="store_true", help="Disable progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Render the synthetic multi-speaker corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-group", type=int, default=8)
    p.add_argument("--utts", type=int, default=50, help="Utterances per speaker")
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="Two-phase training (or a single-phase baseline)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", required=True, help="Model config (JSON or TOML)")
    p.add_argument("--train", help="Training config (JSON or TOML)")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--phase1-steps", type=int)
    p.add_argument("--phase2-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--baseline", action="store_true", help="Train without MoA for phase1+phase2 steps")
    p.add_argument("--resume", help="Checkpoint to resume from")
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("synth", help="Synthesize a corpus split from speaker references")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out")
    p.add_argument("--split", default="test")
    p.add_argument("--gt-durations", action="store_true", help="Use ground-truth durations (aligned metrics)")
    p.add_argument("--non-parallel", action="store_true", help="Reference is another utterance of the speaker")
    p.add_argument("--refs", type=int, default=1, help="Average embeddings over this many references")
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("eval", help="Objective metrics of predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--eval-config")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("bench", help="Single-thread real-time-factor benchmark")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt", required=True, action="append")
    p.add_argument("--split", default="test")
    p.add_argument("--repeats", type=int)
    p.add_argument("--eval-config")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("analyze-gates", help="Speaker correlation of gate weights")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt", required=True, action="append")
    p.add_argument("--layer", action="append", help="Decoder layer index or site id (default: first and deepest)")
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_analyze_gates)

    p = sub.add_parser("count-params", help="Parameter table by component")
    p.add_argument("--config", action="append")
    p.add_argument("--full-scale", action="store_true")
    p.set_defaults(handler=cmd_count_params)

    p = sub.add_parser("compare", help="Side-by-side quartiles of several evaluation reports")
    p.add_argument("--report", required=True, action="append")
    p.add_argument("--name", action="append", help="Run names, one per --report")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("experiment", help="Train, score and benchmark the small/large/sparse/dense grid over seeds")
    p.add_argument("--config", required=True, help="Experiment config (JSON or TOML)")
    p.add_argument("--corpus", help="Existing corpus (default: render one from the experiment config)")
    p.add_argument("--out")
    p.add_argument("--seeds", type=int, nargs="+", help="Override the experiment's seeds")
    p.add_argument("--eval-config")
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_experiment)
    return parser


def dispatch(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2

    seed = getattr(args, "seed", None)
    run_dir = make_run_dir(args.command, 0 if seed is None else seed)
    setup_logging(run_dir, args.log_level)
    provenance = {"command": args.command, "argv": list(argv if argv is not None else sys.argv[1:]), "seed": seed}
    logger.info("Starting %s (run dir %s)", args.command, run_dir)
    try:
        return args.handler(args, run_dir, provenance)
    except MoATTSError as exc:
        logger.debug("%s failed", args.command, exc_info=True)
        print(exc.one_line(), file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
