"""Desk-scale comparison of the model grid.

``run_experiment`` trains four roles on one corpus under every seed:

    small   size-matched baseline without MoA
    large   larger baseline without MoA
    sparse  small backbone + sparse (top-k) MoA
    dense   small backbone + dense MoA

Each run is synthesized with ground-truth durations, scored on the held-out
speakers, benchmarked for RTF and, for the MoA roles, its gates are correlated
across speakers. ``check_claims`` turns the medians over seeds into verdicts.

Layout under the output directory::

    corpus/                      only when no corpus is given
    seed<S>/<role>/ckpt/         training artifacts
    seed<S>/<role>/pred/         predictions
    seed<S>/<role>/report/       summary.json, utterances.csv, speakers.csv
    seed<S>/<role>/gates_*       correlation CSV + heatmap data (MoA roles)
    seed<S>/compare.json         quartile table of the four roles
    experiment.json              runs, medians, claims and provenance
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from core.errors import ConfigurationError, InputError
from core.serialization import atomic_write_text
from evaluation.benchmark import bench_items, rtf_bench
from evaluation.evaluate import Evaluator, compare_reports, synthesize_corpus
from evaluation.gating import (collect_traces, gating_correlation, group_means, write_correlation_csv,
                               write_heatmap_data)
from tools.corpus import Corpus, build_corpus
from tools.synth import CorpusConfig
from training.config import TrainConfig
from training.orchestrator import train_two_phase
from tts.config import ModelConfig, RoutingMode, load_config, read_config_file, validate_config
from tts.model import count_parameters, load_checkpoint
from tts.moa import count_moa_flops

logger = logging.getLogger(__name__)

ROLES = ("small", "large", "sparse", "dense")
MOA_ROLES = ("sparse", "dense")
EXPERIMENT_JSON = "experiment.json"
FLOPS_FRAMES = 100


class ExperimentConfig(BaseModel):
    """Four model roles trained on a shared corpus under each seed with equal step budgets."""

    name: str = "desk_comparison"
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    models: Dict[str, str] = Field(default_factory=dict,
                                   description="Model config file per role, relative to the experiment file")
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    split: str = "test"
    gate_layer: int = Field(-1, description="Decoder layer whose gate weights are correlated")
    rtf_tolerance: float = Field(0.10, gt=0.0, description="Allowed relative RTF gap between sparse and dense")
    min_speedup: float = Field(1.3, gt=0.0, description="Required RTF ratio of the large baseline over sparse MoA")
    large_margin: float = Field(1.05, gt=0.0, description="Factor by which sparse MoA may trail the large baseline")

    @field_validator("seeds")
    @classmethod
    def _distinct_seeds(cls, v):
        if len(set(v)) != len(v):
            raise ValueError(f"seeds must be distinct, got {v}")
        return v


def load_experiment(path) -> Tuple[ExperimentConfig, Dict[str, ModelConfig]]:
    """Experiment config plus the model config of every role, resolved next to the experiment file."""
    path = Path(path)
    config = validate_config(ExperimentConfig, read_config_file(path), source=str(path))
    missing = [role for role in ROLES if role not in config.models]
    if missing:
        raise ConfigurationError(f"{path}: models lack role(s) {missing}")
    models = {role: load_config(path.parent / config.models[role]) for role in ROLES}
    return config, models


def check_models(models: Dict[str, ModelConfig]) -> None:
    missing = [role for role in ROLES if role not in models]
    if missing:
        raise ConfigurationError(f"experiment models lack role(s) {missing}")
    for role in ("small", "large"):
        if models[role].moa is not None:
            raise ConfigurationError(f"{role} baseline {models[role].name!r} must not carry MoA")
    for role, mode in (("sparse", RoutingMode.SPARSE), ("dense", RoutingMode.DENSE)):
        moa = models[role].moa
        if moa is None or moa.mode != mode:
            raise ConfigurationError(f"{role} model {models[role].name!r} needs {mode.value} MoA")
        backbone = models[role].without_moa().model_copy(update={"name": models["small"].name})
        if backbone.model_dump() != models["small"].model_dump():
            logger.warning("%s model %r does not share the small backbone %r", role, models[role].name,
                           models["small"].name)


@dataclass
class VariantRun:
    role: str
    name: str
    seed: int
    checkpoint: str
    report: str
    params_total: int
    params_inference: int
    mcd: Optional[float] = None
    f0_rmse: Optional[float] = None
    dur_rmse: Optional[float] = None
    rtf: Optional[float] = None
    within: Optional[float] = None
    between: Optional[float] = None


SUMMARY_FIELDS = ("mcd", "f0_rmse", "dur_rmse", "rtf", "within", "between")


def _median(values) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.median(values)) if values else None


def summarize_runs(runs: List[VariantRun]) -> Dict[str, Dict[str, Optional[float]]]:
    """Median over seeds of each role's metrics."""
    summary = {}
    for role in ROLES:
        mine = [r for r in runs if r.role == role]
        if mine:
            summary[role] = {name: _median(getattr(r, name) for r in mine) for name in SUMMARY_FIELDS}
            summary[role]["n_seeds"] = len(mine)
    return summary


def _verdict(passed: Optional[bool], detail: str) -> dict:
    return {"passed": passed, "detail": detail}


def check_claims(summary: Dict[str, Dict[str, Optional[float]]], models: Dict[str, ModelConfig],
                 config: ExperimentConfig) -> Dict[str, dict]:
    """Pass/fail per comparative claim; ``passed`` is None when an input is missing."""
    claims = {}
    sparse, dense = models["sparse"], models["dense"]
    flops = [count_moa_flops(m.d_model, m.moa.bottleneck, m.moa.n_adapters, m.moa.active_adapters, m.d_emb,
                             FLOPS_FRAMES) for m in (sparse, dense)]
    same = flops[0].adapter_macs == flops[1].adapter_macs and flops[0].combine_macs == flops[1].combine_macs
    claims["inference_macs_equal"] = _verdict(
        same, f"adapter MACs per decoder site over {FLOPS_FRAMES} frames: sparse {flops[0].adapter_macs}, "
              f"dense {flops[1].adapter_macs}")

    def get(role, name):
        return summary.get(role, {}).get(name)

    rtf_s, rtf_d, rtf_l = get("sparse", "rtf"), get("dense", "rtf"), get("large", "rtf")
    if rtf_s is None or rtf_d is None:
        claims["sparse_dense_rtf"] = _verdict(None, "missing RTF")
    else:
        gap = abs(rtf_s - rtf_d) / rtf_d
        claims["sparse_dense_rtf"] = _verdict(gap < config.rtf_tolerance,
                                              f"relative gap {gap:.3f} (limit {config.rtf_tolerance})")
    if rtf_s is None or rtf_l is None:
        claims["large_slower_than_sparse"] = _verdict(None, "missing RTF")
    else:
        ratio = rtf_l / rtf_s
        claims["large_slower_than_sparse"] = _verdict(ratio >= config.min_speedup,
                                                      f"RTF ratio {ratio:.3f} (needs {config.min_speedup})")

    for claim, reference, factor in (("sparse_beats_small", "small", 1.0),
                                     ("sparse_near_large", "large", config.large_margin)):
        pairs = [(get("sparse", m), get(reference, m)) for m in ("mcd", "dur_rmse")]
        if any(a is None or b is None for a, b in pairs):
            claims[claim] = _verdict(None, f"missing metrics for sparse or {reference}")
            continue
        (mcd_s, mcd_r), (dur_s, dur_r) = pairs
        claims[claim] = _verdict(mcd_s <= factor * mcd_r and dur_s <= factor * dur_r,
                                 f"MCD {mcd_s:.4f} vs {factor:g}x{mcd_r:.4f}, "
                                 f"dur RMSE {dur_s:.4f} vs {factor:g}x{dur_r:.4f}")

    within, between = get("sparse", "within"), get("sparse", "between")
    if within is None or between is None:
        claims["gates_follow_groups"] = _verdict(None, "missing within- or between-group correlation")
    else:
        claims["gates_follow_groups"] = _verdict(within > between,
                                                 f"within {within:.4f} vs between {between:.4f}")
    return claims


def _run_variant(role: str, model_config: ModelConfig, seed: int, corpus: Corpus, config: ExperimentConfig,
                 run_dir: Path, eval_config_path, progress: bool) -> VariantRun:
    train_config = config.train.model_copy(update={"seed": seed})
    result = train_two_phase(corpus, model_config, train_config, run_dir / "ckpt", progress=progress)
    model, meta, _ = load_checkpoint(result.final_checkpoint)
    provenance = {"experiment": config.name, "role": role, "seed": seed,
                  "checkpoint": str(result.final_checkpoint), "config": model.config.model_dump(mode="json")}

    synthesize_corpus(model, corpus, run_dir / "pred", split=config.split, gt_durations=True,
                      provenance=provenance)
    evaluator = Evaluator(eval_config_path)
    report = evaluator.run(run_dir / "pred", corpus=corpus, out_dir=run_dir / "report", provenance=provenance)
    overall = report["summary"]["all"]
    params = count_parameters(model)
    run = VariantRun(role=role, name=model.config.name, seed=seed, checkpoint=str(result.final_checkpoint),
                     report=str(run_dir / "report"), params_total=params.total, params_inference=params.inference,
                     mcd=overall["mcd"]["median"], f0_rmse=overall["f0_rmse"]["median"],
                     dur_rmse=overall["dur_rmse"]["median"])

    eval_config = evaluator.config
    utterances = [corpus.load(e) for e in corpus.split(config.split)[: eval_config.bench_utterances]]
    run.rtf = rtf_bench(model, bench_items(model, utterances), repeats=eval_config.rtf_repeats,
                        warmup=eval_config.rtf_warmup, min_seconds=eval_config.min_bench_seconds).rtf_median

    if role in MOA_ROLES:
        traces = collect_traces(model, corpus, split=config.split, seed=seed)
        matrix = gating_correlation(traces, config.gate_layer)
        site = matrix.site.replace(".", "")
        write_correlation_csv(run_dir / f"gates_{site}_corr.csv", matrix, provenance)
        write_heatmap_data(run_dir / f"gates_{site}_heatmap.dat", matrix, provenance)
        means = group_means(matrix)
        run.within, run.between = means["within"], means["between"]
    logger.info("%s seed %d (%s): MCD %s dB, dur RMSE %s, RTF %.4f", role, seed, run.name, run.mcd, run.dur_rmse,
                run.rtf)
    return run


def run_experiment(config: ExperimentConfig, models: Dict[str, ModelConfig], out_dir,
                   corpus: Optional[Corpus] = None, eval_config_path=None, provenance: Optional[dict] = None,
                   progress: bool = True) -> dict:
    check_models(models)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if corpus is None:
        corpus = build_corpus(out / "corpus", config.corpus, progress=progress)
    if not corpus.split(config.split):
        raise InputError(f"split {config.split!r} of {corpus.root} is empty")
    logger.info("Experiment %s: roles %s over seeds %s on %s", config.name,
                ", ".join(f"{r}={models[r].name}" for r in ROLES), config.seeds, corpus.root)

    runs: List[VariantRun] = []
    for seed in config.seeds:
        seed_dir = out / f"seed{seed}"
        for role in ROLES:
            runs.append(_run_variant(role, models[role], seed, corpus, config, seed_dir / role, eval_config_path,
                                     progress))
        compare_reports([seed_dir / role / "report" for role in ROLES], seed_dir / "compare.json",
                        names=[f"{role}:{models[role].name}" for role in ROLES])

    summary = summarize_runs(runs)
    claims = check_claims(summary, models, config)
    result = {
        **(provenance or {}),
        "experiment": config.model_dump(mode="json"),
        "models": {role: models[role].model_dump(mode="json") for role in ROLES},
        "corpus": str(corpus.root),
        "runs": [asdict(r) for r in runs],
        "summary": summary,
        "claims": claims,
    }
    atomic_write_text(out / EXPERIMENT_JSON, json.dumps(result, indent=2))
    for name, verdict in claims.items():
        logger.info("claim %s: %s (%s)", name, {True: "pass", False: "fail", None: "n/a"}[verdict["passed"]],
                    verdict["detail"])
    logger.info("Experiment results saved to: %s", out / EXPERIMENT_JSON)
    return result
