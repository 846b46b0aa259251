"""Two-phase training: backbone pretraining, MoA insertion, joint training.

A baseline run (no MoA) trains the backbone alone for the same total number
of steps, so MoA and baseline runs get equal budgets.
"""

import logging
from contextlib import nullcontext
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional

from tqdm import tqdm

from core.errors import ContractError, LoadError
from core.optim import Adam
from evaluation.tracer import EventType, RunTracer
from tools.corpus import Corpus
from training.config import TrainConfig
from training.schedule import peak_lr
from training.trainer import (MetricsLog, StepResult, TrainingExample, evaluate_losses, load_examples,
                              sample_batch, train_step)
from tts.config import ModelConfig
from tts.model import MoATTS, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

BACKBONE_CKPT = "backbone.ckpt"
MOA_CKPT = "moa.ckpt"
METRICS_CSV = "metrics.csv"


class TrainingPhase(Enum):
    INIT = "INIT"
    PHASE1 = "PHASE1"
    INSERT_MOA = "INSERT_MOA"
    PHASE2 = "PHASE2"
    BASELINE = "BASELINE"
    COMPLETED = "COMPLETED"


_TRANSITIONS = {
    TrainingPhase.INIT: {TrainingPhase.PHASE1, TrainingPhase.BASELINE, TrainingPhase.PHASE2},
    TrainingPhase.PHASE1: {TrainingPhase.INSERT_MOA},
    TrainingPhase.INSERT_MOA: {TrainingPhase.PHASE2},
    TrainingPhase.PHASE2: {TrainingPhase.COMPLETED},
    TrainingPhase.BASELINE: {TrainingPhase.COMPLETED},
    TrainingPhase.COMPLETED: set(),
}


class RunState:
    def __init__(self):
        self.history: List[TrainingPhase] = [TrainingPhase.INIT]
        self.current_phase = TrainingPhase.INIT
        self.steps_done: Dict[str, int] = {}
        self.val_losses: Dict[str, Dict[str, float]] = {}

    def update_state(self, new_phase: TrainingPhase):
        if new_phase not in _TRANSITIONS[self.current_phase]:
            raise ContractError(f"illegal training transition {self.current_phase.value} -> {new_phase.value}")
        logger.info("Training phase %s -> %s", self.current_phase.value, new_phase.value)
        self.current_phase = new_phase
        self.history.append(new_phase)


@dataclass
class TrainingResult:
    final_checkpoint: Path
    checkpoints: Dict[str, Path]
    metrics_path: Path
    steps: Dict[str, int]
    val_losses: Dict[str, Dict[str, float]]
    history: List[str] = field(default_factory=list)


class TwoPhaseTrainer:
    def __init__(self, corpus: Corpus, model_config: ModelConfig, train_config: TrainConfig, out_dir,
                 baseline: bool = False, tracer: Optional[RunTracer] = None, progress: bool = True):
        self.corpus = corpus
        self.model_config = model_config
        self.train_config = train_config
        self.out_dir = Path(out_dir)
        self.baseline = baseline or model_config.moa is None
        self.tracer = tracer
        self.progress = progress
        self.state = RunState()
        self.provenance = {
            "seed": train_config.seed,
            "model_config": model_config.model_dump(mode="json"),
            "train_config": train_config.model_dump(mode="json"),
            "corpus_seed": corpus.seed,
        }

    def _trace(self, event: EventType, data: dict, duration_ms: float = 0.0) -> None:
        if self.tracer is not None:
            self.tracer.log_event(event, data, duration_ms)

    def _checkpoint(self, model: MoATTS, optimizer: Adam, name: str, phase: str, step: int) -> Path:
        path = self.out_dir / name
        save_checkpoint(model, path, {"phase": phase, "step": step, "adam_step": optimizer.step_count,
                                      **self.provenance}, optimizer.state())
        self._trace(EventType.CHECKPOINT, {"path": str(path), "phase": phase, "step": step})
        return path

    def _run_steps(self, model: MoATTS, optimizer: Adam, examples: List[TrainingExample], metrics: MetricsLog,
                   phase: str, first: int, last: int, ckpt_name: str) -> Optional[StepResult]:
        cfg = self.train_config
        result = None
        steps = range(first, last + 1)
        for step in tqdm(steps, desc=phase, unit="step", disable=None if self.progress else True):
            batch = sample_batch(examples, cfg.batch_size, cfg.seed, step)
            result = train_step(model, optimizer, batch, step, cfg, phase=phase)
            metrics.write(result)
            if step % cfg.log_every == 0:
                logger.info("%s step %d lr=%.3e loss=%.4f (mel %.4f dur %.4f pitch %.4f energy %.4f imp %.4f)",
                            phase, step, result.lr, result.loss_total, result.loss_mel, result.loss_dur,
                            result.loss_pitch, result.loss_energy, result.loss_importance)
            if step % cfg.checkpoint_every == 0 and step != last:
                self._checkpoint(model, optimizer, ckpt_name, phase, step)
        self.state.steps_done[phase] = self.state.steps_done.get(phase, 0) + len(steps)
        return result

    def _validate(self, model: MoATTS, val_examples: List[TrainingExample], phase: str) -> Dict[str, float]:
        if not val_examples:
            return {}
        losses = evaluate_losses(model, val_examples)
        self.state.val_losses[phase] = losses
        self._trace(EventType.EVAL, {"phase": phase, **losses})
        logger.info("%s validation loss %.4f", phase, losses["loss_total"])
        return losses

    def _resume(self, path) -> tuple:
        model, meta, moments = load_checkpoint(path)
        for key in ("seed", "train_config", "corpus_seed"):
            if meta.get(key) != self.provenance[key]:
                raise LoadError(f"{path}: checkpoint {key} does not match this run")
        expected = self.model_config.without_moa() if meta.get("phase") != "phase2" else self.model_config
        if model.config.model_dump() != expected.model_dump():
            raise LoadError(f"{path}: checkpoint model config does not match {self.model_config.name!r}")
        if (meta.get("phase") == "baseline") != self.baseline:
            raise LoadError(f"{path}: a {meta.get('phase')} checkpoint cannot resume a "
                            f"{'baseline' if self.baseline else 'two-phase'} run")
        optimizer = Adam(model.parameters(), betas=self.train_config.betas, eps=self.train_config.eps)
        optimizer.load_state(moments, int(meta.get("adam_step", 0)))
        logger.info("Resuming from %s at %s step %s", path, meta.get("phase"), meta.get("step"))
        return model, optimizer, meta.get("phase"), int(meta.get("step", 0))

    def run(self, resume: Optional[str] = None) -> TrainingResult:
        cfg = self.train_config
        self.out_dir.mkdir(parents=True, exist_ok=True)
        stats = self.corpus.feature_stats("train")
        examples = load_examples(self.corpus, self.corpus.split("train"), stats)
        val_examples = load_examples(self.corpus, self.corpus.split("val")[: cfg.val_utterances], stats)
        logger.info("Training on %d utterances, validating on %d", len(examples), len(val_examples))
        peak = cfg.lr_scale * peak_lr(self.model_config.d_model, cfg.warmup_steps)
        logger.info("Learning rate peaks at %.3e at step %d", peak, cfg.warmup_steps)

        if resume:
            model, optimizer, phase, done = self._resume(resume)
            model.stats = stats
        else:
            model = MoATTS(self.model_config.without_moa(), seed=cfg.seed, stats=stats)
            optimizer = Adam(model.parameters(), betas=cfg.betas, eps=cfg.eps)
            phase, done = ("baseline" if self.baseline else "phase1"), 0

        checkpoints: Dict[str, Path] = {}
        metrics_path = self.out_dir / METRICS_CSV
        with MetricsLog(metrics_path, self.provenance, append=bool(resume)) as metrics:
            if self.baseline:
                self.state.update_state(TrainingPhase.BASELINE)
                with self._phase("baseline", cfg.total_steps):
                    self._run_steps(model, optimizer, examples, metrics, "baseline", done + 1, cfg.total_steps,
                                    BACKBONE_CKPT)
                self._validate(model, val_examples, "baseline")
                checkpoints["backbone"] = self._checkpoint(model, optimizer, BACKBONE_CKPT, "baseline",
                                                           cfg.total_steps)
            else:
                if phase == "phase1":
                    self.state.update_state(TrainingPhase.PHASE1)
                    with self._phase("phase1", cfg.phase1_steps):
                        self._run_steps(model, optimizer, examples, metrics, "phase1", done + 1, cfg.phase1_steps,
                                        BACKBONE_CKPT)
                    self._validate(model, val_examples, "phase1")
                    checkpoints["backbone"] = self._checkpoint(model, optimizer, BACKBONE_CKPT, "phase1",
                                                               cfg.phase1_steps)
                    self.state.update_state(TrainingPhase.INSERT_MOA)
                    model.insert_moa(self.model_config.moa, seed=cfg.seed)
                    joint = Adam(model.parameters(), betas=cfg.betas, eps=cfg.eps)
                    joint.inherit(optimizer)
                    optimizer, done = joint, cfg.phase1_steps
                else:
                    checkpoints["backbone"] = self.out_dir / BACKBONE_CKPT
                self.state.update_state(TrainingPhase.PHASE2)
                with self._phase("phase2", cfg.phase2_steps):
                    self._run_steps(model, optimizer, examples, metrics, "phase2", done + 1, cfg.total_steps,
                                    MOA_CKPT)
                self._validate(model, val_examples, "phase2")
                checkpoints["moa"] = self._checkpoint(model, optimizer, MOA_CKPT, "phase2", cfg.total_steps)

        self.state.update_state(TrainingPhase.COMPLETED)
        final = checkpoints["backbone" if self.baseline else "moa"]
        return TrainingResult(final_checkpoint=final, checkpoints=checkpoints, metrics_path=metrics_path,
                              steps=dict(self.state.steps_done), val_losses=dict(self.state.val_losses),
                              history=[p.value for p in self.state.history])

    def _phase(self, name: str, steps: int):
        if self.tracer is not None:
            return self.tracer.phase(name, steps=steps)
        return nullcontext()


def train_two_phase(corpus: Corpus, model_config: ModelConfig, train_config: TrainConfig, out_dir,
                    baseline: bool = False, tracer: Optional[RunTracer] = None, resume: Optional[str] = None,
                    progress: bool = True) -> TrainingResult:
    trainer = TwoPhaseTrainer(corpus, model_config, train_config, out_dir, baseline=baseline, tracer=tracer,
                              progress=progress)
    return trainer.run(resume=resume)
