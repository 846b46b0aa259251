"""One optimization step and the pieces around it.

The batch loss is the mean over utterances of the mel, log-duration, pitch
and energy MSEs plus ``importance_weight`` times the mean over MoA sites of
the importance loss over the batch's gate vectors. Utterances are run one at
a time (no padding) under a single graph, since the importance term couples
the items of a batch.
"""

import csv
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from core import functional as F
from core.errors import NonFiniteLossError
from core.optim import Adam, clip_grad_norm
from core.tensor import Graph, Node, Tensor, as_tensor, mean, stack
from tools.corpus import Corpus, ManifestEntry
from tools.synth import Utterance
from training.config import TrainConfig
from training.schedule import noam_lr
from tts.config import FeatureStats
from tts.model import MoATTS, VarianceTargets
from tts.moa import mean_importance_loss

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "phase", "lr", "loss_total", "loss_mel", "loss_dur", "loss_pitch", "loss_energy",
                 "loss_importance", "grad_norm")


@dataclass
class TrainingExample:
    utterance_id: str
    speaker_id: str
    phonemes: np.ndarray
    durations: np.ndarray
    log_durations: np.ndarray
    pitch: np.ndarray          # normalized
    energy: np.ndarray         # normalized
    mel: np.ndarray
    ref_features: np.ndarray


def prepare_example(utt: Utterance, stats: FeatureStats) -> TrainingExample:
    return TrainingExample(
        utterance_id=utt.utterance_id,
        speaker_id=utt.speaker_id,
        phonemes=utt.phonemes,
        durations=utt.durations,
        log_durations=np.log(utt.durations + 1.0),
        pitch=(utt.pitch - stats.pitch_mean) / stats.pitch_std,
        energy=(utt.energy - stats.energy_mean) / stats.energy_std,
        mel=utt.mel,
        ref_features=utt.ref_features,
    )


def load_examples(corpus: Corpus, entries: Sequence[ManifestEntry], stats: FeatureStats) -> List[TrainingExample]:
    return [prepare_example(corpus.load(e), stats) for e in entries]


def sample_batch(examples: Sequence[TrainingExample], batch_size: int, seed: int, step: int
                 ) -> List[TrainingExample]:
    """Batch for ``step``; a pure function of (seed, step) so resumed runs see the same data."""
    rng = np.random.default_rng([seed, 4, step])
    picks = rng.choice(len(examples), size=min(batch_size, len(examples)), replace=False)
    return [examples[i] for i in picks]


@dataclass
class LossBreakdown:
    total: Tensor
    mel: Tensor
    dur: Tensor
    pitch: Tensor
    energy: Tensor
    importance: Tensor

    def values(self) -> Dict[str, float]:
        return {f"loss_{k}": float(getattr(self, k).item())
                for k in ("total", "mel", "dur", "pitch", "energy", "importance")}


def compute_losses(model: MoATTS, batch: Sequence[TrainingExample], importance_weight: float) -> LossBreakdown:
    mel, dur, pitch, energy = [], [], [], []
    site_rows: Dict[str, List[Tensor]] = defaultdict(list)
    for ex in batch:
        x_e = model.embedder(ex.ref_features)
        out = model.forward(ex.phonemes, x_e, VarianceTargets(ex.durations, ex.pitch, ex.energy))
        mel.append(F.mse_loss(out.mel, ex.mel))
        dur.append(F.mse_loss(out.dur_pred, ex.log_durations))
        pitch.append(F.mse_loss(out.pitch_pred, ex.pitch))
        energy.append(F.mse_loss(out.energy_pred, ex.energy))
        for site, weights in out.gates.items():
            site_rows[site].append(weights)

    loss_mel, loss_dur = mean(stack(mel)), mean(stack(dur))
    loss_pitch, loss_energy = mean(stack(pitch)), mean(stack(energy))
    total = loss_mel + loss_dur + loss_pitch + loss_energy
    importance = mean_importance_loss(site_rows) if site_rows else as_tensor(0.0)
    if importance_weight > 0 and site_rows:
        total = total + importance * importance_weight
    return LossBreakdown(total, loss_mel, loss_dur, loss_pitch, loss_energy, importance)


def describe_node(node: Optional[Node]) -> str:
    if node is None:
        return "no recorded tensor is non-finite"
    names = [t.name for t in node.inputs if t.name]
    where = f" (inputs: {', '.join(names)})" if names else ""
    return f"{node.output.name or node.tag}{where}"


@dataclass
class StepResult:
    step: int
    phase: str
    lr: float
    loss_total: float
    loss_mel: float
    loss_dur: float
    loss_pitch: float
    loss_energy: float
    loss_importance: float
    grad_norm: float


def train_step(model: MoATTS, optimizer: Adam, batch: Sequence[TrainingExample], step: int,
               config: TrainConfig, phase: str = "train") -> StepResult:
    """Forward, backward, clip, one Adam update at the Noam rate for ``step``."""
    importance_weight = model.config.moa.importance_weight if model.has_moa else 0.0
    lr = noam_lr(step, model.config.d_model, config.warmup_steps) * config.lr_scale
    model.train()
    model.set_dropout_seed(config.seed, step)
    optimizer.zero_grad()
    with Graph() as graph:
        losses = compute_losses(model, batch, importance_weight)
        value = losses.total.item()
        if not np.isfinite(value):
            raise NonFiniteLossError(f"loss is {value} at step {step}; first non-finite tensor: "
                                     f"{describe_node(graph.first_nonfinite())}")
        graph.backward(losses.total)
    grad_norm = clip_grad_norm(optimizer.params, config.grad_clip)
    optimizer.step(lr)
    return StepResult(step=step, phase=phase, lr=lr, grad_norm=grad_norm, **losses.values())


def evaluate_losses(model: MoATTS, examples: Sequence[TrainingExample]) -> Dict[str, float]:
    """Batch losses in inference mode (dropout off, nothing recorded)."""
    importance_weight = model.config.moa.importance_weight if model.has_moa else 0.0
    was_training = model.training
    model.eval()
    try:
        return compute_losses(model, examples, importance_weight).values()
    finally:
        model.train(was_training)


class MetricsLog:
    """Per-step CSV; leading ``#`` lines carry the config and seed."""

    def __init__(self, path, provenance: dict, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not (append and self.path.is_file())
        self._handle = open(self.path, "w" if fresh else "a", newline="")
        self._writer = csv.DictWriter(self._handle, fieldnames=METRIC_FIELDS)
        if fresh:
            for key, value in provenance.items():
                self._handle.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
            self._writer.writeheader()

    def write(self, result: StepResult) -> None:
        self._writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(result).items()})
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> "MetricsLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path) -> List[Dict[str, str]]:
    with open(path, newline="") as handle:
        rows = [line for line in handle if not line.startswith("#")]
    return list(csv.DictReader(rows))
