"""Desk-scale FastSpeech2-style acoustic model with optional MoA sites.

Phonemes are embedded and encoded, the speaker embedding is added to the
encoder output, the variance adapter predicts log durations and frame-level
pitch and energy, the length regulator expands phoneme states to frames and
the decoder maps frames to mel bins. MoA modules sit after the conv stack of
each variance predictor and after the feed-forward sub-layer of each decoder
block, all gated by the same speaker embedding.

Backbone and MoA weights are drawn from separate generators, so a model built
with MoA has exactly the backbone of the same-seed model built without it.
"""

import copy
import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from core.errors import ContractError, DimensionError, EmptyInputError, InputError, LoadError
from core.module import Module, parameter
from core.serialization import load_tensors, save_tensors
from core.tensor import Tensor, as_tensor, getitem, relu, reshape
from tts.config import FeatureStats, MoAConfig, ModelConfig
from tts.layers import Conv1d, Dropout, FFTBlock, LayerNorm, Linear, sinusoid_table
from tts.moa import MoAModule, SpecializedMoA
from tts.speaker_embed import SpeakerEmbedder

logger = logging.getLogger(__name__)

OPTIMIZER_PREFIX = "optim."


class VariancePredictor(Module):
    """Two conv -> ReLU -> LayerNorm -> Dropout stages, optional MoA, linear to one value per row."""

    def __init__(self, rng: np.random.Generator, d_model: int, d_filter: int, kernel: int, dropout: float,
                 site_id: str):
        self.site_id = site_id
        self.conv1 = Conv1d(rng, d_model, d_filter, kernel)
        self.norm1 = LayerNorm(d_filter)
        self.dropout1 = Dropout(dropout)
        self.conv2 = Conv1d(rng, d_filter, d_filter, kernel)
        self.norm2 = LayerNorm(d_filter)
        self.dropout2 = Dropout(dropout)
        self.moa: Optional[Module] = None
        self.out = Linear(rng, d_filter, 1)

    def __call__(self, h: Tensor, x_e: Optional[Tensor] = None, trace: Optional[dict] = None) -> Tensor:
        x = self.dropout1(self.norm1(relu(self.conv1(h))))
        x = self.dropout2(self.norm2(relu(self.conv2(x))))
        if self.moa is not None:
            x = self.moa(x, x_e, trace)
        return reshape(self.out(x), (x.shape[0],))


@dataclass
class VarianceTargets:
    """Teacher-forcing targets; pitch and energy are normalized by :class:`FeatureStats`."""

    durations: np.ndarray
    pitch: Optional[np.ndarray] = None
    energy: Optional[np.ndarray] = None


@dataclass
class VarianceOutput:
    dur_pred: Tensor          # [P], log(d + 1)
    pitch_pred: Tensor        # [T], normalized
    energy_pred: Tensor       # [T], normalized
    hidden: Tensor            # [T, d_model]
    durations: np.ndarray     # the durations that expanded the hidden states


@dataclass
class ForwardOutput:
    mel: Tensor
    dur_pred: Tensor
    pitch_pred: Tensor
    energy_pred: Tensor
    durations: np.ndarray
    x_e: Tensor
    gates: Dict[str, Tensor] = field(default_factory=dict)


@dataclass
class SynthesisResult:
    mel: np.ndarray            # [T, n_mels]
    log_durations: np.ndarray  # [P], raw duration predictor output
    dur_pred: np.ndarray       # [P], rounded as at inference
    durations: np.ndarray      # [P], durations used for length regulation
    pitch: np.ndarray          # [T], log-Hz
    energy: np.ndarray         # [T]
    x_e: np.ndarray
    gates: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ParameterCount:
    total: int
    backbone: int
    moa_added: int
    inference: int
    per_component: "OrderedDict[str, int]"


def length_regulate(h: Tensor, durations: Sequence[int]) -> Tensor:
    """Repeat row p of ``h`` durations[p] times, preserving order."""
    h = as_tensor(h)
    durations = np.asarray(durations)
    if durations.ndim != 1 or durations.shape[0] != h.shape[0]:
        raise InputError(f"length_regulate: {durations.shape} durations for {h.shape[0]} phonemes")
    if durations.size and (np.any(durations < 0) or np.any(durations != np.round(durations))):
        raise InputError(f"length_regulate: durations must be non-negative integers, got {durations.tolist()}")
    durations = durations.astype(np.int64)
    if durations.sum() == 0:
        raise EmptyInputError("length_regulate: all durations are zero")
    return getitem(h, np.repeat(np.arange(h.shape[0]), durations))


def predicted_durations(log_durations: np.ndarray) -> np.ndarray:
    """round(exp(p) - 1) clamped at zero; the largest prediction keeps at least one frame."""
    log_durations = np.asarray(log_durations, dtype=np.float64)
    durations = np.maximum(np.round(np.exp(log_durations) - 1.0), 0.0).astype(np.int64)
    if durations.size and durations.sum() == 0:
        durations[int(np.argmax(log_durations))] = 1
    return durations


class MoATTS(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, stats: Optional[FeatureStats] = None):
        self.config = config.without_moa()
        self.seed = seed
        self.stats = stats or FeatureStats()
        rng = np.random.default_rng([seed, 0])
        d, f = config.d_model, config.d_filter

        self.embedder = SpeakerEmbedder(rng, config.ref_layers, config.ref_width, config.d_emb)
        self.phoneme_embedding = parameter(rng.normal(0.0, d ** -0.5, size=(config.vocab_size, d)))
        self.encoder = [FFTBlock(rng, d, f, config.n_heads, config.fft_kernel, config.dropout)
                        for _ in range(config.enc_layers)]
        self.duration_predictor = self._predictor(rng, "duration")
        self.pitch_predictor = self._predictor(rng, "pitch")
        self.energy_predictor = self._predictor(rng, "energy")
        self.pitch_embedding = Linear(rng, 1, d)
        self.energy_embedding = Linear(rng, 1, d)
        self.decoder = [FFTBlock(rng, d, f, config.n_heads, config.fft_kernel, config.dropout)
                        for _ in range(config.dec_layers)]
        self.mel_linear = Linear(rng, d, config.n_mels)

        self.set_dropout_seed(seed)
        self.name_parameters()
        if config.moa is not None:
            self.insert_moa(config.moa)

    def _predictor(self, rng: np.random.Generator, site_id: str) -> VariancePredictor:
        c = self.config
        return VariancePredictor(rng, c.d_model, c.pred_filter, c.pred_kernel, c.dropout, site_id)

    @property
    def predictors(self) -> List[VariancePredictor]:
        return [self.duration_predictor, self.pitch_predictor, self.energy_predictor]

    @property
    def has_moa(self) -> bool:
        return self.config.moa is not None

    def moa_sites(self) -> Iterator[Tuple[str, Module]]:
        """(site id, MoA module) pairs in forward order."""
        for predictor in self.predictors:
            if predictor.moa is not None:
                yield predictor.site_id, predictor.moa
        for block in self.decoder:
            if block.moa is not None:
                yield block.moa.site_id, block.moa

    def insert_moa(self, moa: MoAConfig, seed: Optional[int] = None) -> None:
        """Attach fresh MoA modules; zero up-projections keep every output unchanged."""
        if self.has_moa:
            raise ContractError("model already carries MoA modules")
        config = self.config.with_moa(moa)
        rng = np.random.default_rng([self.seed if seed is None else seed, 1])
        d_emb = config.d_emb
        if moa.in_predictors:
            for predictor in self.predictors:
                predictor.moa = MoAModule(rng, config.pred_filter, d_emb, moa, site_id=predictor.site_id)
        if moa.in_decoder:
            for i, block in enumerate(self.decoder):
                block.moa = MoAModule(rng, config.d_model, d_emb, moa, site_id=f"decoder.{i}", layer_index=i)
        self.config = config
        self.train(self.training)
        self.name_parameters()
        logger.info("Inserted MoA (N=%d, k=%s, B=%d) at %d sites", moa.n_adapters, moa.top_k, moa.bottleneck,
                    len(list(self.moa_sites())))

    def set_dropout_seed(self, seed: int, step: int = 0) -> None:
        rng = np.random.default_rng([seed, step, 2])
        for module in self.modules():
            if isinstance(module, Dropout):
                module.rng = rng

    # -- forward pieces -------------------------------------------------

    def _check_embedding(self, x_e: Tensor) -> Tensor:
        x_e = as_tensor(x_e)
        if x_e.shape != (self.config.d_emb,):
            raise DimensionError(f"speaker embedding must have shape ({self.config.d_emb},), got {x_e.shape}")
        return x_e

    def encode(self, phonemes: Sequence[int], x_e: Tensor) -> Tensor:
        ids = np.asarray(phonemes)
        if ids.ndim != 1 or ids.size == 0:
            raise InputError(f"phoneme sequence must be a non-empty 1-D id list, got shape {ids.shape}")
        if not np.issubdtype(ids.dtype, np.integer):
            raise InputError(f"phoneme ids must be integers, got dtype {ids.dtype}")
        bad = ids[(ids < 0) | (ids >= self.config.vocab_size)]
        if bad.size:
            raise InputError(f"phoneme id {int(bad[0])} outside vocabulary of {self.config.vocab_size}")
        x_e = self._check_embedding(x_e)
        h = getitem(self.phoneme_embedding, ids) + sinusoid_table(ids.size, self.config.d_model)
        for block in self.encoder:
            h = block(h)
        return h + x_e

    def variance_adapter(self, h: Tensor, x_e: Tensor, targets: Optional[VarianceTargets] = None,
                         trace: Optional[dict] = None) -> VarianceOutput:
        if self.training and (targets is None or targets.pitch is None or targets.energy is None):
            raise ContractError("training mode needs duration, pitch and energy targets")
        dur_pred = self.duration_predictor(h, x_e, trace)
        if targets is None:
            durations = predicted_durations(dur_pred.data)
        else:
            durations = np.asarray(targets.durations, dtype=np.int64)
        expanded = length_regulate(h, durations)
        frames = expanded.shape[0]
        pitch_pred = self.pitch_predictor(expanded, x_e, trace)
        energy_pred = self.energy_predictor(expanded, x_e, trace)

        pitch = pitch_pred if targets is None or targets.pitch is None else as_tensor(targets.pitch)
        energy = energy_pred if targets is None or targets.energy is None else as_tensor(targets.energy)
        if pitch.shape != (frames,) or energy.shape != (frames,):
            raise InputError(f"pitch {pitch.shape} / energy {energy.shape} targets do not match {frames} frames")
        hidden = (expanded
                  + self.pitch_embedding(reshape(pitch, (frames, 1)))
                  + self.energy_embedding(reshape(energy, (frames, 1))))
        return VarianceOutput(dur_pred, pitch_pred, energy_pred, hidden, durations)

    def decode(self, hidden: Tensor, x_e: Tensor, trace: Optional[dict] = None) -> Tensor:
        hidden = as_tensor(hidden)
        if hidden.ndim != 2 or hidden.shape[0] < 1 or hidden.shape[1] != self.config.d_model:
            raise DimensionError(f"decoder input must be [T>=1, {self.config.d_model}], got {hidden.shape}")
        x = hidden + sinusoid_table(hidden.shape[0], self.config.d_model)
        for block in self.decoder:
            x = block(x, x_e, trace)
        return self.mel_linear(x)

    def forward(self, phonemes: Sequence[int], x_e: Tensor,
                targets: Optional[VarianceTargets] = None) -> ForwardOutput:
        gates: Dict[str, Tensor] = {}
        h = self.encode(phonemes, x_e)
        variance = self.variance_adapter(h, x_e, targets, gates)
        mel = self.decode(variance.hidden, x_e, gates)
        return ForwardOutput(mel, variance.dur_pred, variance.pitch_pred, variance.energy_pred,
                             variance.durations, as_tensor(x_e), gates)

    __call__ = forward

    # -- inference -------------------------------------------------------

    def speaker_embedding(self, reference=None, references: Optional[Sequence] = None) -> Tensor:
        if references:
            return self.embedder.embed_many([as_tensor(r) for r in references])
        if reference is None:
            raise InputError("a reference utterance or a speaker embedding is required")
        return self.embedder(as_tensor(reference))

    def synthesize(self, phonemes: Sequence[int], reference=None, x_e=None,
                   durations: Optional[Sequence[int]] = None,
                   references: Optional[Sequence] = None) -> SynthesisResult:
        """Inference with dropout off; ``durations`` switches to ground-truth alignment."""
        was_training = self.training
        self.eval()
        try:
            embedding = self.speaker_embedding(reference, references) if x_e is None else as_tensor(x_e)
            targets = None if durations is None else VarianceTargets(np.asarray(durations))
            out = self.forward(phonemes, embedding, targets)
        finally:
            self.train(was_training)
        stats = self.stats
        log_durations = out.dur_pred.data.copy()
        return SynthesisResult(
            mel=out.mel.data.copy(),
            log_durations=log_durations,
            dur_pred=predicted_durations(log_durations),
            durations=out.durations,
            pitch=out.pitch_pred.data * stats.pitch_std + stats.pitch_mean,
            energy=out.energy_pred.data * stats.energy_std + stats.energy_mean,
            x_e=out.x_e.data.copy(),
            gates={site: w.data.copy() for site, w in out.gates.items()},
        )

    def fingerprint(self) -> str:
        digest = hashlib.sha256(self.config.model_dump_json().encode("utf-8"))
        for name, p in self.named_parameters():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()[:16]


def specialize(model: MoATTS, x_e: Tensor) -> MoATTS:
    """Copy of ``model`` with every MoA site pruned to the adapters ``x_e`` selects.

    The copy drops the gating networks and holds the surviving adapters with
    their weights frozen to this speaker.
    """
    pruned = copy.deepcopy(model)
    x_e = pruned._check_embedding(as_tensor(x_e).detach())
    for predictor in pruned.predictors:
        if isinstance(predictor.moa, MoAModule):
            predictor.moa = predictor.moa.specialize(x_e)
    for block in pruned.decoder:
        if isinstance(block.moa, MoAModule):
            block.moa = block.moa.specialize(x_e)
    return pruned


def _component(name: str) -> str:
    if ".moa." in name:
        return "moa.gates" if ".gate." in name else "moa.adapters"
    return name.split(".", 1)[0]


def count_parameters(model: Union[MoATTS, ModelConfig]) -> ParameterCount:
    """Trainable parameters by component.

    ``inference`` counts the backbone, the gates and only the adapters that a
    sparse gate can select at one site (k of N).
    """
    if isinstance(model, ModelConfig):
        model = MoATTS(model)
    per_component: "OrderedDict[str, int]" = OrderedDict()
    for name, p in model.named_parameters():
        key = _component(name)
        per_component[key] = per_component.get(key, 0) + p.size
    moa_added = per_component.get("moa.adapters", 0) + per_component.get("moa.gates", 0)
    total = sum(per_component.values())
    backbone = total - moa_added

    inference = backbone
    for _, site in model.moa_sites():
        if isinstance(site, MoAModule):
            active = site.gate.top_k or site.n_adapters
            inference += site.gate.num_parameters() + active * site.adapters[0].num_parameters()
        elif isinstance(site, SpecializedMoA):
            inference += site.num_parameters()
    return ParameterCount(total, backbone, moa_added, inference, per_component)


def save_checkpoint(model: MoATTS, path, meta: Optional[dict] = None,
                    extra_tensors: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Parameters plus the exact config, feature stats and seed in the file header."""
    header = {
        "kind": "checkpoint",
        "config": model.config.model_dump(mode="json"),
        "stats": model.stats.model_dump(),
        "seed": model.seed,
        "fingerprint": model.fingerprint(),
        **(meta or {}),
    }
    tensors = OrderedDict(model.state_dict())
    for name, array in (extra_tensors or {}).items():
        tensors[OPTIMIZER_PREFIX + name] = array
    save_tensors(path, tensors, header)
    logger.debug("Saved checkpoint %s (%d tensors)", path, len(tensors))


def load_checkpoint(path, expected: Optional[ModelConfig] = None
                    ) -> Tuple[MoATTS, dict, "OrderedDict[str, np.ndarray]"]:
    """Rebuild the model a checkpoint describes.

    Returns the model, the header meta and any optimizer tensors. A checkpoint
    whose config differs from ``expected`` is refused.
    """
    tensors, meta = load_tensors(path)
    try:
        config = ModelConfig.model_validate(meta["config"])
        stats = FeatureStats.model_validate(meta.get("stats", {}))
    except (KeyError, ValidationError) as exc:
        raise LoadError(f"{path}: checkpoint header carries no valid model config ({exc})") from None
    if expected is not None and expected.model_dump() != config.model_dump():
        raise LoadError(f"{path}: checkpoint config {config.name!r} does not match the requested config "
                        f"{expected.name!r}")
    model = MoATTS(config, seed=int(meta.get("seed", 0)), stats=stats)
    params = OrderedDict((k, v) for k, v in tensors.items() if not k.startswith(OPTIMIZER_PREFIX))
    extra = OrderedDict((k[len(OPTIMIZER_PREFIX):], v) for k, v in tensors.items() if k.startswith(OPTIMIZER_PREFIX))
    model.load_state_dict(params)
    logger.info("Loaded checkpoint %s (%s, %d parameters)", path, config.name, model.num_parameters())
    return model, meta, extra
