"""Parametric multi-speaker renderer.

Speakers come in four groups (female/male crossed with professional and
non-professional). Each utterance is a random phoneme string with
speaker-scaled durations, a log-F0 contour, an energy track, a log-mel
spectrogram built from per-phoneme spectral templates, and layered reference
features: fixed noisy linear views of pooled (mel, pitch, energy) statistics
that stand in for the layers of a frozen self-supervised encoder.

Everything is a pure function of its seeds.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from core.errors import ContractError

FRAME_SHIFT_S = 0.010
F_CENTER_HZ = 220.0
M_CENTER_HZ = 110.0
REFERENCE_VIEW_SEED = 20240611


class SpeakerGroup(str, Enum):
    F_PRO = "F-pro"
    F_NON = "F-non"
    M_PRO = "M-pro"
    M_NON = "M-non"

    @property
    def female(self) -> bool:
        return self.value.startswith("F")

    @property
    def professional(self) -> bool:
        return self.value.endswith("pro")


class SpeakerSpec(BaseModel):
    speaker_id: str
    group: SpeakerGroup
    base_log_f0: float = Field(..., description="Natural log of the speaker's median F0 in Hz")
    f0_range: float = Field(..., gt=0, description="Log-F0 excursion scale")
    tempo: float = Field(..., gt=0, description="Multiplier on phoneme durations")
    spectral_tilt: float
    formant_shift: float
    style_dynamics: float = Field(..., gt=0, description="Prosodic liveliness; larger for professional groups")


class CorpusConfig(BaseModel):
    n_per_group: int = Field(8, ge=1)
    utts_per_speaker: int = Field(50, ge=1)
    val_per_group: int = Field(1, ge=0)
    test_per_group: int = Field(1, ge=0)
    seed: int = 0
    vocab_size: int = Field(40, ge=2)
    n_mels: int = Field(20, ge=2)
    ref_layers: int = Field(4, ge=1)
    ref_width: int = Field(16, ge=1)
    ref_pool: int = Field(4, ge=1, description="Frames averaged into one reference frame")
    min_phonemes: int = Field(8, ge=1)
    max_phonemes: int = Field(30, ge=1)

    @model_validator(mode="after")
    def _check_counts(self):
        if self.val_per_group + self.test_per_group >= self.n_per_group:
            raise ValueError(f"{self.n_per_group} speakers per group leave none for training after "
                             f"{self.val_per_group} val + {self.test_per_group} test")
        if self.min_phonemes > self.max_phonemes:
            raise ValueError(f"min_phonemes {self.min_phonemes} exceeds max_phonemes {self.max_phonemes}")
        return self


@dataclass
class Utterance:
    utterance_id: str
    speaker_id: str
    phonemes: np.ndarray      # [P] int
    durations: np.ndarray     # [P] int, frames
    pitch: np.ndarray         # [T] log-Hz
    energy: np.ndarray        # [T]
    mel: np.ndarray           # [T, n_mels] log-mel
    ref_features: np.ndarray  # [L, T_ref, F]

    @property
    def n_frames(self) -> int:
        return int(self.mel.shape[0])

    @property
    def seconds(self) -> float:
        return self.n_frames * FRAME_SHIFT_S


def _draw_speaker(rng: np.random.Generator, group: SpeakerGroup, index: int) -> SpeakerSpec:
    center = F_CENTER_HZ if group.female else M_CENTER_HZ
    if group.professional:
        dynamics, f0_range = rng.uniform(0.6, 1.0), rng.uniform(0.15, 0.25)
    else:
        dynamics, f0_range = rng.uniform(0.15, 0.45), rng.uniform(0.06, 0.12)
    tilt = rng.uniform(-0.6, -0.1) if group.female else rng.uniform(-1.2, -0.7)
    shift = rng.uniform(-0.08, 0.08) + (0.06 if group.female else -0.06)
    return SpeakerSpec(
        speaker_id=f"{group.value}-{index:02d}",
        group=group,
        base_log_f0=math.log(center) + rng.normal(0.0, 0.12),
        f0_range=f0_range,
        tempo=rng.uniform(0.8, 1.25),
        spectral_tilt=tilt,
        formant_shift=shift,
        style_dynamics=dynamics,
    )


def make_speakers(n_per_group: int, seed: int) -> List[SpeakerSpec]:
    """``n_per_group`` speakers for each of the four groups, in group order."""
    if n_per_group < 1:
        raise ContractError(f"n_per_group must be at least 1, got {n_per_group}")
    rng = np.random.default_rng(seed)
    return [_draw_speaker(rng, group, i) for group in SpeakerGroup for i in range(n_per_group)]


def assign_splits(speakers: Sequence[SpeakerSpec], val_per_group: int, test_per_group: int,
                  seed: int) -> Dict[str, List[str]]:
    """Speaker-disjoint train/val/test sets with every group represented in each split."""
    rng = np.random.default_rng([seed, 3])
    splits: Dict[str, List[str]] = {"train": [], "val": [], "test": []}
    for group in SpeakerGroup:
        ids = [s.speaker_id for s in speakers if s.group == group]
        order = [ids[i] for i in rng.permutation(len(ids))]
        splits["test"] += sorted(order[:test_per_group])
        splits["val"] += sorted(order[test_per_group:test_per_group + val_per_group])
        splits["train"] += sorted(order[test_per_group + val_per_group:])
    train, val, test = (set(splits[k]) for k in ("train", "val", "test"))
    assert not (train & val or train & test or val & test), "speaker splits overlap"
    return splits


def _phoneme_table(vocab_size: int):
    """Class-level constants: base duration, accent, voicing and two spectral peaks."""
    rng = np.random.default_rng([REFERENCE_VIEW_SEED, vocab_size])
    base = 3.0 + (np.arange(vocab_size) * 7 % 6)
    accent = rng.uniform(-1.0, 1.0, vocab_size)
    voiced = np.arange(vocab_size) % 5 != 0
    centers = np.sort(rng.uniform(0.1, 0.9, (vocab_size, 2)), axis=1)
    amps = rng.uniform(1.0, 2.5, (vocab_size, 2))
    return base, accent, voiced, centers, amps


def _reference_views(n_inputs: int, layers: int, width: int) -> List[np.ndarray]:
    return [np.random.default_rng([REFERENCE_VIEW_SEED, l]).normal(0.0, 1.0 / math.sqrt(n_inputs),
                                                                     (n_inputs, width))
            for l in range(layers)]


def pool_frames(x: np.ndarray, size: int) -> np.ndarray:
    starts = np.arange(0, x.shape[0], size)
    counts = np.diff(np.append(starts, x.shape[0]))
    return np.add.reduceat(x, starts, axis=0) / counts.reshape((-1,) + (1,) * (x.ndim - 1))


def render_utterance(spec: SpeakerSpec, text_seed: int, config: Optional[CorpusConfig] = None,
                     utterance_id: Optional[str] = None) -> Utterance:
    config = config or CorpusConfig()
    rng = np.random.default_rng(text_seed)
    base, accent, voiced, centers, amps = _phoneme_table(config.vocab_size)

    n_phonemes = int(rng.integers(config.min_phonemes, config.max_phonemes + 1))
    phonemes = rng.integers(0, config.vocab_size, n_phonemes)
    jitter = rng.integers(-1, 2, n_phonemes)
    durations = np.maximum(np.round(base[phonemes] * spec.tempo) + jitter, 1).astype(np.int64)
    frames = int(durations.sum())
    per_frame = np.repeat(phonemes, durations)

    # log-F0: sinusoidal phrase contour, declination and per-phoneme accents
    t = np.arange(frames) / max(frames - 1, 1)
    cycles, phase = rng.uniform(0.5, 2.0), rng.uniform(0.0, 2.0 * math.pi)
    contour = (spec.style_dynamics * np.sin(2.0 * math.pi * cycles * t + phase)
               + spec.style_dynamics * accent[per_frame]
               - 0.5 * t)
    pitch = spec.base_log_f0 + spec.f0_range * contour

    peaks = np.tanh(contour)
    energy = np.where(voiced[per_frame],
                      0.8 + 0.4 * spec.style_dynamics * peaks,
                      0.1 + 0.05 * rng.random(frames))

    freq = np.linspace(0.0, 1.0, config.n_mels)
    shifted = centers[per_frame] * (1.0 + spec.formant_shift)
    bumps = amps[per_frame][:, :, None] * np.exp(-0.5 * ((freq[None, None, :] - shifted[:, :, None]) / 0.08) ** 2)
    harmonic = 0.3 * np.cos(2.0 * math.pi * freq[None, :] * np.exp(pitch)[:, None] / 55.0)
    mel = (np.log(energy + 1e-3)[:, None]
           + bumps.sum(axis=1)
           + spec.spectral_tilt * freq[None, :]
           + harmonic * voiced[per_frame][:, None]
           + rng.normal(0.0, 0.02, (frames, config.n_mels)))

    summary = np.concatenate([mel, (pitch - 5.0)[:, None], energy[:, None]], axis=1)
    pooled = pool_frames(summary, config.ref_pool)
    views = _reference_views(summary.shape[1], config.ref_layers, config.ref_width)
    ref_features = np.stack([np.tanh(pooled @ w) + rng.normal(0.0, 0.05 * (l + 1), (pooled.shape[0], config.ref_width))
                             for l, w in enumerate(views)])

    return Utterance(
        utterance_id=utterance_id or f"{spec.speaker_id}_{text_seed}",
        speaker_id=spec.speaker_id,
        phonemes=phonemes.astype(np.int64),
        durations=durations,
        pitch=pitch,
        energy=energy,
        mel=mel,
        ref_features=ref_features,
    )
