"""Corpus build and loading.

On-disk layout of a corpus directory::

    corpus.json                     config, seed, speakers, splits, manifest hash
    manifest.jsonl                  one JSON object per utterance
    utterances/<speaker>/<utt>.moat tensor file: phonemes, durations, pitch,
                                    energy, mel, ref_features

The manifest is written last; a directory without one is not a corpus.
"""

import hashlib
import json
import logging
import shutil
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import numpy as np
from pydantic import BaseModel, ValidationError
from tqdm import tqdm

from core.errors import InputError, LoadError, OutputExistsError
from core.serialization import atomic_write_text, load_tensors, save_tensors
from tools.synth import CorpusConfig, SpeakerSpec, Utterance, assign_splits, make_speakers, render_utterance
from tts.config import FeatureStats

logger = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"
CORPUS_INFO = "corpus.json"
PAYLOAD_SUFFIX = ".moat"
SPLITS = ("train", "val", "test")


class ManifestEntry(BaseModel):
    utterance_id: str
    speaker_id: str
    group: str
    split: str
    path: str
    n_phonemes: int
    n_frames: int
    text_seed: int


def text_seed(seed: int, speaker_index: int, utterance_index: int) -> int:
    return int(np.random.SeedSequence([seed, speaker_index, utterance_index]).generate_state(1)[0])


def save_utterance(path, utt: Utterance, meta: dict) -> None:
    tensors = OrderedDict([
        ("phonemes", utt.phonemes), ("durations", utt.durations), ("pitch", utt.pitch),
        ("energy", utt.energy), ("mel", utt.mel), ("ref_features", utt.ref_features),
    ])
    save_tensors(path, tensors, {"utterance_id": utt.utterance_id, "speaker_id": utt.speaker_id, **meta})


def load_utterance(path) -> Utterance:
    tensors, meta = load_tensors(path)
    try:
        return Utterance(
            utterance_id=meta["utterance_id"],
            speaker_id=meta["speaker_id"],
            phonemes=tensors["phonemes"].astype(np.int64),
            durations=tensors["durations"].astype(np.int64),
            pitch=tensors["pitch"],
            energy=tensors["energy"],
            mel=tensors["mel"],
            ref_features=tensors["ref_features"],
        )
    except KeyError as exc:
        raise LoadError(f"{path}: utterance payload lacks {exc}") from None


def build_corpus(out_dir, config: Optional[CorpusConfig] = None, force: bool = False,
                 progress: bool = True) -> "Corpus":
    """Render every speaker's utterances and write the manifest.

    The result is a pure function of ``config``.
    """
    config = config or CorpusConfig()
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise OutputExistsError(f"{out} already exists; pass --force to overwrite it")
        for stale in (out / MANIFEST, out / CORPUS_INFO):
            stale.unlink(missing_ok=True)
        shutil.rmtree(out / "utterances", ignore_errors=True)
    out.mkdir(parents=True, exist_ok=True)

    speakers = make_speakers(config.n_per_group, config.seed)
    splits = assign_splits(speakers, config.val_per_group, config.test_per_group, config.seed)
    split_of = {sid: name for name, ids in splits.items() for sid in ids}
    provenance = {"seed": config.seed, "config": config.model_dump(mode="json")}

    lines = []
    total = len(speakers) * config.utts_per_speaker
    with tqdm(total=total, desc="rendering", unit="utt", disable=None if progress else True) as bar:
        for s_index, spec in enumerate(speakers):
            for u in range(config.utts_per_speaker):
                seed = text_seed(config.seed, s_index, u)
                utt_id = f"{spec.speaker_id}_{u:03d}"
                utt = render_utterance(spec, seed, config, utterance_id=utt_id)
                rel = f"utterances/{spec.speaker_id}/{utt_id}{PAYLOAD_SUFFIX}"
                save_utterance(out / rel, utt, {"group": spec.group.value, "split": split_of[spec.speaker_id],
                                                "text_seed": seed, **provenance})
                entry = ManifestEntry(utterance_id=utt_id, speaker_id=spec.speaker_id, group=spec.group.value,
                                      split=split_of[spec.speaker_id], path=rel, n_phonemes=len(utt.phonemes),
                                      n_frames=utt.n_frames, text_seed=seed)
                lines.append(json.dumps(entry.model_dump(), sort_keys=True))
                bar.update(1)

    manifest_text = "\n".join(lines) + "\n"
    info = {
        **provenance,
        "speakers": [s.model_dump(mode="json") for s in speakers],
        "splits": splits,
        "n_utterances": len(lines),
        "manifest_sha256": hashlib.sha256(manifest_text.encode("utf-8")).hexdigest(),
    }
    atomic_write_text(out / CORPUS_INFO, json.dumps(info, indent=2, sort_keys=True))
    atomic_write_text(out / MANIFEST, manifest_text)
    logger.info("Wrote corpus of %d utterances by %d speakers to %s (splits %s)", len(lines), len(speakers), out,
                {k: len(v) for k, v in splits.items()})
    return Corpus(out)


class Corpus:
    """Read-only view of a corpus directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path, info_path = self.root / MANIFEST, self.root / CORPUS_INFO
        if not manifest_path.is_file() or not info_path.is_file():
            raise LoadError(f"{self.root} is not a corpus (missing {MANIFEST} or {CORPUS_INFO})")
        try:
            info = json.loads(info_path.read_text())
            self.config = CorpusConfig.model_validate(info["config"])
            self.speakers: Dict[str, SpeakerSpec] = OrderedDict(
                (s["speaker_id"], SpeakerSpec.model_validate(s)) for s in info["speakers"])
            self.entries: List[ManifestEntry] = [ManifestEntry.model_validate_json(line)
                                                 for line in manifest_path.read_text().splitlines() if line.strip()]
        except (KeyError, json.JSONDecodeError, ValidationError) as exc:
            raise LoadError(f"{self.root}: unreadable corpus metadata ({exc})") from None
        self.info = info
        self.splits: Dict[str, List[str]] = info["splits"]
        self._by_id = {e.utterance_id: e for e in self.entries}

    @property
    def seed(self) -> int:
        return self.config.seed

    def manifest_hash(self) -> str:
        return hashlib.sha256((self.root / MANIFEST).read_bytes()).hexdigest()

    def split(self, name: str) -> List[ManifestEntry]:
        if name not in SPLITS:
            raise InputError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [e for e in self.entries if e.split == name]

    def by_speaker(self, split: str) -> "OrderedDict[str, List[ManifestEntry]]":
        grouped: "OrderedDict[str, List[ManifestEntry]]" = OrderedDict()
        for entry in self.split(split):
            grouped.setdefault(entry.speaker_id, []).append(entry)
        return grouped

    def entry(self, utterance_id: str) -> ManifestEntry:
        if utterance_id not in self._by_id:
            raise InputError(f"utterance {utterance_id!r} is not in {self.root}")
        return self._by_id[utterance_id]

    def load(self, entry) -> Utterance:
        if isinstance(entry, str):
            entry = self.entry(entry)
        return load_utterance(self.root / entry.path)

    def iter_split(self, name: str) -> Iterator[Utterance]:
        for entry in self.split(name):
            yield self.load(entry)

    def feature_stats(self, split: str = "train") -> FeatureStats:
        pitch, energy = [], []
        for utt in self.iter_split(split):
            pitch.append(utt.pitch)
            energy.append(utt.energy)
        if not pitch:
            raise LoadError(f"{self.root}: split {split!r} is empty")
        pitch, energy = np.concatenate(pitch), np.concatenate(energy)
        return FeatureStats(pitch_mean=float(pitch.mean()), pitch_std=float(pitch.std()) or 1.0,
                            energy_mean=float(energy.mean()), energy_std=float(energy.std()) or 1.0)


def load_corpus(path) -> Corpus:
    return Corpus(path)
