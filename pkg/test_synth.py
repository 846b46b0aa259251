import json

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import pearsonr

from core.errors import ConfigurationError, ContractError, InputError, LoadError, OutputExistsError
from tools.corpus import CORPUS_INFO, MANIFEST, build_corpus, load_corpus, text_seed
from tools.synth import CorpusConfig, SpeakerGroup, assign_splits, make_speakers, pool_frames, render_utterance
from tts.config import validate_config

TINY_CORPUS = CorpusConfig(n_per_group=3, utts_per_speaker=2, min_phonemes=3, max_phonemes=5, seed=7)


def _speaker_utterances(spec, index, count, config=None):
    return [render_utterance(spec, text_seed(0, index, u), config) for u in range(count)]


def test_speaker_roster():
    speakers = make_speakers(8, seed=0)
    assert len(speakers) == 32
    assert len({s.speaker_id for s in speakers}) == 32
    for group in SpeakerGroup:
        assert sum(s.group == group for s in speakers) == 8
    with pytest.raises(ContractError):
        make_speakers(0, seed=0)


def test_group_characteristics():
    speakers = make_speakers(8, seed=0)
    female = [s.base_log_f0 for s in speakers if s.group.female]
    male = [s.base_log_f0 for s in speakers if not s.group.female]
    assert np.mean(female) > np.mean(male)

    pro = [s.style_dynamics for s in speakers if s.group.professional]
    non = [s.style_dynamics for s in speakers if not s.group.professional]
    assert min(pro) > max(non)


def test_render_is_deterministic_and_aligned():
    spec = make_speakers(2, seed=1)[3]
    a = render_utterance(spec, 1234)
    b = render_utterance(spec, 1234)
    for field in ("phonemes", "durations", "pitch", "energy", "mel", "ref_features"):
        assert np.array_equal(getattr(a, field), getattr(b, field)), field

    frames = int(a.durations.sum())
    assert a.pitch.shape == a.energy.shape == (frames,)
    assert a.mel.shape == (frames, 20)
    assert a.ref_features.shape == (4, -(-frames // 4), 16)
    assert 8 <= len(a.phonemes) <= 30
    assert a.durations.min() >= 1
    assert a.seconds == pytest.approx(frames * 0.01)


def test_pool_frames_keeps_ragged_tail():
    x = np.arange(10.0).reshape(5, 2)
    pooled = pool_frames(x, 2)
    assert pooled.tolist() == [[1.0, 2.0], [5.0, 6.0], [8.0, 9.0]]


def test_reference_features_separate_female_from_male():
    speakers = make_speakers(8, seed=0)
    features, labels, held_out = [], [], []
    for index, spec in enumerate(speakers):
        for utt in _speaker_utterances(spec, index, 3):
            features.append(utt.ref_features.mean(axis=(0, 1)))
            labels.append(1.0 if spec.group.female else -1.0)
            held_out.append(int(spec.speaker_id[-2:]) >= 4)
    X = np.hstack([np.array(features), np.ones((len(features), 1))])
    y, held_out = np.array(labels), np.array(held_out)

    w, *_ = np.linalg.lstsq(X[~held_out], y[~held_out], rcond=None)
    accuracy = np.mean(np.sign(X[held_out] @ w) == y[held_out])
    assert accuracy >= 0.95


def test_mean_pitch_tracks_speaker_base_f0():
    speakers = make_speakers(8, seed=0)
    measured = [np.mean([u.pitch.mean() for u in _speaker_utterances(spec, i, 3)])
                for i, spec in enumerate(speakers)]
    r, _ = pearsonr(measured, [s.base_log_f0 for s in speakers])
    assert r >= 0.9


def test_splits_are_speaker_disjoint_and_cover_groups():
    speakers = make_speakers(4, seed=2)
    splits = assign_splits(speakers, 1, 1, seed=2)
    train, val, test = (set(splits[k]) for k in ("train", "val", "test"))
    assert not (train & val or train & test or val & test)
    assert len(train | val | test) == 16
    for ids in splits.values():
        assert {sid.rsplit("-", 1)[0] for sid in ids} == {g.value for g in SpeakerGroup}
    assert assign_splits(speakers, 1, 1, seed=2) == splits


def test_corpus_config_validation():
    with pytest.raises(ValidationError):
        CorpusConfig(n_per_group=2, val_per_group=1, test_per_group=1)
    with pytest.raises(ConfigurationError):
        validate_config(CorpusConfig, {"min_phonemes": 9, "max_phonemes": 4}, source="corpus.json")


def test_build_corpus_is_reproducible(tmp_path):
    first = build_corpus(tmp_path / "a", TINY_CORPUS, progress=False)
    second = build_corpus(tmp_path / "b", TINY_CORPUS, progress=False)
    assert first.manifest_hash() == second.manifest_hash()
    assert len(first.entries) == 24
    assert (tmp_path / "a" / CORPUS_INFO).read_text() == (tmp_path / "b" / CORPUS_INFO).read_text()

    entry = first.entries[5]
    assert (tmp_path / "a" / entry.path).read_bytes() == (tmp_path / "b" / entry.path).read_bytes()
    loaded = first.load(entry.utterance_id)
    assert loaded.speaker_id == entry.speaker_id
    assert loaded.n_frames == entry.n_frames


def test_corpus_views(tmp_path):
    corpus = build_corpus(tmp_path / "c", TINY_CORPUS, progress=False)
    assert corpus.seed == 7
    sizes = {name: len(corpus.split(name)) for name in ("train", "val", "test")}
    assert sizes == {"train": 8, "val": 8, "test": 8}
    assert all(len(v) == 2 for v in corpus.by_speaker("test").values())
    assert len(list(corpus.iter_split("val"))) == 8

    stats = corpus.feature_stats()
    assert stats.pitch_std > 0 and stats.energy_std > 0
    assert 4.0 < stats.pitch_mean < 6.0

    with pytest.raises(InputError):
        corpus.split("dev")
    with pytest.raises(InputError):
        corpus.entry("nobody_000")


def test_build_corpus_refuses_to_overwrite(tmp_path):
    out = tmp_path / "corpus"
    build_corpus(out, TINY_CORPUS, progress=False)
    with pytest.raises(OutputExistsError):
        build_corpus(out, TINY_CORPUS, progress=False)
    rebuilt = build_corpus(out, TINY_CORPUS.model_copy(update={"utts_per_speaker": 1}), force=True, progress=False)
    assert len(rebuilt.entries) == 12
    assert len([l for l in (out / MANIFEST).read_text().splitlines() if l]) == 12
    assert json.loads((out / CORPUS_INFO).read_text())["n_utterances"] == 12


def test_load_corpus_rejects_other_directories(tmp_path):
    with pytest.raises(LoadError):
        load_corpus(tmp_path)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
