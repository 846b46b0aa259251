import json
import logging
import math
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.fft import idct

from core.errors import (AlignmentError, ConfigurationError, ContractError, DimensionError, InputError, LoadError,
                         UndefinedMetricError)
from evaluation.aggregate import UtteranceMetrics, aggregate, is_professional, quartiles
from evaluation.benchmark import BenchItem, bench_items, rtf_bench
from evaluation.evaluate import (EMBEDDING_CACHE, SUMMARY_JSON, Evaluator, compare_reports, load_eval_config,
                                 load_prediction_dir, synthesize_corpus)
from evaluation.experiment import (EXPERIMENT_JSON, ROLES, ExperimentConfig, check_claims, check_models,
                                   load_experiment, run_experiment)
from evaluation.gating import (GatingTrace, collect_traces, gating_correlation, group_means, resolve_site,
                               write_correlation_csv, write_heatmap_data, write_traces_csv)
from evaluation.metrics import MCD_CONSTANT, duration_rmse, f0_rmse, mcd, mel_cepstrum, voiced_mask
from evaluation.tracer import EventType, RunTracer, tracing_enabled
from tools.corpus import build_corpus
from tools.synth import CorpusConfig
from training.config import TrainConfig
from tts.config import MoAConfig, ModelConfig, RoutingMode
from tts.model import MoATTS
from tts.speaker_embed import EmbeddingCache

CONFIGS = Path(__file__).parent / "configs"

EVAL_CORPUS = CorpusConfig(n_per_group=3, utts_per_speaker=2, vocab_size=10, n_mels=14, ref_layers=2,
                           ref_width=4, min_phonemes=3, max_phonemes=4)
EVAL_MODEL = ModelConfig(name="eval-tiny", vocab_size=10, enc_layers=1, dec_layers=2, d_model=4, d_filter=8,
                         pred_filter=8, n_heads=2, n_mels=14, fft_kernel=3, pred_kernel=3, dropout=0.0,
                         ref_layers=2, ref_width=4, moa=MoAConfig(n_adapters=3, top_k=2, bottleneck=2))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return build_corpus(tmp_path_factory.mktemp("corpus") / "eval", EVAL_CORPUS, progress=False)


@pytest.fixture(scope="module")
def model():
    return MoATTS(EVAL_MODEL, seed=0)


def _trace(speaker, group, weights):
    return GatingTrace(utterance_id=f"{speaker}_000", speaker_id=speaker, group=group,
                       weights={"decoder.0": weights, "decoder.1": weights})


# -- metrics ---------------------------------------------------------------

def test_mcd_of_unit_cepstral_offsets():
    cepstra = np.zeros((5, 20))
    cepstra[:, 1:13] = 1.0
    shifted = idct(cepstra, type=2, norm="ortho", axis=1)
    assert mcd(shifted, np.zeros((5, 20))) == pytest.approx(21.275, abs=1e-3)
    assert mcd(shifted, np.zeros((5, 20))) == pytest.approx(MCD_CONSTANT * math.sqrt(12), rel=1e-12)


def test_mcd_ignores_energy_and_is_symmetric():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(7, 20)), rng.normal(size=(7, 20))
    assert mcd(a, a + 3.0) == pytest.approx(0.0, abs=1e-12)
    assert mcd(a, b) == pytest.approx(mcd(b, a), rel=1e-15)
    assert mel_cepstrum(a).shape == (7, 12)


def test_mcd_errors():
    with pytest.raises(AlignmentError):
        mcd(np.zeros((5, 20)), np.zeros((6, 20)))
    with pytest.raises(DimensionError):
        mcd(np.zeros((5, 12)), np.zeros((5, 12)))


def test_f0_rmse_uses_voiced_frames_only():
    ref = np.log(np.array([100.0, 120.0, 140.0, 160.0]))
    pred = ref + np.array([0.1, 0.1, 5.0, 0.1])
    voiced = voiced_mask(np.array([0.9, 0.8, 0.1, 0.5]), 0.3)
    assert voiced.tolist() == [True, True, False, True]
    assert f0_rmse(pred, ref, voiced) == pytest.approx(0.1, rel=1e-12)
    with pytest.raises(UndefinedMetricError):
        f0_rmse(pred, ref, np.zeros(4, dtype=bool))
    with pytest.raises(AlignmentError):
        f0_rmse(pred[:3], ref, voiced)


def test_duration_rmse_examples():
    assert duration_rmse([2, 0], [0, 0]) == pytest.approx(math.sqrt(2))
    assert duration_rmse([1, 2, 3], [2, 3, 4]) == 1.0
    with pytest.raises(InputError):
        duration_rmse([1, 2], [1, 2, 3])
    with pytest.raises(InputError):
        duration_rmse([], [])


# -- aggregation -----------------------------------------------------------

def test_quartiles_interpolate_linearly():
    assert quartiles([1, 2, 3, 4]) == {"q1": 1.75, "median": 2.5, "q3": 3.25, "n": 4}
    assert quartiles([])["median"] is None


def test_aggregate_partitions_speakers():
    rows = []
    for speaker, group, values in [("F-pro-00", "F-pro", (4.0, 6.0)), ("M-pro-01", "M-pro", (2.0, 2.0)),
                                   ("F-non-00", "F-non", (8.0, 8.0)), ("M-non-02", "M-non", (10.0, 12.0))]:
        for i, value in enumerate(values):
            rows.append(UtteranceMetrics(utterance_id=f"{speaker}_{i}", speaker_id=speaker, group=group,
                                         mcd=value, f0_rmse=None if group == "M-non" else 0.1, dur_rmse=1.0))
    speakers, summary = aggregate(rows)
    assert [s.speaker_id for s in speakers] == ["F-non-00", "F-pro-00", "M-non-02", "M-pro-01"]
    assert {s.speaker_id: s.mcd_mean for s in speakers}["M-non-02"] == 11.0
    assert summary["pro"]["mcd"]["n"] + summary["non"]["mcd"]["n"] == summary["all"]["mcd"]["n"] == 4
    assert summary["pro"]["mcd"]["median"] == 3.5
    assert summary["all"]["f0_rmse"]["n"] == 3
    assert is_professional("M-pro") and not is_professional("F-non")


# -- gating analysis -------------------------------------------------------

def test_gating_correlation_matrix(caplog):
    traces = [_trace("F-pro-00", "F-pro", [0.7, 0.2, 0.1]), _trace("F-pro-01", "F-pro", [0.6, 0.3, 0.1]),
              _trace("M-non-00", "M-non", [0.1, 0.2, 0.7]), _trace("M-non-01", "M-non", [1 / 3, 1 / 3, 1 / 3])]
    with caplog.at_level(logging.WARNING):
        matrix = gating_correlation(traces, -1)
    assert matrix.site == "decoder.1"
    assert "zero variance" in caplog.text

    values = matrix.values[:3, :3]
    assert np.allclose(values, values.T, atol=1e-12)
    assert np.allclose(np.diag(values), 1.0, atol=1e-12)
    assert all(matrix.cell(3, j) is None for j in range(4))

    means = group_means(matrix)
    assert means["within"] > means["between"]


def test_resolve_site():
    traces = [_trace("F-pro-00", "F-pro", [0.5, 0.5, 0.0])]
    assert resolve_site(0, traces) == "decoder.0"
    assert resolve_site("-1", traces) == "decoder.1"
    assert resolve_site("decoder.0", traces) == "decoder.0"
    with pytest.raises(InputError):
        resolve_site(5, traces)
    with pytest.raises(InputError):
        resolve_site("pitch", traces)
    with pytest.raises(InputError):
        resolve_site(0, [])


def test_gate_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        _trace("F-pro-00", "F-pro", [0.5, 0.4, 0.0])


def test_collect_traces_and_exports(model, corpus, tmp_path):
    traces = collect_traces(model, corpus, split="test", seed=3)
    assert [t.speaker_id for t in traces] == list(corpus.by_speaker("test"))
    assert set(traces[0].weights) == set(EVAL_MODEL.moa_site_ids())
    assert [t.utterance_id for t in collect_traces(model, corpus, split="test", seed=3)] == \
        [t.utterance_id for t in traces]

    matrix = gating_correlation(traces, -1)
    write_correlation_csv(tmp_path / "corr.csv", matrix, {"seed": 3})
    write_heatmap_data(tmp_path / "corr.dat", matrix)
    write_traces_csv(tmp_path / "traces.csv", traces)
    header = [l for l in (tmp_path / "corr.csv").read_text().splitlines() if not l.startswith("#")][0]
    assert header.split(",") == ["speaker_id", "group"] + matrix.speaker_ids
    rows = (tmp_path / "traces.csv").read_text().splitlines()
    assert len(rows) == 1 + len(traces) * len(EVAL_MODEL.moa_site_ids())
    assert rows[0].split(",") == ["utterance_id", "speaker_id", "group", "site_id", "layer_index", "w_1", "w_2", "w_3"]
    by_site = {r.split(",")[3]: r.split(",")[4] for r in rows[1:]}
    assert by_site["decoder.1"] == "1" and by_site["decoder.0"] == "0" and by_site["pitch"] == "0"

    with pytest.raises(ContractError):
        collect_traces(MoATTS(EVAL_MODEL.without_moa()), corpus)


# -- synthesis, scoring, reports --------------------------------------------

def test_synthesize_corpus_writes_one_file_per_utterance(model, corpus, tmp_path):
    count = synthesize_corpus(model, corpus, tmp_path / "pred", gt_durations=True, provenance={"seed": 0})
    assert count == len(corpus.split("test")) == 8
    assert (tmp_path / "pred" / EMBEDDING_CACHE).is_file()
    records = load_prediction_dir(tmp_path / "pred")
    for utt_id, record in records.items():
        assert record.mel.shape[0] == corpus.load(utt_id).n_frames
    cache = EmbeddingCache(tmp_path / "pred" / EMBEDDING_CACHE, model.fingerprint())
    assert len(cache) == 8
    first = corpus.split("test")[0].utterance_id
    assert np.array_equal(cache.get(first).data, model.embedder(corpus.load(first).ref_features).data)

    synthesize_corpus(model, corpus, tmp_path / "nonpar", non_parallel=True, n_refs=2)
    with pytest.raises(InputError):
        synthesize_corpus(model, corpus, tmp_path / "none", n_refs=0)


def test_identical_predictions_score_zero(model, corpus, tmp_path):
    synthesize_corpus(model, corpus, tmp_path / "pred", gt_durations=True)
    report = Evaluator().run(tmp_path / "pred", ref_dir=tmp_path / "pred", out_dir=tmp_path / "report")
    assert report["n_utterances"] == 8 and report["n_speakers"] == 4
    assert report["summary"]["all"]["mcd"]["median"] == 0.0
    assert report["summary"]["all"]["dur_rmse"]["q3"] == 0.0
    for name in (SUMMARY_JSON, "utterances.csv", "speakers.csv"):
        assert (tmp_path / "report" / name).is_file()


def test_evaluate_against_corpus_and_compare(model, corpus, tmp_path):
    synthesize_corpus(model, corpus, tmp_path / "pred", gt_durations=True)
    evaluator = Evaluator()
    evaluator.run(tmp_path / "pred", corpus=corpus, out_dir=tmp_path / "a")
    evaluator.run(tmp_path / "pred", ref_dir=tmp_path / "pred", out_dir=tmp_path / "b")
    assert json.loads((tmp_path / "a" / SUMMARY_JSON).read_text())["summary"]["all"]["mcd"]["median"] > 0.0

    comparison = compare_reports([tmp_path / "a", tmp_path / "b"], tmp_path / "cmp.json", names=["corpus", "self"])
    assert comparison["runs"] == ["corpus", "self"]
    assert comparison["table"]["self"]["all"]["mcd"]["median"] == 0.0
    with pytest.raises(InputError):
        compare_reports([tmp_path / "a", tmp_path / "b"], tmp_path / "cmp.json", names=["x", "x"])
    with pytest.raises(LoadError):
        compare_reports([tmp_path / "missing"], tmp_path / "cmp.json")
    with pytest.raises(InputError):
        evaluator.run(tmp_path / "pred")


def test_eval_config_defaults():
    config = load_eval_config()
    assert config.mcd_order == 12 and config.voicing_threshold == 0.3


def test_rtf_bench(model):
    items = [BenchItem(np.array([1, 2, 3]), np.zeros(4), np.array([2, 2, 2]))]
    report = rtf_bench(model, items, repeats=3, warmup=1, min_seconds=0.0)
    assert report.rtf_median > 0.0 and report.rtf_iqr >= 0.0
    assert report.frames == 6 and len(report.rtfs) == 3
    with pytest.raises(ContractError):
        rtf_bench(model, items, repeats=0)
    with pytest.raises(ContractError):
        rtf_bench(model, [])


# -- tracing ---------------------------------------------------------------

def test_tracer_records_phases(tmp_path):
    tracer = RunTracer("run-1")
    tracer.log_event(EventType.RUN_START, {"command": "train"})
    with tracer.phase("phase1", steps=2):
        pass
    with pytest.raises(RuntimeError):
        with tracer.phase("phase2"):
            raise RuntimeError("boom")
    assert tracer.event_types() == ["run_start", "phase_start", "phase_end", "phase_start", "error"]
    assert "RUN TRACE - run-1" in tracer.render()

    tracer.save_trace(str(tmp_path / "trace.json"))
    saved = json.loads((tmp_path / "trace.json").read_text())
    assert saved["run_id"] == "run-1" and len(saved["events"]) == 5


def test_tracing_switch(monkeypatch):
    monkeypatch.delenv("ENABLE_TRACE", raising=False)
    assert tracing_enabled(default=True)
    monkeypatch.setenv("ENABLE_TRACE", "false")
    assert not tracing_enabled(default=True)
    monkeypatch.setenv("ENABLE_TRACE", "TRUE")
    assert tracing_enabled()

# -- experiment ------------------------------------------------------------

EXPERIMENT_CORPUS = EVAL_CORPUS.model_copy(update={"n_per_group": 4, "test_per_group": 2})
EVAL_BIG = EVAL_MODEL.model_copy(update={"name": "eval-big", "enc_layers": 4, "dec_layers": 8, "d_model": 64,
                                         "d_filter": 256, "pred_filter": 64, "n_heads": 4, "fft_kernel": 9,
                                         "moa": None})
EXPERIMENT_MODELS = {
    "small": EVAL_MODEL.without_moa(),
    "large": EVAL_BIG,
    "sparse": EVAL_MODEL,
    "dense": EVAL_MODEL.with_moa(MoAConfig(n_adapters=2, top_k=None, bottleneck=2)),
}


def test_rtf_grows_with_model_size(corpus):
    utterances = [corpus.load(e) for e in corpus.split("test")]
    reports = {}
    for config in (EVAL_MODEL.without_moa(), EVAL_BIG):
        model = MoATTS(config, seed=0)
        reports[config.name] = rtf_bench(model, bench_items(model, utterances), repeats=3, warmup=1,
                                         min_seconds=0.02)
    assert reports["eval-big"].rtf_median > 1.3 * reports["eval-tiny"].rtf_median


def test_bench_items_use_ground_truth_durations(model, corpus):
    utt = corpus.load(corpus.split("test")[0])
    item = bench_items(model, [utt])[0]
    assert np.array_equal(item.durations, utt.durations)
    assert np.array_equal(item.x_e, model.embedder(utt.ref_features).data)


def test_load_experiment_resolves_role_configs():
    config, models = load_experiment(CONFIGS / "experiment.json")
    assert config.seeds == [0, 1, 2] and config.min_speedup == 1.3 and config.large_margin == 1.05
    assert [models[r].name for r in ROLES] == ["S", "M", "S+MoA(s)", "S+MoA(d)"]
    assert models["sparse"].moa.mode == RoutingMode.SPARSE and models["dense"].moa.mode == RoutingMode.DENSE
    check_models(models)


def test_experiment_config_validation(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps({"models": {"small": "s.json"}}))
    with pytest.raises(ConfigurationError):
        load_experiment(path)
    with pytest.raises(ConfigurationError):
        check_models({**EXPERIMENT_MODELS, "small": EVAL_MODEL})
    with pytest.raises(ConfigurationError):
        check_models({**EXPERIMENT_MODELS, "dense": EVAL_MODEL})
    with pytest.raises(ValidationError):
        ExperimentConfig(seeds=[1, 1])


def test_check_claims_from_hand_medians():
    summary = {
        "small": {"mcd": 6.0, "dur_rmse": 0.9, "rtf": 0.010, "within": None, "between": None},
        "large": {"mcd": 5.0, "dur_rmse": 0.8, "rtf": 0.020, "within": None, "between": None},
        "sparse": {"mcd": 5.2, "dur_rmse": 0.82, "rtf": 0.012, "within": 0.6, "between": 0.1},
        "dense": {"mcd": 5.3, "dur_rmse": 0.85, "rtf": 0.0125, "within": 0.5, "between": 0.2},
    }
    claims = check_claims(summary, EXPERIMENT_MODELS, ExperimentConfig())
    assert {name: v["passed"] for name, v in claims.items()} == {
        "inference_macs_equal": True, "sparse_dense_rtf": True, "large_slower_than_sparse": True,
        "sparse_beats_small": True, "sparse_near_large": True, "gates_follow_groups": True,
    }

    summary["sparse"].update(mcd=5.4, rtf=0.016, within=0.1, between=0.3)
    claims = check_claims(summary, EXPERIMENT_MODELS, ExperimentConfig())
    assert not claims["sparse_dense_rtf"]["passed"]
    assert not claims["large_slower_than_sparse"]["passed"]
    assert claims["sparse_beats_small"]["passed"] and not claims["sparse_near_large"]["passed"]
    assert not claims["gates_follow_groups"]["passed"]

    del summary["large"]
    summary["sparse"]["within"] = None
    claims = check_claims(summary, EXPERIMENT_MODELS, ExperimentConfig())
    assert claims["large_slower_than_sparse"]["passed"] is None
    assert claims["sparse_near_large"]["passed"] is None
    assert claims["gates_follow_groups"]["passed"] is None


def test_run_experiment_writes_runs_medians_and_claims(tmp_path):
    corpus = build_corpus(tmp_path / "corpus", EXPERIMENT_CORPUS, progress=False)
    eval_path = tmp_path / "eval.json"
    eval_path.write_text(json.dumps({"rtf_repeats": 1, "rtf_warmup": 0, "min_bench_seconds": 0.0,
                                     "bench_utterances": 2}))
    config = ExperimentConfig(name="tiny-grid", seeds=[0, 1], corpus=EXPERIMENT_CORPUS,
                              train=TrainConfig(phase1_steps=1, phase2_steps=1, batch_size=2, warmup_steps=2,
                                                checkpoint_every=1, log_every=1, val_utterances=1))
    out = tmp_path / "grid"
    result = run_experiment(config, EXPERIMENT_MODELS, out, corpus=corpus, eval_config_path=eval_path,
                            provenance={"command": "experiment"}, progress=False)

    assert len(result["runs"]) == 8
    assert {(r["role"], r["seed"]) for r in result["runs"]} == {(role, s) for role in ROLES for s in (0, 1)}
    for role in ROLES:
        assert result["summary"][role]["n_seeds"] == 2
        assert result["summary"][role]["mcd"] > 0.0 and result["summary"][role]["rtf"] > 0.0
    assert result["summary"]["small"]["within"] is None
    assert result["summary"]["sparse"]["within"] is not None
    assert result["claims"]["inference_macs_equal"]["passed"] is True
    assert set(result["claims"]) == {"inference_macs_equal", "sparse_dense_rtf", "large_slower_than_sparse",
                                     "sparse_beats_small", "sparse_near_large", "gates_follow_groups"}

    saved = json.loads((out / EXPERIMENT_JSON).read_text())
    assert saved["command"] == "experiment" and saved["experiment"]["seeds"] == [0, 1]
    assert saved["models"]["large"]["name"] == "eval-big"
    compare = json.loads((out / "seed1" / "compare.json").read_text())
    assert compare["runs"] == ["small:eval-tiny", "large:eval-big", "sparse:eval-tiny", "dense:eval-tiny"]
    report = json.loads((out / "seed1" / "dense" / "report" / SUMMARY_JSON).read_text())
    assert report["seed"] == 1 and report["role"] == "dense" and report["model_config"]["moa"]["top_k"] is None
    assert (out / "seed0" / "sparse" / "gates_decoder1_corr.csv").is_file()
    assert not (out / "seed0" / "small" / "gates_decoder1_corr.csv").exists()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
