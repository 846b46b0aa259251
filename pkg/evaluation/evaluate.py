"""Objective evaluation of synthesized held-out speakers.

Pipeline: ``synthesize_corpus`` writes one prediction file per test utterance;
``Evaluator.run`` scores a prediction directory against references (another
prediction directory or the corpus itself), aggregates per speaker and writes
CSV + JSON reports; ``compare_reports`` lines several runs up side by side.
"""

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from core.errors import InputError, LoadError, UndefinedMetricError
from core.serialization import atomic_write_text, load_tensors, save_tensors
from evaluation.aggregate import METRICS, UtteranceMetrics, aggregate
from evaluation.metrics import duration_rmse, f0_rmse, mcd, voiced_mask
from tools.corpus import Corpus
from tts.config import load_config
from tts.model import MoATTS, SynthesisResult
from tts.speaker_embed import EmbeddingCache

logger = logging.getLogger(__name__)

DEFAULT_EVAL_CONFIG = Path(__file__).with_name("eval_config.json")
PREDICTION_SUFFIX = ".moat"
EMBEDDING_CACHE = "embeddings.cache"
SUMMARY_JSON = "summary.json"


class MetricSpec(BaseModel):
    name: str
    description: str = ""


class EvalConfig(BaseModel):
    test_suite: str = "moa_tts_objective_evaluation"
    description: str = ""
    version: str = "1.0"
    mcd_order: int = Field(12, ge=1)
    voicing_threshold: float = 0.3
    rtf_repeats: int = Field(5, ge=1)
    rtf_warmup: int = Field(2, ge=0)
    min_bench_seconds: float = Field(0.05, ge=0.0)
    bench_utterances: int = Field(8, ge=1)
    metrics: List[MetricSpec] = Field(default_factory=list)
    log_level: str = "INFO"
    trace_enabled: bool = False


def load_eval_config(path=None) -> EvalConfig:
    return load_config(path or DEFAULT_EVAL_CONFIG, EvalConfig)


@dataclass
class AlignedRecord:
    """What the metrics need from one utterance, prediction or reference alike."""

    utterance_id: str
    speaker_id: str
    group: str
    mel: np.ndarray
    pitch: np.ndarray
    energy: np.ndarray
    durations: np.ndarray
    meta: dict = field(default_factory=dict)


def save_prediction(path, result: SynthesisResult, meta: dict) -> None:
    tensors = {"mel": result.mel, "pitch": result.pitch, "energy": result.energy, "dur_pred": result.dur_pred,
               "durations": result.durations, "x_e": result.x_e}
    save_tensors(path, tensors, meta)


def load_prediction(path) -> AlignedRecord:
    tensors, meta = load_tensors(path)
    try:
        return AlignedRecord(meta["utterance_id"], meta["speaker_id"], meta.get("group", ""), tensors["mel"],
                             tensors["pitch"], tensors["energy"], tensors["dur_pred"].astype(np.int64), meta)
    except KeyError as exc:
        raise LoadError(f"{path}: prediction file lacks {exc}") from None


def load_prediction_dir(directory) -> Dict[str, AlignedRecord]:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"{directory} is not a directory")
    records = {}
    for path in sorted(directory.glob(f"*{PREDICTION_SUFFIX}")):
        record = load_prediction(path)
        records[record.utterance_id] = record
    if not records:
        raise InputError(f"{directory} holds no prediction files")
    return records


def corpus_records(corpus: Corpus, utterance_ids: Sequence[str]) -> Dict[str, AlignedRecord]:
    records = {}
    for utt_id in utterance_ids:
        entry = corpus.entry(utt_id)
        utt = corpus.load(entry)
        records[utt_id] = AlignedRecord(utt_id, utt.speaker_id, entry.group, utt.mel, utt.pitch, utt.energy,
                                        utt.durations)
    return records


def _reference_ids(entries, index: int, n_refs: int, non_parallel: bool) -> List[str]:
    """Reference utterances for entries[index]: itself first unless non-parallel, then its successors."""
    count = len(entries)
    start = 1 if non_parallel else 0
    if non_parallel and count < 2:
        raise InputError(f"speaker {entries[index].speaker_id} has a single utterance; no non-parallel reference")
    picks = [(index + k) % count for k in range(start, start + n_refs)]
    return [entries[i].utterance_id for i in dict.fromkeys(picks)]


def synthesize_corpus(model: MoATTS, corpus: Corpus, out_dir, split: str = "test", gt_durations: bool = False,
                      non_parallel: bool = False, n_refs: int = 1, provenance: Optional[dict] = None) -> int:
    """Synthesize every utterance of ``split`` from reference audio of the same speaker."""
    if n_refs < 1:
        raise InputError(f"need at least one reference utterance, got {n_refs}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = EmbeddingCache(out / EMBEDDING_CACHE, model.fingerprint())
    written = 0
    for speaker_id, entries in corpus.by_speaker(split).items():
        for i, entry in enumerate(entries):
            utt = corpus.load(entry)
            ref_ids = _reference_ids(entries, i, n_refs, non_parallel)
            key = ",".join(ref_ids)
            refs = [] if key in cache else [utt.ref_features if r == entry.utterance_id
                                            else corpus.load(r).ref_features for r in ref_ids]
            x_e = cache.get_or_compute(key, refs, model.embedder)
            result = model.synthesize(utt.phonemes, x_e=x_e, durations=utt.durations if gt_durations else None)
            meta = {"utterance_id": entry.utterance_id, "speaker_id": speaker_id, "group": entry.group,
                    "split": split, "references": ref_ids, "gt_durations": gt_durations, **(provenance or {})}
            save_prediction(out / f"{entry.utterance_id}{PREDICTION_SUFFIX}", result, meta)
            written += 1
    cache.save(provenance)
    logger.info("Synthesized %d %s utterances into %s (%s, %d reference(s))", written, split, out,
                "non-parallel" if non_parallel else "parallel", n_refs)
    return written


class Evaluator:
    def __init__(self, config_path=None):
        self.config = load_eval_config(config_path)
        logger.info("Evaluation suite: %s", self.config.test_suite)

    def score(self, pred: AlignedRecord, ref: AlignedRecord) -> UtteranceMetrics:
        mcd_db = mcd(pred.mel, ref.mel, self.config.mcd_order)
        try:
            f0 = f0_rmse(pred.pitch, ref.pitch, voiced_mask(ref.energy, self.config.voicing_threshold))
        except UndefinedMetricError as exc:
            logger.warning("%s: %s", pred.utterance_id, exc)
            f0 = None
        dur = duration_rmse(pred.durations, ref.durations)
        return UtteranceMetrics(utterance_id=pred.utterance_id, speaker_id=ref.speaker_id,
                                group=ref.group or pred.group, mcd=mcd_db, f0_rmse=f0, dur_rmse=dur)

    def evaluate(self, predictions: Dict[str, AlignedRecord],
                 references: Dict[str, AlignedRecord]) -> List[UtteranceMetrics]:
        missing = sorted(set(predictions) - set(references))
        if missing:
            raise InputError(f"no reference for {len(missing)} prediction(s), e.g. {missing[0]}")
        return [self.score(predictions[k], references[k]) for k in sorted(predictions)]

    def run(self, pred_dir, ref_dir=None, corpus: Optional[Corpus] = None, out_dir=None,
            provenance: Optional[dict] = None) -> dict:
        predictions = load_prediction_dir(pred_dir)
        if ref_dir is not None:
            references = load_prediction_dir(ref_dir)
        elif corpus is not None:
            references = corpus_records(corpus, list(predictions))
        else:
            raise InputError("evaluation needs a reference directory or a corpus")

        utterances = self.evaluate(predictions, references)
        speakers, summary = aggregate(utterances)
        provenance = self.run_record(predictions, provenance)
        report = {
            "test_suite": self.config.test_suite,
            "predictions": str(pred_dir),
            "n_utterances": len(utterances),
            "n_speakers": len(speakers),
            "summary": summary,
            "speakers": [s.model_dump() for s in speakers],
            **provenance,
        }
        overall = summary["all"]
        logger.info("Evaluated %d utterances of %d speakers: MCD median %s dB, dur RMSE median %s",
                    len(utterances), len(speakers), overall["mcd"]["median"], overall["dur_rmse"]["median"])
        if out_dir is not None:
            self.write(out_dir, report, utterances, provenance)
        return report

    def run_record(self, predictions: Dict[str, AlignedRecord], provenance: Optional[dict] = None) -> dict:
        """Caller provenance plus the eval config and the seed/config/checkpoint the predictions came from."""
        record = dict(provenance or {})
        record["eval_config"] = self.config.model_dump(mode="json")
        for key, target in (("seed", "seed"), ("config", "model_config"), ("checkpoint", "checkpoint")):
            values = []
            for pred in predictions.values():
                value = pred.meta.get(key)
                if value is not None and value not in values:
                    values.append(value)
            if record.get(target) is None and values:
                record[target] = values[0] if len(values) == 1 else values
        return record

    def write(self, out_dir, report: dict, utterances: List[UtteranceMetrics], provenance: Optional[dict]) -> None:
        out = Path(out_dir)
        atomic_write_text(out / SUMMARY_JSON, json.dumps(report, indent=2, sort_keys=True))
        atomic_write_text(out / "utterances.csv", _csv(utterances, list(UtteranceMetrics.model_fields), provenance))
        speakers = [dict(s) for s in report["speakers"]]
        fields = ["speaker_id", "group", "mcd_mean", "f0_rmse_mean", "dur_rmse_mean", "n_utts"]
        atomic_write_text(out / "speakers.csv", _csv(speakers, fields, provenance))
        logger.info("Reports saved to: %s", out)


def _csv(rows, fields: List[str], provenance: Optional[dict]) -> str:
    buffer = io.StringIO()
    for key, value in (provenance or {}).items():
        buffer.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
    writer = csv.DictWriter(buffer, fieldnames=fields)
    writer.writeheader()
    for row in rows:
        row = row.model_dump() if isinstance(row, BaseModel) else row
        writer.writerow({k: "" if row.get(k) is None else row.get(k) for k in fields})
    return buffer.getvalue()


def compare_reports(report_dirs: Sequence, out_path, names: Optional[Sequence[str]] = None) -> dict:
    """Quartile table per run, metric and speaker subset (all / pro / non)."""
    table = {}
    for i, directory in enumerate(report_dirs):
        path = Path(directory) / SUMMARY_JSON
        if not path.is_file():
            raise LoadError(f"{directory} holds no {SUMMARY_JSON}")
        report = json.loads(path.read_text())
        name = names[i] if names else report.get("run_name") or Path(directory).name
        if name in table:
            raise InputError(f"duplicate run name {name!r} in comparison")
        table[name] = {
            subset: {metric: report["summary"][subset][metric] for metric in METRICS}
            for subset in report["summary"]
        }
    comparison = {"runs": list(table), "table": table}
    atomic_write_text(out_path, json.dumps(comparison, indent=2, sort_keys=True))
    logger.info("Compared %d runs into %s", len(table), out_path)
    return comparison
