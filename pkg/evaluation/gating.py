"""Gate-weight traces and speaker-by-speaker correlation of routing."""

import csv
import io
import json
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, field_validator
from scipy.stats import pearsonr

from core.errors import ContractError, InputError
from core.serialization import atomic_write_text
from tools.corpus import Corpus
from tts.model import MoATTS

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-9


class GatingTrace(BaseModel):
    utterance_id: str
    speaker_id: str
    group: str
    weights: Dict[str, List[float]]

    @field_validator("weights")
    @classmethod
    def _sums_to_one(cls, v):
        for site, w in v.items():
            if abs(sum(w) - 1.0) > SUM_TOLERANCE:
                raise ValueError(f"gate weights at {site} sum to {sum(w)!r}")
        return v


def collect_traces(model: MoATTS, corpus: Corpus, split: str = "test", seed: int = 0) -> List[GatingTrace]:
    """Gate weights for one randomly chosen utterance per speaker, using it as its own reference."""
    if not model.has_moa:
        raise ContractError("model has no MoA sites to trace")
    rng = np.random.default_rng([seed, 5])
    traces = []
    for speaker_id, entries in corpus.by_speaker(split).items():
        entry = entries[int(rng.integers(len(entries)))]
        utt = corpus.load(entry)
        out = model.synthesize(utt.phonemes, reference=utt.ref_features, durations=utt.durations)
        traces.append(GatingTrace(utterance_id=utt.utterance_id, speaker_id=speaker_id, group=entry.group,
                                  weights={site: w.tolist() for site, w in out.gates.items()}))
    return traces


def resolve_site(layer: Union[int, str], traces: Sequence[GatingTrace]) -> str:
    """Decoder layer index (negative counts from the deepest) or an explicit site id."""
    if not traces:
        raise InputError("no gating traces")
    sites = list(traces[0].weights)
    if isinstance(layer, str) and not layer.lstrip("-").isdigit():
        if layer not in sites:
            raise InputError(f"unknown MoA site {layer!r}; available: {sites}")
        return layer
    decoder = [s for s in sites if s.startswith("decoder.")]
    if not decoder:
        raise InputError("traces carry no decoder MoA sites")
    try:
        return decoder[int(layer)]
    except IndexError:
        raise InputError(f"decoder layer {layer} out of range for {len(decoder)} layers") from None


@dataclass
class CorrelationMatrix:
    site: str
    speaker_ids: List[str]
    groups: List[str]
    values: np.ndarray       # NaN where the correlation is undefined

    def cell(self, i: int, j: int) -> Optional[float]:
        v = self.values[i, j]
        return None if np.isnan(v) else float(v)


def gating_correlation(traces: Sequence[GatingTrace], layer: Union[int, str]) -> CorrelationMatrix:
    """Pearson correlation between speakers' gate vectors at one site."""
    site = resolve_site(layer, traces)
    vectors = [np.asarray(t.weights[site], dtype=np.float64) for t in traces]
    n = len(vectors)
    values = np.full((n, n), np.nan)
    flat = [float(np.var(v)) == 0.0 for v in vectors]
    for i, t in enumerate(traces):
        if flat[i]:
            logger.warning("Gate vector of %s at %s has zero variance; its correlations are undefined",
                           t.speaker_id, site)
    for i in range(n):
        if not flat[i]:
            values[i, i] = 1.0
        for j in range(i + 1, n):
            if flat[i] or flat[j]:
                continue
            r = float(pearsonr(vectors[i], vectors[j])[0])
            values[i, j] = values[j, i] = r
    return CorrelationMatrix(site, [t.speaker_id for t in traces], [t.group for t in traces], values)


def group_means(matrix: CorrelationMatrix) -> Dict[str, Optional[float]]:
    """Mean off-diagonal correlation within groups and between groups."""
    within, between = [], []
    n = len(matrix.speaker_ids)
    for i in range(n):
        for j in range(i + 1, n):
            value = matrix.cell(i, j)
            if value is None:
                continue
            (within if matrix.groups[i] == matrix.groups[j] else between).append(value)
    return {"within": float(np.mean(within)) if within else None,
            "between": float(np.mean(between)) if between else None}


def _provenance_lines(provenance: Optional[dict]) -> str:
    return "".join(f"# {k}: {json.dumps(v, sort_keys=True)}\n" for k, v in (provenance or {}).items())


def write_correlation_csv(path, matrix: CorrelationMatrix, provenance: Optional[dict] = None) -> None:
    buffer = io.StringIO()
    buffer.write(_provenance_lines(provenance))
    writer = csv.writer(buffer)
    writer.writerow(["speaker_id", "group"] + matrix.speaker_ids)
    for i, speaker_id in enumerate(matrix.speaker_ids):
        cells = ["" if matrix.cell(i, j) is None else repr(matrix.cell(i, j)) for j in range(len(matrix.speaker_ids))]
        writer.writerow([speaker_id, matrix.groups[i]] + cells)
    atomic_write_text(path, buffer.getvalue())


def write_heatmap_data(path, matrix: CorrelationMatrix, provenance: Optional[dict] = None) -> None:
    """gnuplot ``splot ... with image`` layout: ``i j value`` rows, blank line per row."""
    lines = [_provenance_lines(provenance).rstrip("\n")] if provenance else []
    lines.append("# " + " ".join(f"{i}:{sid}" for i, sid in enumerate(matrix.speaker_ids)))
    for i in range(len(matrix.speaker_ids)):
        for j in range(len(matrix.speaker_ids)):
            v = matrix.cell(i, j)
            lines.append(f"{i} {j} {'NaN' if v is None else repr(v)}")
        lines.append("")
    atomic_write_text(path, "\n".join(lines) + "\n")


def site_layer_index(site: str) -> int:
    """Decoder layer of a ``decoder.<i>`` site; predictor sites hold a single MoA and report 0."""
    prefix, _, index = site.partition(".")
    return int(index) if prefix == "decoder" and index.isdigit() else 0


def write_traces_csv(path, traces: Sequence[GatingTrace], provenance: Optional[dict] = None) -> None:
    buffer = io.StringIO()
    buffer.write(_provenance_lines(provenance))
    writer = csv.writer(buffer)
    width = max((len(w) for t in traces for w in t.weights.values()), default=0)
    writer.writerow(["utterance_id", "speaker_id", "group", "site_id", "layer_index"]
                    + [f"w_{i}" for i in range(1, width + 1)])
    for t in traces:
        for site, w in t.weights.items():
            writer.writerow([t.utterance_id, t.speaker_id, t.group, site, site_layer_index(site)]
                            + [repr(float(x)) for x in w])
    atomic_write_text(path, buffer.getvalue())
