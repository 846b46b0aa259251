"""Per-speaker means and quartile summaries across speakers."""

from collections import OrderedDict
from typing import Dict, Iterable, List, Optional

import numpy as np
from pydantic import BaseModel, Field

METRICS = ("mcd", "f0_rmse", "dur_rmse")


class UtteranceMetrics(BaseModel):
    utterance_id: str
    speaker_id: str
    group: str
    mcd: float
    f0_rmse: Optional[float] = None
    dur_rmse: float


class SpeakerReport(BaseModel):
    speaker_id: str
    group: str
    mcd_mean: float = Field(..., ge=0.0)
    f0_rmse_mean: Optional[float] = Field(None, ge=0.0)
    dur_rmse_mean: float = Field(..., ge=0.0)
    n_utts: int = Field(..., ge=1)


def is_professional(group: str) -> bool:
    return group.endswith("pro")


def quartiles(values: Iterable[float]) -> Dict[str, float]:
    """Q1, median and Q3 with linear interpolation between order statistics."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        return {"q1": None, "median": None, "q3": None, "n": 0}
    q1, q2, q3 = np.percentile(values, [25, 50, 75], method="linear")
    return {"q1": float(q1), "median": float(q2), "q3": float(q3), "n": int(values.size)}


def speaker_reports(utterances: Iterable[UtteranceMetrics]) -> List[SpeakerReport]:
    grouped: Dict[str, List[UtteranceMetrics]] = {}
    for utt in utterances:
        grouped.setdefault(utt.speaker_id, []).append(utt)
    reports = []
    for speaker_id in sorted(grouped):
        rows = grouped[speaker_id]
        f0 = [r.f0_rmse for r in rows if r.f0_rmse is not None]
        reports.append(SpeakerReport(
            speaker_id=speaker_id,
            group=rows[0].group,
            mcd_mean=float(np.mean([r.mcd for r in rows])),
            f0_rmse_mean=float(np.mean(f0)) if f0 else None,
            dur_rmse_mean=float(np.mean([r.dur_rmse for r in rows])),
            n_utts=len(rows),
        ))
    return reports


def summarize(reports: List[SpeakerReport]) -> "OrderedDict[str, Dict[str, dict]]":
    subsets = OrderedDict([
        ("all", reports),
        ("pro", [r for r in reports if is_professional(r.group)]),
        ("non", [r for r in reports if not is_professional(r.group)]),
    ])
    summary: "OrderedDict[str, Dict[str, dict]]" = OrderedDict()
    for name, subset in subsets.items():
        summary[name] = {metric: quartiles(getattr(r, f"{metric}_mean") for r in subset
                                           if getattr(r, f"{metric}_mean") is not None)
                         for metric in METRICS}
    return summary


def aggregate(utterances: Iterable[UtteranceMetrics]):
    """Per-speaker reports plus quartiles overall and split into pro / non-pro groups."""
    reports = speaker_reports(utterances)
    return reports, summarize(reports)
