"""Real-time-factor benchmark.

RTF = wall-clock synthesis time / duration of the synthesized audio, with
10 ms frames. Speaker embeddings are computed beforehand so only the acoustic
model is timed; BLAS is pinned to one thread for the measurement.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from core.errors import ContractError
from tools.synth import FRAME_SHIFT_S, Utterance
from tts.model import MoATTS

logger = logging.getLogger(__name__)

MAX_LENGTHEN = 64


@dataclass
class BenchItem:
    phonemes: np.ndarray
    x_e: np.ndarray
    durations: Optional[np.ndarray] = None


@dataclass
class RTFReport:
    rtf_median: float
    rtf_iqr: float
    frames: int
    audio_seconds: float
    repeats: int
    lengthen: int = 1
    rtfs: List[float] = field(default_factory=list)


def _synthesize_all(model: MoATTS, items: Sequence[BenchItem]) -> int:
    frames = 0
    for item in items:
        out = model.synthesize(item.phonemes, x_e=item.x_e, durations=item.durations)
        frames += out.mel.shape[0]
    return frames


def bench_items(model: MoATTS, utterances: Sequence[Utterance]) -> List[BenchItem]:
    """Ground-truth durations and precomputed self-reference embeddings for each utterance."""
    model.eval()
    return [BenchItem(u.phonemes, model.embedder(u.ref_features).data, u.durations) for u in utterances]


def rtf_bench(model: MoATTS, items: Sequence[BenchItem], repeats: int = 5, warmup: int = 2,
              min_seconds: float = 0.05) -> RTFReport:
    """Median and interquartile range of RTF over ``repeats`` timed passes."""
    if repeats < 1:
        raise ContractError(f"rtf_bench needs at least one repeat, got {repeats}")
    if not items:
        raise ContractError("rtf_bench needs at least one utterance")
    model.eval()
    workload = list(items)
    lengthen = 1
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            _synthesize_all(model, workload)

        started = time.perf_counter()
        frames = _synthesize_all(model, workload)
        elapsed = time.perf_counter() - started
        while elapsed < min_seconds and lengthen < MAX_LENGTHEN:
            lengthen *= 2
            logger.warning("Pass took %.2e s, below timer floor %.2e s; repeating the workload %dx",
                           elapsed, min_seconds, lengthen)
            workload = list(items) * lengthen
            started = time.perf_counter()
            frames = _synthesize_all(model, workload)
            elapsed = time.perf_counter() - started

        seconds = frames * FRAME_SHIFT_S
        rtfs = []
        for _ in range(repeats):
            started = time.perf_counter()
            _synthesize_all(model, workload)
            rtfs.append((time.perf_counter() - started) / seconds)

    q1, median, q3 = np.percentile(rtfs, [25, 50, 75], method="linear")
    report = RTFReport(rtf_median=float(median), rtf_iqr=float(q3 - q1), frames=frames, audio_seconds=seconds,
                       repeats=repeats, lengthen=lengthen, rtfs=rtfs)
    logger.info("RTF %.4f (IQR %.4f) over %d frames x %d repeats", report.rtf_median, report.rtf_iqr, frames, repeats)
    return report
