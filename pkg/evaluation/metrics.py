"""Objective metrics on time-aligned outputs (no warping)."""

import math

import numpy as np
from scipy.fft import dct

from core.errors import AlignmentError, DimensionError, InputError, UndefinedMetricError

MCD_ORDER = 12
MCD_CONSTANT = 10.0 * math.sqrt(2.0) / math.log(10.0)


def mel_cepstrum(mel: np.ndarray, order: int = MCD_ORDER) -> np.ndarray:
    """Orthonormal DCT-II of each log-mel frame, coefficients 1..order (c0 dropped)."""
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] <= order:
        raise DimensionError(f"mel_cepstrum: need [T, >{order}] log-mel frames, got shape {mel.shape}")
    return dct(mel, type=2, norm="ortho", axis=1)[:, 1:order + 1]


def mcd_from_cepstra(c_pred: np.ndarray, c_ref: np.ndarray) -> float:
    if c_pred.shape != c_ref.shape:
        raise AlignmentError(f"cepstra differ in shape: {c_pred.shape} vs {c_ref.shape}")
    diff = c_pred - c_ref
    return float(MCD_CONSTANT * np.mean(np.sqrt(np.sum(diff * diff, axis=1))))


def mcd(mel_pred: np.ndarray, mel_ref: np.ndarray, order: int = MCD_ORDER) -> float:
    """Mel-cepstral distortion in dB between frame-aligned log-mel spectrograms."""
    mel_pred, mel_ref = np.asarray(mel_pred), np.asarray(mel_ref)
    if mel_pred.shape != mel_ref.shape:
        raise AlignmentError(f"mcd needs equal frame counts: {mel_pred.shape} vs {mel_ref.shape}")
    return mcd_from_cepstra(mel_cepstrum(mel_pred, order), mel_cepstrum(mel_ref, order))


def voiced_mask(energy: np.ndarray, threshold: float) -> np.ndarray:
    return np.asarray(energy) > threshold


def f0_rmse(pitch_pred: np.ndarray, pitch_ref: np.ndarray, voiced: np.ndarray) -> float:
    """RMSE of log-F0 over voiced frames."""
    pitch_pred, pitch_ref, voiced = np.asarray(pitch_pred), np.asarray(pitch_ref), np.asarray(voiced, dtype=bool)
    if pitch_pred.shape != pitch_ref.shape or voiced.shape != pitch_ref.shape:
        raise AlignmentError(f"f0_rmse: shapes {pitch_pred.shape}, {pitch_ref.shape}, mask {voiced.shape}")
    if not voiced.any():
        raise UndefinedMetricError("f0_rmse: no voiced frames")
    diff = pitch_pred[voiced] - pitch_ref[voiced]
    return float(np.sqrt(np.mean(diff * diff)))


def duration_rmse(dur_pred: np.ndarray, dur_ref: np.ndarray) -> float:
    """RMSE in frames over phonemes."""
    dur_pred, dur_ref = np.asarray(dur_pred, dtype=np.float64), np.asarray(dur_ref, dtype=np.float64)
    if dur_pred.shape != dur_ref.shape:
        raise InputError(f"duration_rmse: {dur_pred.shape} predictions for {dur_ref.shape} references")
    if dur_ref.size == 0:
        raise InputError("duration_rmse: no phonemes")
    diff = dur_pred - dur_ref
    return float(np.sqrt(np.mean(diff * diff)))
