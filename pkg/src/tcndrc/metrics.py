"""Evaluation metrics: MAE, multi-resolution STFT error and integrated loudness error."""

from __future__ import annotations

import contextlib
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.signal

from .audio import AudioBuffer
from .device import DatasetEntry
from .training import LossConfig, loss_freq, loss_time

ABSOLUTE_GATE_LUFS = -70.0
RELATIVE_GATE_LU = -10.0
BLOCK_SECONDS = 0.4
STEP_SECONDS = 0.1  # 75% overlap
LOUDNESS_OFFSET = -0.691

# Analog prototypes of the two K-weighting stages. Bilinear transforms of
# these (with prewarping) reproduce the 48 kHz coefficient table and give the
# equivalent filters at any other rate.
_SHELF_F0 = 1681.974450955533
_SHELF_GAIN_DB = 3.999843853973347
_SHELF_Q = 0.7071752369554196
_SHELF_VB_EXP = 0.4996667741545416
_HIGHPASS_F0 = 38.13547087602444
_HIGHPASS_Q = 0.5003270373238773


def k_weighting_sos(sample_rate: int) -> np.ndarray:
    """Second-order sections ``[shelf, highpass]`` for the given sample rate."""
    k = math.tan(math.pi * _SHELF_F0 / sample_rate)
    vh = 10.0 ** (_SHELF_GAIN_DB / 20.0)
    vb = vh ** _SHELF_VB_EXP
    a0 = 1.0 + k / _SHELF_Q + k * k
    shelf = [
        (vh + vb * k / _SHELF_Q + k * k) / a0,
        2.0 * (k * k - vh) / a0,
        (vh - vb * k / _SHELF_Q + k * k) / a0,
        1.0,
        2.0 * (k * k - 1.0) / a0,
        (1.0 - k / _SHELF_Q + k * k) / a0,
    ]
    k = math.tan(math.pi * _HIGHPASS_F0 / sample_rate)
    a0 = 1.0 + k / _HIGHPASS_Q + k * k
    highpass = [
        1.0, -2.0, 1.0,
        1.0,
        2.0 * (k * k - 1.0) / a0,
        (1.0 - k / _HIGHPASS_Q + k * k) / a0,
    ]
    return np.array([shelf, highpass])


@dataclass(frozen=True)
class LoudnessReading:
    lufs: float
    gated: bool  # True when either gate removed at least one block


def block_powers(buf: AudioBuffer) -> np.ndarray:
    """Mean square of the K-weighted signal over 400 ms blocks with 100 ms hop."""
    fs = buf.sample_rate
    block = int(round(BLOCK_SECONDS * fs))
    step = int(round(STEP_SECONDS * fs))
    x = np.asarray(buf.samples, dtype=np.float64)
    if x.shape[0] < block:
        raise ValueError(f"loudness needs at least {BLOCK_SECONDS * 1000:.0f} ms of audio, "
                         f"got {1000 * x.shape[0] / fs:.1f} ms")
    weighted = scipy.signal.sosfilt(k_weighting_sos(fs), x)
    csum = np.concatenate([[0.0], np.cumsum(weighted * weighted)])
    starts = np.arange(0, x.shape[0] - block + 1, step)
    return (csum[starts + block] - csum[starts]) / block


def _lufs(power) -> float:
    return LOUDNESS_OFFSET + 10.0 * math.log10(power)


def integrated_loudness(buf: AudioBuffer) -> LoudnessReading | None:
    """Gated integrated loudness of a mono signal; ``None`` when every block is below -70 LUFS."""
    z = block_powers(buf)
    with np.errstate(divide="ignore"):
        block_lufs = LOUDNESS_OFFSET + 10.0 * np.log10(z)
    kept = block_lufs > ABSOLUTE_GATE_LUFS
    if not kept.any():
        return None
    relative_gate = _lufs(z[kept].mean()) + RELATIVE_GATE_LU
    kept &= block_lufs > relative_gate
    return LoudnessReading(_lufs(z[kept].mean()), gated=bool((~kept).any()))


def loudness_error(pred: AudioBuffer, target: AudioBuffer) -> float | None:
    """Absolute loudness difference in LU, or ``None`` if either signal gates out."""
    a, b = integrated_loudness(pred), integrated_loudness(target)
    if a is None or b is None:
        return None
    return abs(a.lufs - b.lufs)


# ----------------------------------------------------------------------------
# evaluation over a split


@dataclass(frozen=True)
class FileMetrics:
    file: str
    mae: float
    stft: float
    lufs_error: float | None


@dataclass(frozen=True)
class EvaluationResult:
    rows: list[FileMetrics]
    mae: float
    stft: float
    lufs_error: float | None
    loudness_excluded: int

    def write_csv(self, path) -> None:
        with _open_text(path) as fh:
            writer = csv.writer(fh)
            writer.writerow(["file", "mae", "stft", "lufs_error"])
            for r in self.rows:
                writer.writerow([r.file, f"{r.mae:.8g}", f"{r.stft:.8g}",
                                 "" if r.lufs_error is None else f"{r.lufs_error:.8g}"])
            writer.writerow(["mean", f"{self.mae:.8g}", f"{self.stft:.8g}",
                             "" if self.lufs_error is None else f"{self.lufs_error:.8g}"])


def evaluate(model, entries: list[DatasetEntry], loss_cfg: LossConfig = LossConfig()) -> EvaluationResult:
    """Run ``model`` (anything with ``forward(x[batch, time], phi)``) over ``entries`` in eval mode.

    Files whose loudness error is undefined are left out of the loudness mean
    and counted in ``loudness_excluded``.
    """
    if not entries:
        raise ValueError("cannot evaluate an empty split")
    rows = []
    for e in entries:
        x, y = e.load()
        pred = np.asarray(model.forward(x.samples[None, :], e.controls), dtype=np.float64)[0]
        pred_buf = AudioBuffer(pred, x.sample_rate)
        rows.append(FileMetrics(
            file=Path(e.input_path).name if not e.start else f"{Path(e.input_path).name}@{e.start}",
            mae=loss_time(pred, y.samples),
            stft=loss_freq(pred, y.samples, loss_cfg),
            lufs_error=loudness_error(pred_buf, y),
        ))
    lufs = [r.lufs_error for r in rows if r.lufs_error is not None]
    return EvaluationResult(
        rows=rows,
        mae=float(np.mean([r.mae for r in rows])),
        stft=float(np.mean([r.stft for r in rows])),
        lufs_error=float(np.mean(lufs)) if lufs else None,
        loudness_excluded=len(rows) - len(lufs),
    )


@contextlib.contextmanager
def _open_text(target):
    """Yield ``target`` itself if it is a text stream, else open it as a file path."""
    if hasattr(target, "write"):
        yield target
    else:
        with open(target, "w", newline="") as fh:
            yield fh
