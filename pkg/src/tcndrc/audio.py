"""Audio buffers, WAV I/O and short-time Fourier analysis."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.io.wavfile
from numpy.lib.stride_tricks import sliding_window_view


class WavFormatError(ValueError):
    """The file is not a well-formed RIFF/WAVE container."""


class UnsupportedFormatError(WavFormatError):
    """The container is valid but the codec or sample width is not handled."""


@dataclass(frozen=True)
class AudioBuffer:
    """Mono audio with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise ValueError(f"AudioBuffer is mono, got shape {samples.shape}")
        if not np.issubdtype(samples.dtype, np.floating):
            samples = samples.astype(np.float64)
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioBuffer samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    magnitudes: np.ndarray  # [frames, fft_size // 2 + 1]
    fft_size: int
    hop_size: int
    win_size: int

    @property
    def num_frames(self) -> int:
        return self.magnitudes.shape[0]


# fmt chunk codes
_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def _inspect_header(path: Path) -> tuple[int, int]:
    """Walk the RIFF chunks and return (format code, bits per sample)."""
    with open(path, "rb") as fh:
        riff = fh.read(12)
        if len(riff) < 12 or riff[:4] != b"RIFF" or riff[8:12] != b"WAVE":
            raise WavFormatError(f"{path}: not a RIFF/WAVE file")
        while True:
            head = fh.read(8)
            if len(head) < 8:
                raise WavFormatError(f"{path}: no fmt chunk")
            chunk_id, size = struct.unpack("<4sI", head)
            if chunk_id != b"fmt ":
                fh.seek(size + (size & 1), 1)
                continue
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too short ({size} bytes)")
            body = fh.read(size)
            if len(body) < size:
                raise WavFormatError(f"{path}: truncated fmt chunk")
            code, _, _, _, _, bits = struct.unpack("<HHIIHH", body[:16])
            if code == _WAVE_FORMAT_EXTENSIBLE and size >= 26:
                code = struct.unpack("<H", body[24:26])[0]
            return code, bits


def read_wav(path) -> AudioBuffer:
    """Read PCM16, PCM24 or float32 WAV; multichannel input is averaged to mono."""
    path = Path(path)
    code, bits = _inspect_header(path)
    supported = (code == _WAVE_FORMAT_PCM and bits in (16, 24)) or (
        code == _WAVE_FORMAT_IEEE_FLOAT and bits == 32
    )
    if not supported:
        raise UnsupportedFormatError(f"{path}: format code {code} with {bits} bits is not supported")
    try:
        rate, data = scipy.io.wavfile.read(path)
    except ValueError as exc:
        raise WavFormatError(f"{path}: {exc}") from exc

    if code == _WAVE_FORMAT_PCM:
        # scipy left-justifies 24-bit samples into int32
        scale = 2.0 ** (31 if bits == 24 else 15)
        data = data.astype(np.float64) / scale
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return AudioBuffer(data, rate)


def write_wav(buf: AudioBuffer, path, format: str = "float32") -> None:
    path = Path(path)
    if format == "float32":
        data = np.asarray(buf.samples, dtype=np.float32)
    elif format == "pcm16":
        scaled = np.rint(np.asarray(buf.samples, dtype=np.float64) * 32768.0)
        data = np.clip(scaled, -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV format {format!r}; expected 'pcm16' or 'float32'")
    scipy.io.wavfile.write(path, buf.sample_rate, data)


def hann_window(win_size: int, dtype=np.float64) -> np.ndarray:
    """Periodic Hann window."""
    n = np.arange(win_size)
    return (0.5 * (1.0 - np.cos(2.0 * np.pi * n / win_size))).astype(dtype)


def num_frames(length: int, win_size: int, hop_size: int) -> int:
    if length < win_size:
        return 0
    return 1 + (length - win_size) // hop_size


def _check_resolution(fft_size: int, hop_size: int, win_size: int) -> None:
    if fft_size < 1 or fft_size & (fft_size - 1):
        raise ValueError(f"fft_size must be a power of two, got {fft_size}")
    if not 1 <= win_size <= fft_size:
        raise ValueError(f"win_size must be in [1, fft_size], got {win_size}")
    if hop_size < 1:
        raise ValueError(f"hop_size must be >= 1, got {hop_size}")


def frame_signal(x: np.ndarray, win_size: int, hop_size: int) -> np.ndarray:
    """Strided view of shape [..., frames, win_size]; trailing samples that don't fill a window are dropped."""
    n = num_frames(x.shape[-1], win_size, hop_size)
    if n == 0:
        return np.zeros(x.shape[:-1] + (0, win_size), dtype=x.dtype)
    return sliding_window_view(x, win_size, axis=-1)[..., : (n - 1) * hop_size + 1 : hop_size, :]


def stft_complex(x: np.ndarray, fft_size: int, hop_size: int, win_size: int) -> np.ndarray:
    """Complex STFT of the last axis, shape [..., frames, fft_size // 2 + 1]."""
    _check_resolution(fft_size, hop_size, win_size)
    frames = frame_signal(x, win_size, hop_size) * hann_window(win_size, x.dtype)
    return scipy.fft.rfft(frames, n=fft_size, axis=-1)


def stft(buf: AudioBuffer, fft_size: int, hop_size: int, win_size: int) -> Spectrogram:
    spec = stft_complex(np.asarray(buf.samples), fft_size, hop_size, win_size)
    return Spectrogram(np.abs(spec), fft_size, hop_size, win_size)
