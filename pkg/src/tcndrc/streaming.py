"""Block-based streaming inference for causal models and the real-time-factor benchmark."""

from __future__ import annotations

import contextlib
import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from .model import TCN, ControlParams

POWER_OF_TWO_FRAMES = tuple(2 ** k for k in range(5, 17))  # 32 .. 65536


class StreamingError(ValueError):
    pass


class RingBuffer:
    """Fixed-capacity sample history; ``ordered()`` returns oldest to newest."""

    def __init__(self, capacity: int, dtype=np.float32):
        self.capacity = capacity
        self._data = np.zeros(capacity, dtype=dtype)
        self._pos = 0

    def __len__(self) -> int:
        return self.capacity

    def write(self, samples: np.ndarray) -> None:
        if self.capacity == 0:
            return
        samples = np.asarray(samples)[-self.capacity:]
        n = samples.shape[0]
        end = self._pos + n
        if end <= self.capacity:
            self._data[self._pos:end] = samples
        else:
            split = self.capacity - self._pos
            self._data[self._pos:] = samples[:split]
            self._data[: n - split] = samples[split:]
        self._pos = end % self.capacity

    def ordered(self) -> np.ndarray:
        return np.concatenate([self._data[self._pos:], self._data[: self._pos]])

    def clear(self) -> None:
        self._data.fill(0)
        self._pos = 0


class StreamState:
    """Streaming wrapper around a causal model for fixed controls.

    Two strategies produce the same output:

    ``"window"``
        each block runs the model once over ``history + frame`` (``S + r - 1``
        samples) with no extra padding.
    ``"cached"``
        every TCN block keeps the tail of its own input, so a frame costs work
        proportional to ``S`` only. Intended for very small frames.

    Either way ``history`` holds the last ``r - 1`` raw input samples.
    """

    STRATEGIES = ("window", "cached")

    def __init__(self, model: TCN, phi: ControlParams, frame_size: int = 2048,
                 strategy: str = "window"):
        if not model.config.causal:
            raise StreamingError("streaming requires a causal model")
        if frame_size < 1:
            raise StreamingError(f"frame_size must be >= 1, got {frame_size}")
        if strategy not in self.STRATEGIES:
            raise StreamingError(f"unknown strategy {strategy!r}; choose from {self.STRATEGIES}")
        self.model = model
        self.phi = phi
        self.frame_size = frame_size
        self.strategy = strategy
        self.history = RingBuffer(model.receptive_field - 1, model.dtype)
        self._z = None
        self._caches: list[np.ndarray] = []
        if strategy == "cached":
            self._init_caches()

    def _init_caches(self) -> None:
        model = self.model
        controls = np.asarray(self.phi.as_array(), dtype=model.dtype)[None]
        self._z, _ = model.cond.forward(controls)
        # block inputs produced by the all-zero history the offline pass pads with
        h = np.zeros((1, 1, model.receptive_field - 1), dtype=model.dtype)
        self._caches = []
        for block in model.blocks:
            keep = block.conv.span - 1
            self._caches.append(h[:, :, h.shape[2] - keep:].copy())
            if h.shape[2] >= block.conv.span:
                h, _ = block.forward(h, self._z, False)

    def reset(self) -> None:
        self.history.clear()
        if self.strategy == "cached":
            self._init_caches()

    def process_block(self, frame) -> np.ndarray:
        """Consume up to ``frame_size`` samples and emit the same number of output samples."""
        frame = np.asarray(frame, dtype=self.model.dtype)
        if frame.ndim != 1 or frame.shape[0] > self.frame_size:
            raise StreamingError(f"expected a 1-D frame of at most {self.frame_size} samples")
        if frame.shape[0] == 0:
            return frame.copy()
        if self.strategy == "window":
            window = np.concatenate([self.history.ordered(), frame])
            out = self.model.forward(window[None], self.phi, pad=False)[0]
        else:
            out = self._process_cached(frame)
        self.history.write(frame)
        return out

    def _process_cached(self, frame: np.ndarray) -> np.ndarray:
        h = frame[None, None, :]
        for n, block in enumerate(self.model.blocks):
            window = np.concatenate([self._caches[n], h], axis=2)
            keep = block.conv.span - 1
            self._caches[n] = window[:, :, window.shape[2] - keep:]
            h, _ = block.forward(window, self._z, False)
        y, _ = self.model.output.forward(h)
        return y[0, 0]

    def process(self, x) -> np.ndarray:
        """Stream a whole signal through in ``frame_size`` blocks."""
        x = np.asarray(x)
        outs = [self.process_block(x[i : i + self.frame_size])
                for i in range(0, x.shape[0], self.frame_size)]
        return np.concatenate(outs) if outs else np.zeros(0, dtype=self.model.dtype)


def process_block(state: StreamState, frame) -> np.ndarray:
    return state.process_block(frame)


# ----------------------------------------------------------------------------
# benchmark


@dataclass(frozen=True)
class BenchReport:
    frame_size: int
    seconds: float  # wall time of the timed run
    rt_factor: float
    sample_rate: int
    frames: int


def real_time_factor(samples: int, seconds: float, sample_rate: int) -> float:
    """Audio duration processed per second of wall time: ``samples / (seconds * fs)``."""
    return samples / (seconds * sample_rate)


def _timed_run(state: StreamState, frames: np.ndarray) -> float:
    start = time.perf_counter()
    for frame in frames:
        state.process_block(frame)
    return time.perf_counter() - start


def benchmark(model: TCN, frame_sizes=POWER_OF_TWO_FRAMES, seconds_per_point: float = 1.0,
              sample_rate: int = 44100, phi: ControlParams = ControlParams(),
              seed: int = 0, strategy: str = "window") -> list[BenchReport]:
    """Measure the real-time factor per frame size on random input.

    At least one frame is timed per size after one untimed warm-up frame. If a
    run is shorter than 100 ticks of the clock it is repeated with twice as
    many frames.
    """
    rng = np.random.default_rng(seed)
    resolution = time.get_clock_info("perf_counter").resolution
    reports = []
    for size in frame_sizes:
        state = StreamState(model, phi, size, strategy)
        n_frames = max(1, math.ceil(seconds_per_point * sample_rate / size))
        while True:
            frames = (0.1 * rng.standard_normal((n_frames, size))).astype(model.dtype)
            state.process_block(frames[0])  # warm-up
            elapsed = _timed_run(state, frames)
            if elapsed >= 100 * resolution:
                break
            n_frames *= 2
        reports.append(BenchReport(size, elapsed, real_time_factor(size * n_frames, elapsed, sample_rate),
                                   sample_rate, n_frames))
    return reports


def write_bench_csv(reports: list[BenchReport], path) -> None:
    with _open_text(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_size", "seconds", "rt_factor"])
        for r in reports:
            writer.writerow([r.frame_size, f"{r.seconds:.6f}", f"{r.rt_factor:.6g}"])


@contextlib.contextmanager
def _open_text(target):
    """Yield ``target`` itself if it is a text stream, else open it as a file path."""
    if hasattr(target, "write"):
        yield target
    else:
        with open(target, "w", newline="") as fh:
            yield fh
