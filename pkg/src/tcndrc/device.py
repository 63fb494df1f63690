"""Synthetic reference compressor and paired-dataset generation.

The compressor is a feed-forward, log-domain design: peak level detector,
quadratic-knee static curve, then attack/release smoothing of the gain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numba
import numpy as np
import scipy.io.wavfile
import scipy.signal

from .audio import AudioBuffer, read_wav, write_wav
from .model import ControlParams

SAMPLE_RATE = 44100
SEGMENT_LENGTH = 65536
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class CompressorSettings:
    threshold_db: float
    ratio: float
    attack_ms: float = 10.0
    release_ms: float = 500.0
    knee_db: float = 6.0
    makeup_db: float = 0.0
    detector_release_ms: float = 0.1

    def __post_init__(self):
        if self.ratio < 1:
            raise ValueError(f"ratio must be >= 1 (inf for limiting), got {self.ratio}")
        if self.attack_ms <= 0 or self.release_ms <= 0 or self.detector_release_ms <= 0:
            raise ValueError("attack, release and detector times must be positive")
        if self.knee_db < 0:
            raise ValueError(f"knee_db must be >= 0, got {self.knee_db}")


def map_controls(phi: ControlParams) -> CompressorSettings:
    """Affine control law: more peak reduction lowers the threshold; limit mode raises the ratio."""
    return CompressorSettings(
        threshold_db=-6.0 - 36.0 * phi.peak_reduction,
        ratio=10.0 if phi.is_limit else 3.0,
    )


def static_gain_db(level_db, threshold_db: float, ratio: float, knee_db: float):
    """Gain (dB, <= 0) of the quadratic-knee static curve for the given input level."""
    level_db = np.asarray(level_db, dtype=np.float64)
    slope = 1.0 / ratio - 1.0
    over = level_db - threshold_db
    gain = np.zeros_like(level_db)
    if knee_db > 0:
        in_knee = 2.0 * np.abs(over) <= knee_db
        gain = np.where(in_knee, slope * (over + knee_db / 2.0) ** 2 / (2.0 * knee_db), gain)
        above = 2.0 * over > knee_db
    else:
        above = over > 0
    return np.where(above, slope * over, gain)


def _coefficient(time_ms: float, sample_rate: int) -> float:
    return math.exp(-1.0 / (time_ms * 1e-3 * sample_rate))


@numba.njit(cache=True)
def _compress_kernel(x, threshold, slope, knee, makeup, det_rel, att, rel):
    n = x.shape[0]
    y = np.empty(n)
    env = 0.0
    gain = 0.0
    makeup_lin = 10.0 ** (makeup / 20.0)
    for i in range(n):
        mag = abs(x[i])
        if mag > env:
            env = mag
        else:
            env = det_rel * env + (1.0 - det_rel) * mag
        level = 20.0 * math.log10(env) if env > 1e-12 else -240.0
        over = level - threshold
        if knee > 0.0 and 2.0 * abs(over) <= knee:
            target = slope * (over + knee / 2.0) ** 2 / (2.0 * knee)
        elif over > 0.0 and 2.0 * over > knee:
            target = slope * over
        else:
            target = 0.0
        if target < gain:
            gain = att * gain + (1.0 - att) * target
        else:
            gain = rel * gain + (1.0 - rel) * target
        if gain == 0.0:
            y[i] = x[i] * makeup_lin
        else:
            y[i] = x[i] * 10.0 ** ((gain + makeup) / 20.0)
    return y


def compress(x: AudioBuffer, s: CompressorSettings) -> AudioBuffer:
    sr = x.sample_rate
    y = _compress_kernel(
        np.ascontiguousarray(x.samples, dtype=np.float64),
        float(s.threshold_db),
        1.0 / s.ratio - 1.0,
        float(s.knee_db),
        float(s.makeup_db),
        _coefficient(s.detector_release_ms, sr),
        _coefficient(s.attack_ms, sr),
        _coefficient(s.release_ms, sr),
    )
    return AudioBuffer(y, sr)


class ReferenceCompressor:
    """Wraps the synthetic device behind the same ``forward(x, phi)`` call a model exposes.

    Outputs are rounded to ``dtype``; the float32 default matches how dataset
    targets are stored, so evaluating this object on generated data scores 0.
    """

    receptive_field = 1

    def __init__(self, sample_rate: int = SAMPLE_RATE, dtype=np.float32):
        self.sample_rate = sample_rate
        self.dtype = dtype

    def forward(self, x, phi, **_):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        settings = map_controls(phi if isinstance(phi, ControlParams) else ControlParams(*phi))
        out = np.stack([compress(AudioBuffer(row, self.sample_rate), settings).samples for row in x])
        return out.astype(self.dtype)


# ----------------------------------------------------------------------------
# program material


def _pink_noise(rng, n):
    spectrum = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spectrum.shape[0], dtype=np.float64)
    f[0] = 1.0
    pink = np.fft.irfft(spectrum / np.sqrt(f), n)
    return pink / (np.max(np.abs(pink)) + 1e-12)


def _noise_bursts(rng, n, sr):
    out = np.zeros(n)
    noise = _pink_noise(rng, n)
    pos = 0
    while pos < n:
        length = int(rng.uniform(0.05, 0.6) * sr)
        attack = max(1, int(rng.uniform(0.0005, 0.05) * length))
        env = np.ones(length)
        env[:attack] = np.linspace(0.0, 1.0, attack)
        env *= np.exp(-np.arange(length) / (rng.uniform(0.1, 1.0) * length))
        seg = slice(pos, min(n, pos + length))
        out[seg] = noise[seg] * env[: seg.stop - seg.start] * rng.uniform(0.05, 1.0)
        pos += length + int(rng.uniform(0.0, 0.2) * sr)
    return out


def _sweep(rng, n, sr):
    t = np.arange(n) / sr
    duration = max(t[-1], 1.0 / sr)
    f0, f1 = (40.0, 8000.0) if rng.random() < 0.5 else (8000.0, 40.0)
    sweep = scipy.signal.chirp(t, f0=f0, t1=duration, f1=f1, method="logarithmic")
    level = np.linspace(rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0), n)
    return sweep * level


def _multisine(rng, n, sr):
    t = np.arange(n) / sr
    out = np.zeros(n)
    note_len = max(1, int(rng.uniform(0.2, 0.8) * sr))
    for start in range(0, n, note_len):
        seg = slice(start, min(n, start + note_len))
        tt = t[seg]
        f0 = rng.uniform(80.0, 400.0)
        tone = sum(rng.uniform(0.2, 1.0) / h * np.sin(2 * np.pi * f0 * h * tt + rng.uniform(0, 2 * np.pi))
                   for h in range(1, int(rng.integers(3, 7))))
        lfo = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.5, 4.0) * tt)
        out[seg] = tone * lfo * rng.uniform(0.1, 1.0)
    return out


def _transients(rng, n, sr):
    out = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.1) * sr)
    while pos < n:
        length = int(rng.uniform(0.03, 0.3) * sr)
        k = np.arange(length)
        decay = np.exp(-k / (rng.uniform(0.005, 0.08) * sr))
        if rng.random() < 0.5:
            body = rng.standard_normal(length)
        else:
            body = np.sin(2 * np.pi * rng.uniform(50.0, 2000.0) * k / sr)
        seg = slice(pos, min(n, pos + length))
        out[seg] = (body * decay)[: seg.stop - seg.start] * rng.uniform(0.1, 1.0)
        pos += length + int(rng.uniform(0.05, 0.5) * sr)
    return out


_GENERATORS = (_noise_bursts, _sweep, _multisine, _transients)


def program_material(rng: np.random.Generator, num_samples: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Four equal parts (noise bursts, sweep, AM multisine, transients) in random
    order, each at a random level, peak-normalized to -1 dBFS."""
    bounds = np.linspace(0, num_samples, len(_GENERATORS) + 1).astype(int)
    out = np.zeros(num_samples)
    for i, gen_index in enumerate(rng.permutation(len(_GENERATORS))):
        a, b = bounds[i], bounds[i + 1]
        if b <= a:
            continue
        part = _GENERATORS[gen_index](rng, b - a, sample_rate)
        peak = np.max(np.abs(part))
        if peak > 0:
            out[a:b] = part / peak * 10.0 ** (rng.uniform(-30.0, 0.0) / 20.0)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 10.0 ** (-1.0 / 20.0) / peak
    return out


# ----------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class DatasetEntry:
    split: str
    input_path: Path
    target_path: Path
    switch: float
    peak_reduction: float
    start: int = 0
    num_samples: int | None = None  # None: to the end of the file

    @property
    def controls(self) -> ControlParams:
        return ControlParams(self.switch, self.peak_reduction)

    @property
    def config_key(self) -> tuple[float, float]:
        return (self.switch, self.peak_reduction)

    def load(self) -> tuple[AudioBuffer, AudioBuffer]:
        x, y = read_wav(self.input_path), read_wav(self.target_path)
        stop = None if self.num_samples is None else self.start + self.num_samples
        if self.start or stop is not None:
            x = AudioBuffer(x.samples[self.start:stop], x.sample_rate)
            y = AudioBuffer(y.samples[self.start:stop], y.sample_rate)
        return x, y

    def length(self) -> int:
        if self.num_samples is not None:
            return self.num_samples
        return wav_num_frames(self.input_path) - self.start


def wav_num_frames(path) -> int:
    _, data = scipy.io.wavfile.read(path, mmap=True)
    return data.shape[0]


@dataclass
class DatasetManifest:
    """Paired (input, target, controls) entries.

    On disk: one tab-separated line per entry,
    ``split, input_path, target_path, switch, peak_reduction`` with two optional
    trailing columns ``start, num_samples`` for entries that reference a segment
    of a file. Relative paths resolve against the manifest's directory.
    """

    entries: list[DatasetEntry] = field(default_factory=list)
    sample_rate: int = SAMPLE_RATE

    def split(self, name: str) -> list[DatasetEntry]:
        return [e for e in self.entries if e.split == name]

    def configs(self) -> list[tuple[float, float]]:
        return sorted({e.config_key for e in self.entries})

    def duration_per_config(self, split: str | None = None) -> dict[tuple[float, float], float]:
        totals: dict[tuple[float, float], float] = {}
        for e in self.entries:
            if split is None or e.split == split:
                totals[e.config_key] = totals.get(e.config_key, 0.0) + e.length() / self.sample_rate
        return totals

    def write(self, path) -> None:
        path = Path(path)
        root = path.parent.resolve()
        lines = []
        for e in self.entries:
            cols = [e.split, _relative(e.input_path, root), _relative(e.target_path, root),
                    repr(float(e.switch)), repr(float(e.peak_reduction))]
            if e.start or e.num_samples is not None:
                cols += [str(e.start), "" if e.num_samples is None else str(e.num_samples)]
            lines.append("\t".join(cols))
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path, sample_rate: int = SAMPLE_RATE) -> "DatasetManifest":
        path = Path(path)
        root = path.parent
        entries = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) not in (5, 7) or cols[0] not in SPLITS:
                raise ValueError(f"{path}:{lineno}: malformed manifest line")
            start, num = 0, None
            if len(cols) == 7:
                start = int(cols[5])
                num = int(cols[6]) if cols[6] else None
            entries.append(DatasetEntry(cols[0], root / cols[1], root / cols[2],
                                        float(cols[3]), float(cols[4]), start, num))
        return cls(entries, sample_rate)


def _relative(p: Path, root: Path) -> str:
    p = Path(p).resolve()
    try:
        return str(p.relative_to(root))
    except ValueError:
        return str(p)


# ----------------------------------------------------------------------------
# dataset generation and subsetting


def parameter_grid(num_peak_reduction: int = 20) -> list[ControlParams]:
    """Both switch positions times a uniform peak-reduction grid over [0, 1]."""
    values = np.linspace(0.0, 1.0, num_peak_reduction)
    return [ControlParams(switch, float(pr))
            for switch in (ControlParams.COMPRESS, ControlParams.LIMIT) for pr in values]


def _split_for_file(index: int, files_per_config: int) -> str:
    n_val = max(1, round(0.1 * files_per_config))
    n_test = max(1, round(0.1 * files_per_config))
    if index >= files_per_config - n_test:
        return "test"
    if index >= files_per_config - n_test - n_val:
        return "val"
    return "train"


def generate_config(out_dir: Path, seed: int, index: int, phi: ControlParams,
                    seconds_per_config: float, files_per_config: int,
                    sample_rate: int) -> list[DatasetEntry]:
    """Synthesize and process every file for one configuration; deterministic in (seed, index)."""
    rng = np.random.default_rng([seed, index])
    total = int(round(seconds_per_config * sample_rate))
    bounds = np.linspace(0, total, files_per_config + 1).astype(int)
    settings = map_controls(phi)
    mode = "limit" if phi.is_limit else "compress"
    entries = []
    for f in range(files_per_config):
        n = int(bounds[f + 1] - bounds[f])
        # round through float32 first so the stored input is exactly what was processed
        material = program_material(rng, n, sample_rate).astype(np.float32)
        x = AudioBuffer(material.astype(np.float64), sample_rate)
        y = compress(x, settings)
        stem = f"cfg{index:02d}_{mode}_pr{phi.peak_reduction:.4f}_{f:02d}"
        in_path, tgt_path = out_dir / f"{stem}_input.wav", out_dir / f"{stem}_target.wav"
        write_wav(x, in_path, "float32")
        write_wav(y, tgt_path, "float32")
        entries.append(DatasetEntry(_split_for_file(f, files_per_config), in_path, tgt_path,
                                    phi.switch, phi.peak_reduction))
    return entries


def generate_dataset(out_dir, seed: int = 0, seconds_per_config: float = 18.0,
                     files_per_config: int = 10, grid: list[ControlParams] | None = None,
                     sample_rate: int = SAMPLE_RATE) -> DatasetManifest:
    """Write input/target WAV pairs for every grid configuration plus ``manifest.tsv``.

    Each configuration's audio is split into ``files_per_config`` files; the
    last 10% go to test, the 10% before that to validation.
    """
    if seconds_per_config <= 0:
        raise ValueError("seconds_per_config must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = parameter_grid() if grid is None else grid
    entries: list[DatasetEntry] = []
    for index, phi in enumerate(grid):
        entries += generate_config(out_dir, seed, index, phi, seconds_per_config,
                                   files_per_config, sample_rate)
    manifest = DatasetManifest(entries, sample_rate)
    manifest.write(out_dir / "manifest.tsv")
    return manifest


def subset(manifest: DatasetManifest, fraction: float, seed: int = 0,
           segment_length: int = SEGMENT_LENGTH) -> DatasetManifest:
    """Balanced random subset of the training split.

    Each configuration's training audio is cut into non-overlapping segments
    and ``round(fraction * duration / segment_length)`` of them are drawn.
    Validation and test entries pass through unchanged.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return replace(manifest, entries=list(manifest.entries))
    rng = np.random.default_rng(seed)
    by_config: dict[tuple[float, float], list[DatasetEntry]] = {}
    for e in manifest.split("train"):
        by_config.setdefault(e.config_key, []).append(e)

    picked: list[DatasetEntry] = []
    for key in sorted(by_config):
        segments = []
        total = 0
        for e in by_config[key]:
            n = e.length()
            total += n
            segments += [replace(e, start=e.start + k * segment_length, num_samples=segment_length)
                         for k in range(n // segment_length)]
        wanted = int(round(fraction * total / segment_length))
        if wanted < 1:
            raise ValueError(
                f"fraction {fraction} leaves less than one {segment_length}-sample segment for "
                f"configuration switch={key[0]}, peak_reduction={key[1]:.4f}"
            )
        wanted = min(wanted, len(segments))
        for i in sorted(rng.choice(len(segments), size=wanted, replace=False)):
            picked.append(segments[i])
    others = [e for e in manifest.entries if e.split != "train"]
    return DatasetManifest(picked + others, manifest.sample_rate)
