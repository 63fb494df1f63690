"""Losses, optimizer, learning-rate schedule and the training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.fft

from .audio import AudioBuffer, hann_window, stft_complex
from .device import DatasetEntry, DatasetManifest
from .model import TCN, save_checkpoint
from .nn import GradTape

log = logging.getLogger(__name__)

DEFAULT_RESOLUTIONS = ((1024, 256, 1024), (2048, 512, 2048), (512, 128, 512))


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    stft_resolutions: tuple[tuple[int, int, int], ...] = DEFAULT_RESOLUTIONS
    log_floor: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not self.stft_resolutions:
            raise ValueError("at least one STFT resolution is required")

    @property
    def max_window(self) -> int:
        return max(win for _, _, win in self.stft_resolutions)


@dataclass(frozen=True)
class LossReport:
    l_time: float
    l_freq: float
    l_overall: float

    @classmethod
    def combine(cls, l_time: float, l_freq: float, alpha: float) -> "LossReport":
        return cls(l_time, l_freq, l_time + alpha * l_freq)


def _samples(a) -> np.ndarray:
    return a.samples if isinstance(a, AudioBuffer) else np.asarray(a)


def _check_pair(pred, target):
    pred, target = _samples(pred), _samples(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return pred, target


def loss_time(pred, target) -> float:
    """Mean absolute error."""
    pred, target = _check_pair(pred, target)
    return float(np.mean(np.abs(pred - target)))


def _resolution_term(pred, target, res, floor, want_grad):
    """Spectral convergence + mean log-magnitude L1 for one STFT resolution."""
    fft_size, hop, win = res
    xp = stft_complex(pred, fft_size, hop, win)
    mag_p = np.abs(xp)
    mag_t = np.abs(stft_complex(target, fft_size, hop, win))
    diff = mag_p - mag_t
    diff_norm = np.sqrt(np.sum(diff.astype(np.float64) ** 2))
    target_norm = np.sqrt(np.sum(mag_t.astype(np.float64) ** 2))
    sc = diff_norm / target_norm if target_norm > 0 else 0.0
    log_diff = np.log(np.maximum(mag_t, floor)) - np.log(np.maximum(mag_p, floor))
    log_term = float(np.mean(np.abs(log_diff))) if log_diff.size else 0.0
    value = float(sc) + log_term
    if not want_grad:
        return value, None

    grad_mag = np.zeros_like(mag_p)
    if target_norm > 0 and diff_norm > 0:
        grad_mag += diff / (diff_norm * target_norm)
    above = mag_p > floor
    grad_mag -= np.where(above, np.sign(log_diff) / np.where(above, mag_p, 1.0), 0.0) / log_diff.size
    # d|X|/dX: unit phasor; zero where the bin vanishes
    safe = np.where(mag_p > 0, mag_p, 1.0)
    grad_spec = np.where(mag_p > 0, grad_mag / safe, 0.0) * xp
    # adjoint of rfft: real part of sum_k G_k e^{+i 2 pi k t / n}
    half = grad_spec.copy()
    half[..., 1 : fft_size // 2] *= 0.5
    grad_frames = scipy.fft.irfft(half, n=fft_size, axis=-1)[..., :win] * fft_size
    grad_frames *= hann_window(win, grad_frames.dtype)
    return value, _overlap_add(grad_frames, hop, pred.shape)


def _overlap_add(frames: np.ndarray, hop: int, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=frames.dtype)
    n_frames, win = frames.shape[-2:]
    if n_frames == 0:
        return out
    if win % hop == 0:
        span = n_frames * hop
        for j in range(win // hop):
            chunk = frames[..., j * hop : (j + 1) * hop]
            out[..., j * hop : j * hop + span] += chunk.reshape(chunk.shape[:-2] + (span,))
        return out
    for f in range(n_frames):
        out[..., f * hop : f * hop + win] += frames[..., f, :]
    return out


def _freq_loss(pred, target, cfg: LossConfig, want_grad: bool):
    total, grad = 0.0, None
    for res in cfg.stft_resolutions:
        value, g = _resolution_term(pred, target, res, cfg.log_floor, want_grad)
        total += value
        if want_grad:
            grad = g if grad is None else grad + g
    n = len(cfg.stft_resolutions)
    return total / n, (None if grad is None else grad / n)


def loss_freq(pred, target, cfg: LossConfig = LossConfig()) -> float:
    """Multi-resolution STFT error, averaged over resolutions."""
    pred, target = _check_pair(pred, target)
    if pred.shape[-1] < cfg.max_window:
        raise ValueError(f"signals of length {pred.shape[-1]} are shorter than the "
                         f"largest STFT window {cfg.max_window}")
    return _freq_loss(pred, target, cfg, want_grad=False)[0]


def loss_overall(pred, target, cfg: LossConfig = LossConfig()) -> LossReport:
    return LossReport.combine(loss_time(pred, target), loss_freq(pred, target, cfg), cfg.alpha)


def loss_and_grad(pred, target, cfg: LossConfig = LossConfig()) -> tuple[LossReport, np.ndarray]:
    """Overall loss and its gradient with respect to ``pred``."""
    pred, target = _check_pair(pred, target)
    if pred.shape[-1] < cfg.max_window:
        raise ValueError(f"signals of length {pred.shape[-1]} are shorter than the "
                         f"largest STFT window {cfg.max_window}")
    l_time = float(np.mean(np.abs(pred - target)))
    grad_time = np.sign(pred - target) / pred.size
    l_freq, grad_freq = _freq_loss(pred, target, cfg, want_grad=True)
    report = LossReport.combine(l_time, l_freq, cfg.alpha)
    return report, (grad_time + cfg.alpha * grad_freq).astype(pred.dtype)


# ----------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. A non-finite gradient aborts before any change."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}; step aborted")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


class PlateauScheduler:
    """Divide the learning rate when validation loss stops improving.

    A decay happens once the best loss has not strictly improved for
    ``patience`` consecutive epochs; the following ``cooldown`` epochs cannot
    trigger another one.
    """

    def __init__(self, lr: float, patience: int = 10, factor: float = 10.0,
                 cooldown: int | None = None):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.cooldown = patience if cooldown is None else cooldown
        self.best = float("inf")
        self.bad_epochs = 0
        self.cooldown_left = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.cooldown_left > 0:
            self.cooldown_left -= 1
            self.bad_epochs = 0
        if self.bad_epochs >= self.patience:
            self.lr /= self.factor
            self.bad_epochs = 0
            self.cooldown_left = self.cooldown
        return self.lr


def lr_schedule(history, lr: float = 3e-4, patience: int = 10, factor: float = 10.0) -> float:
    """Learning rate after replaying a per-epoch validation-loss history."""
    if len(history) < 1:
        raise ValueError("need at least one recorded epoch")
    sched = PlateauScheduler(lr, patience, factor)
    for loss in history:
        sched.step(loss)
    return sched.lr


def augment(x, y, rng: np.random.Generator, p: float = 0.5):
    """Negate input and target together with probability ``p``."""
    if rng.random() < p:
        return -x, -y
    return x, y


# ----------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    input_length: int = 65536
    epochs: int = 60
    lr: float = 3e-4
    plateau_patience: int = 10
    lr_decay_factor: float = 10.0
    augment_invert_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "input_length", "epochs", "plateau_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.lr_decay_factor <= 0:
            raise ValueError("lr and lr_decay_factor must be positive")
        if not 0.0 <= self.augment_invert_prob <= 1.0:
            raise ValueError("augment_invert_prob must be in [0, 1]")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    model: TCN
    best_epoch: int
    best_val_loss: float
    history: list[EpochLog]


class Optimizer:
    """Adam bound to a model's parameters."""

    def __init__(self, model: TCN, lr: float):
        self.model = model
        self.lr = lr
        self.state = AdamState()

    def step(self) -> None:
        params, grads = {}, {}
        for name, p, g in self.model.named_parameters():
            params[name], grads[name] = p, g
        adam_step(params, grads, self.state, self.lr)


def train_step(model: TCN, opt: Optimizer, x, y, phi, loss_cfg: LossConfig) -> LossReport:
    model.zero_grad()
    tape = GradTape()
    pred = model.forward(x, phi, train=True, tape=tape)
    report, grad = loss_and_grad(pred, np.asarray(y, dtype=pred.dtype), loss_cfg)
    model.backward(tape, grad)
    opt.step()
    return report


def _load_split(entries: list[DatasetEntry], dtype) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    data = []
    for e in entries:
        x, y = e.load()
        data.append((x.samples.astype(dtype), y.samples.astype(dtype), e.controls.as_array()))
    return data


def validation_loss(model: TCN, data, loss_cfg: LossConfig) -> float:
    losses = []
    for x, y, phi in data:
        pred = model.forward(x[None], phi)
        losses.append(loss_overall(pred, y[None], loss_cfg).l_overall)
    return float(np.mean(losses))


def train(model: TCN, manifest: DatasetManifest, train_cfg: TrainConfig = TrainConfig(),
          loss_cfg: LossConfig = LossConfig(), out_dir=None,
          validate: Callable[[TCN], float] | None = None) -> TrainResult:
    """Minibatch training on random crops; returns the model with the best validation loss.

    One epoch draws one random crop from every training file. With ``out_dir``
    set, ``best.ckpt`` is rewritten on each improvement and ``train_log.csv``
    gets one row per epoch. ``validate`` overrides the validation-loss function.
    """
    train_entries = manifest.split("train")
    val_entries = manifest.split("val")
    if not train_entries:
        raise ValueError("manifest has an empty train split")
    if validate is None and not val_entries:
        raise ValueError("manifest has an empty val split")

    rng = np.random.default_rng(train_cfg.seed)
    train_data = _load_split(train_entries, model.dtype)
    too_short = [str(e.input_path) for e, (x, _, _) in zip(train_entries, train_data)
                 if x.shape[0] < train_cfg.input_length]
    if too_short:
        raise ValueError(f"{len(too_short)} training files are shorter than input_length="
                         f"{train_cfg.input_length}, e.g. {too_short[0]}")
    if validate is None:
        val_data = _load_split(val_entries, model.dtype)
        validate = lambda m: validation_loss(m, val_data, loss_cfg)  # noqa: E731

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    opt = Optimizer(model, train_cfg.lr)
    sched = PlateauScheduler(train_cfg.lr, train_cfg.plateau_patience, train_cfg.lr_decay_factor)
    best_state, best_epoch, best_val = None, -1, float("inf")
    history: list[EpochLog] = []
    length = train_cfg.input_length

    for epoch in range(train_cfg.epochs):
        started = time.perf_counter()
        order = rng.permutation(len(train_data))
        batch_losses = []
        for b in range(0, len(order), train_cfg.batch_size):
            xs, ys, phis = [], [], []
            for i in order[b : b + train_cfg.batch_size]:
                x, y, phi = train_data[i]
                start = int(rng.integers(0, x.shape[0] - length + 1))
                xc, yc = augment(x[start : start + length], y[start : start + length], rng,
                                 train_cfg.augment_invert_prob)
                xs.append(xc)
                ys.append(yc)
                phis.append(phi)
            report = train_step(model, opt, np.stack(xs), np.stack(ys), np.stack(phis), loss_cfg)
            batch_losses.append(report.l_overall)

        val = float(validate(model))
        lr_used = opt.lr
        opt.lr = sched.step(val)
        entry = EpochLog(epoch, float(np.mean(batch_losses)), val, lr_used,
                         time.perf_counter() - started)
        history.append(entry)
        log.info("epoch %d train %.4f val %.4f lr %.1e (%.1fs)", epoch, entry.train_loss,
                 val, lr_used, entry.seconds)
        if val < best_val:
            best_val, best_epoch = val, epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
            if out_dir is not None:
                model.metadata = {"epoch": epoch, "best_val_loss": val}
                save_checkpoint(model, out_dir / "best.ckpt")
        if out_dir is not None:
            write_train_log(history, out_dir / "train_log.csv")

    if best_state is not None:
        model.load_state_dict(best_state)
    model.metadata = {"epoch": best_epoch, "best_val_loss": best_val}
    return TrainResult(model, best_epoch, best_val, history)


def write_train_log(history: list[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
        for e in history:
            writer.writerow([e.epoch, f"{e.train_loss:.6g}", f"{e.val_loss:.6g}", f"{e.lr:.6g}",
                             f"{e.seconds:.3f}"])
