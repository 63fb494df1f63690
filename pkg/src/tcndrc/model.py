"""Conditional TCN with rapidly growing dilations, plus checkpoint I/O."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio import AudioBuffer
from .nn import (
    BatchNorm1d,
    Conv1d,
    GradTape,
    Linear,
    Module,
    PReLU,
    film_backward,
    film_forward,
)

DEFAULT_SAMPLE_RATE = 44100


@dataclass(frozen=True)
class TcnConfig:
    kernel_size: int
    num_layers: int
    dilation_growth: int
    channels: int = 32
    causal: bool = True
    cond_dim: int = 32
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        for name in ("kernel_size", "num_layers", "dilation_growth", "channels", "cond_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def dilations(self) -> list[int]:
        return [self.dilation_growth ** n for n in range(self.num_layers)]

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * sum(self.dilations)


PRESETS: dict[str, tuple[int, int, int, int]] = {
    # name: (K, N, d, C)
    "tcn100": (5, 4, 10, 32),
    "tcn300": (13, 4, 10, 32),
    "tcn1000": (5, 5, 10, 32),
    "tcn324": (15, 10, 2, 32),
}


def preset(name: str) -> TcnConfig:
    """Look up a preset such as ``tcn300``, ``tcn300-causal`` or ``tcn100-noncausal``.

    A bare preset name is causal.
    """
    base, _, suffix = name.lower().partition("-")
    if base not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    causal = {"": True, "causal": True, "c": True, "noncausal": False, "n": False}.get(suffix)
    if causal is None:
        raise KeyError(f"unknown causality suffix {suffix!r} in {name!r}")
    k, n, d, c = PRESETS[base]
    return TcnConfig(kernel_size=k, num_layers=n, dilation_growth=d, channels=c, causal=causal)


@dataclass(frozen=True)
class ReceptiveField:
    samples: int
    milliseconds: float


def receptive_field(config: TcnConfig, sample_rate: int = DEFAULT_SAMPLE_RATE) -> ReceptiveField:
    # r_0 = K, r_n = r_{n-1} + (K - 1) * d^n
    r = config.kernel_size
    for n in range(1, config.num_layers):
        r += (config.kernel_size - 1) * config.dilation_growth ** n
    return ReceptiveField(samples=r, milliseconds=1000.0 * r / sample_rate)


@dataclass(frozen=True)
class ControlParams:
    """Device controls: compress/limit switch and normalized peak reduction."""

    switch: float = 0.0
    peak_reduction: float = 0.0

    COMPRESS = 0.0
    LIMIT = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.switch) and math.isfinite(self.peak_reduction)):
            raise ValueError("control parameters must be finite")

    @classmethod
    def from_names(cls, switch: str, peak_reduction: float) -> "ControlParams":
        modes = {"compress": cls.COMPRESS, "limit": cls.LIMIT}
        if switch not in modes:
            raise ValueError(f"switch must be 'compress' or 'limit', got {switch!r}")
        return cls(modes[switch], float(peak_reduction))

    @property
    def is_limit(self) -> bool:
        return self.switch >= 0.5

    def as_array(self) -> np.ndarray:
        return np.array([self.switch, self.peak_reduction])


def _controls_matrix(phi, batch: int, dtype) -> np.ndarray:
    if isinstance(phi, ControlParams):
        phi = phi.as_array()
    phi = np.asarray(phi, dtype=dtype)
    if phi.ndim == 1:
        phi = np.broadcast_to(phi, (batch, phi.shape[0]))
    if phi.shape != (batch, 2):
        raise ValueError(f"controls must have shape ({batch}, 2), got {phi.shape}")
    return np.ascontiguousarray(phi)


class ConditioningNet(Module):
    """MLP mapping the two device controls to a conditioning embedding."""

    def __init__(self, num_controls: int, cond_dim: int, *, rng, dtype):
        super().__init__()
        self.lin0 = self.add_child("lin0", Linear(num_controls, cond_dim, rng=rng, dtype=dtype))
        self.act0 = self.add_child("act0", PReLU(cond_dim, dtype=dtype))
        self.lin1 = self.add_child("lin1", Linear(cond_dim, cond_dim, rng=rng, dtype=dtype))
        self.act1 = self.add_child("act1", PReLU(cond_dim, dtype=dtype))

    def forward(self, phi):
        h, c0 = self.lin0.forward(phi)
        h, c1 = self.act0.forward(h)
        h, c2 = self.lin1.forward(h)
        z, c3 = self.act1.forward(h)
        return z, (c0, c1, c2, c3)

    def backward(self, ctx, grad_z):
        c0, c1, c2, c3 = ctx
        g = self.act1.backward(c3, grad_z)
        g = self.lin1.backward(c2, g)
        g = self.act0.backward(c1, g)
        return self.lin0.backward(c0, g)


class TCNBlock(Module):
    """conv -> batch norm -> FiLM -> PReLU, plus a cropped residual connection."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, dilation: int,
                 cond_dim: int, causal: bool, *, rng, dtype):
        super().__init__()
        self.causal = causal
        self.channels = out_ch
        self.conv = self.add_child("conv", Conv1d(in_ch, out_ch, kernel_size, dilation, rng=rng, dtype=dtype))
        self.bn = self.add_child("bn", BatchNorm1d(out_ch, dtype=dtype))
        self.film = self.add_child("film", Linear(cond_dim, 2 * out_ch, rng=rng, dtype=dtype))
        self.act = self.add_child("act", PReLU(out_ch, dtype=dtype))
        self.res = None
        if in_ch != out_ch:
            self.res = self.add_child("res", Conv1d(in_ch, out_ch, 1, rng=rng, dtype=dtype))

    def crop_slice(self, in_len: int, out_len: int) -> slice:
        if self.causal:
            return slice(in_len - out_len, in_len)
        start = (in_len - out_len) // 2
        return slice(start, start + out_len)

    def forward(self, x, z, train: bool):
        h, c_conv = self.conv.forward(x)
        h, c_bn = self.bn.forward(h, train)
        film_params, c_lin = self.film.forward(z)
        gamma = film_params[:, : self.channels]
        beta = film_params[:, self.channels :]
        h, c_film = film_forward(h, gamma, beta)
        h, c_act = self.act.forward(h)
        crop = self.crop_slice(x.shape[2], h.shape[2])
        res = x[:, :, crop]
        c_res = None
        if self.res is not None:
            res, c_res = self.res.forward(res)
        return h + res, (c_conv, c_bn, c_lin, c_film, c_act, c_res, crop)

    def backward(self, ctx, grad_out):
        """Returns ``(grad_x, grad_z)``."""
        c_conv, c_bn, c_lin, c_film, c_act, c_res, crop = ctx
        g = self.act.backward(c_act, grad_out)
        g, g_gamma, g_beta = film_backward(c_film, g)
        grad_z = self.film.backward(c_lin, np.concatenate([g_gamma, g_beta], axis=1))
        g = self.bn.backward(c_bn, g)
        grad_x = self.conv.backward(c_conv, g)
        g_res = grad_out if self.res is None else self.res.backward(c_res, grad_out)
        grad_x[:, :, crop] += g_res
        return grad_x, grad_z


class TCN(Module):
    """Temporal convolutional network conditioned on device controls via FiLM.

    Inputs are padded once at the boundary (left only when causal), and every
    convolution is unpadded, so the output has the same length as the input.
    """

    def __init__(self, config: TcnConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.config = config
        self.metadata: dict = {}
        rng = np.random.default_rng(seed)
        self.cond = self.add_child("cond", ConditioningNet(2, config.cond_dim, rng=rng, dtype=dtype))
        self.blocks: list[TCNBlock] = []
        in_ch = config.in_channels
        for n, dilation in enumerate(config.dilations):
            block = TCNBlock(in_ch, config.channels, config.kernel_size, dilation,
                             config.cond_dim, config.causal, rng=rng, dtype=dtype)
            self.blocks.append(self.add_child(f"blocks.{n}", block))
            in_ch = config.channels
        self.output = self.add_child("output", Conv1d(in_ch, config.out_channels, 1, rng=rng, dtype=dtype))

    @property
    def dtype(self):
        return self.output.params["weight"].dtype

    @property
    def receptive_field(self) -> int:
        return self.config.receptive_field

    def padding(self) -> tuple[int, int]:
        total = self.receptive_field - 1
        if self.config.causal:
            return total, 0
        return (total + 1) // 2, total // 2

    def forward(self, x, phi, *, train: bool = False, pad: bool = True,
                tape: GradTape | None = None) -> np.ndarray:
        """Run the network on ``x`` of shape ``[batch, time]``.

        ``phi`` is a :class:`ControlParams`, a length-2 vector shared by the
        batch, or a ``[batch, 2]`` matrix. With ``pad=False`` the caller supplies
        the ``r - 1`` samples of context and the output is ``r - 1`` shorter.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None]
        batch = x.shape[0]
        controls = _controls_matrix(phi, batch, self.dtype)
        h = x[:, None, :]
        if pad:
            left, right = self.padding()
            h = np.pad(h, ((0, 0), (0, 0), (left, right)))
        z, c_cond = self.cond.forward(controls)
        if tape is not None:
            tape.record("cond", c_cond)
        for n, block in enumerate(self.blocks):
            h, ctx = block.forward(h, z, train)
            if tape is not None:
                tape.record(f"blocks.{n}", ctx)
        y, c_out = self.output.forward(h)
        if tape is not None:
            tape.record("output", c_out)
            tape.record("input_shape", (x.shape, pad, self.padding()))
        return y[:, 0, :]

    def backward(self, tape: GradTape, grad_y) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. the input ``x``."""
        tape.begin_backward()
        g = np.asarray(grad_y, dtype=self.dtype)[:, None, :]
        g = self.output.backward(tape["output"], g)
        grad_z = None
        for n in reversed(range(len(self.blocks))):
            g, gz = self.blocks[n].backward(tape[f"blocks.{n}"], g)
            grad_z = gz if grad_z is None else grad_z + gz
        self.cond.backward(tape["cond"], grad_z)
        shape, pad, (left, right) = tape["input_shape"]
        tape.release()
        g = g[:, 0, :]
        if pad:
            g = g[:, left : g.shape[1] - right]
        return g.reshape(shape)

    def process(self, buf: AudioBuffer, phi: ControlParams) -> AudioBuffer:
        y = self.forward(buf.samples[None, :], phi)[0]
        return AudioBuffer(y.astype(np.float64), buf.sample_rate)

    def __call__(self, x, phi):
        return self.forward(x, phi)

    def copy(self) -> "TCN":
        clone = TCN(self.config, 0, self.dtype)
        clone.load_state_dict(self.state_dict())
        clone.metadata = dict(self.metadata)
        return clone


def build_model(config: TcnConfig, seed: int = 0, dtype=np.float32) -> TCN:
    return TCN(config, seed, dtype)


# ----------------------------------------------------------------------------
# checkpoints
#
# Layout: a magic line, a line holding the manifest length in bytes, a UTF-8
# JSON manifest, then every tensor as little-endian float32, back to back in
# manifest order. Offsets in the manifest are relative to the start of the
# tensor data.

CHECKPOINT_MAGIC = b"TCNDRC-CHECKPOINT\n"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(model: TCN, path, metadata: dict | None = None) -> None:
    meta = dict(model.metadata)
    if metadata:
        meta.update(metadata)
    tensors, blobs, offset = [], [], 0
    for name, value in model.state_dict().items():
        blob = np.ascontiguousarray(value, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(value.shape), "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    data = b"".join(blobs)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "float32-le",
        "config": asdict(model.config),
        "metadata": meta,
        "tensors": tensors,
        "data_bytes": len(data),
        "crc32": zlib.crc32(data),
    }
    text = json.dumps(manifest, indent=1).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(f"{len(text)}\n".encode("ascii"))
        fh.write(text)
        fh.write(data)


def read_checkpoint_manifest(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    rest = raw[len(CHECKPOINT_MAGIC):]
    line, sep, rest = rest.partition(b"\n")
    if not sep or not line.isdigit():
        raise CheckpointError(f"{path}: corrupt manifest header")
    size = int(line)
    if len(rest) < size:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(rest[:size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    data = rest[size:]
    if len(data) != manifest["data_bytes"]:
        raise CheckpointError(
            f"{path}: expected {manifest['data_bytes']} bytes of tensor data, found {len(data)}"
        )
    if zlib.crc32(data) != manifest["crc32"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    return manifest, data


def load_checkpoint(path) -> TCN:
    manifest, data = read_checkpoint_manifest(path)
    config = TcnConfig(**manifest["config"])
    model = TCN(config, seed=0)
    state = {}
    for entry in manifest["tensors"]:
        blob = data[entry["offset"] : entry["offset"] + entry["nbytes"]]
        state[entry["name"]] = np.frombuffer(blob, dtype="<f4").reshape(entry["shape"])
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    model.metadata = dict(manifest.get("metadata", {}))
    return model
