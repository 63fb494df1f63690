"""A small layer kit with hand-written backward passes.

Every op works on batch-first arrays: sequences are ``[batch, channels, time]``
and vectors are ``[batch, features]``. Forward functions return ``(out, ctx)``
where ``ctx`` holds whatever the matching backward needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np


class InsufficientInputError(ValueError):
    """Input is shorter than the convolution's kernel span."""


# ----------------------------------------------------------------------------
# functional ops


def _im2col(x: np.ndarray, kernel_size: int, dilation: int, out_len: int) -> np.ndarray:
    if kernel_size == 1:
        return x[:, :, :out_len]
    taps = [x[:, :, k * dilation : k * dilation + out_len] for k in range(kernel_size)]
    batch, channels = x.shape[:2]
    return np.stack(taps, axis=2).reshape(batch, channels * kernel_size, out_len)


def conv1d_forward(x, weight, bias, dilation: int = 1):
    """Valid (unpadded) dilated cross-correlation.

    ``out[b, o, t] = bias[o] + sum_i sum_k weight[o, i, k] * x[b, i, t + k * dilation]``
    """
    out_ch, in_ch, kernel_size = weight.shape
    if x.ndim != 3 or x.shape[1] != in_ch:
        raise ValueError(f"expected input [batch, {in_ch}, time], got {x.shape}")
    span = (kernel_size - 1) * dilation + 1
    out_len = x.shape[2] - span + 1
    if out_len < 1:
        raise InsufficientInputError(
            f"input length {x.shape[2]} is shorter than the kernel span {span}"
        )
    cols = _im2col(x, kernel_size, dilation, out_len)
    out = np.matmul(weight.reshape(out_ch, in_ch * kernel_size), cols)
    if bias is not None:
        out += bias[:, None]
    return out, (x, weight, dilation, bias is not None)


def conv1d_backward(ctx, grad_out):
    """Returns ``(grad_x, grad_weight, grad_bias)``; ``grad_bias`` is None for bias-free convs."""
    x, weight, dilation, has_bias = ctx
    out_ch, in_ch, kernel_size = weight.shape
    out_len = x.shape[2] - (kernel_size - 1) * dilation
    if grad_out.shape != (x.shape[0], out_ch, out_len):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(x.shape[0], out_ch, out_len)}"
        )
    cols = _im2col(x, kernel_size, dilation, out_len)
    grad_w = np.matmul(grad_out, cols.transpose(0, 2, 1)).sum(axis=0)
    grad_w = grad_w.reshape(weight.shape)
    grad_b = grad_out.sum(axis=(0, 2)) if has_bias else None

    grad_cols = np.matmul(weight.reshape(out_ch, in_ch * kernel_size).T, grad_out)
    if kernel_size == 1:
        grad_x = np.zeros_like(x)
        grad_x[:, :, :out_len] = grad_cols
        return grad_x, grad_w, grad_b
    grad_cols = grad_cols.reshape(x.shape[0], in_ch, kernel_size, out_len)
    grad_x = np.zeros_like(x)
    for k in range(kernel_size):
        grad_x[:, :, k * dilation : k * dilation + out_len] += grad_cols[:, :, k]
    return grad_x, grad_w, grad_b


def _per_channel(v: np.ndarray, ndim: int) -> np.ndarray:
    """Broadcast a [batch, C] or [C] parameter against a [batch, C, time] tensor."""
    if v.ndim == 1:
        return v.reshape((1, -1) + (1,) * (ndim - 2))
    return v.reshape(v.shape + (1,) * (ndim - 2))


def film_forward(h, gamma, beta):
    """Feature-wise affine modulation, ``gamma[c] * h[c, t] + beta[c]``.

    ``gamma`` and ``beta`` are either ``[C]`` (shared) or ``[batch, C]``.
    """
    channels = h.shape[1]
    if gamma.shape[-1] != channels or beta.shape[-1] != channels:
        raise ValueError(
            f"FiLM parameters of length {gamma.shape[-1]}/{beta.shape[-1]} "
            f"do not match {channels} channels"
        )
    out = _per_channel(gamma, h.ndim) * h + _per_channel(beta, h.ndim)
    return out, (h, gamma, beta)


def film_backward(ctx, grad_out):
    h, gamma, beta = ctx
    grad_h = grad_out * _per_channel(gamma, h.ndim)
    reduce_axes = tuple(range(2, h.ndim))
    grad_gamma = (grad_out * h).sum(axis=reduce_axes)
    grad_beta = grad_out.sum(axis=reduce_axes)
    if gamma.ndim == 1:
        grad_gamma = grad_gamma.sum(axis=0)
    if beta.ndim == 1:
        grad_beta = grad_beta.sum(axis=0)
    return grad_h, grad_gamma, grad_beta


def prelu_forward(h, slope):
    if slope.shape != (h.shape[1],):
        raise ValueError(f"slope shape {slope.shape} does not match {h.shape[1]} channels")
    positive = h >= 0
    out = np.where(positive, h, _per_channel(slope, h.ndim) * h)
    return out, (h, slope, positive)


def prelu_backward(ctx, grad_out):
    h, slope, positive = ctx
    grad_h = np.where(positive, grad_out, _per_channel(slope, h.ndim) * grad_out)
    axes = (0,) + tuple(range(2, h.ndim))
    grad_slope = np.where(positive, 0.0, grad_out * h).sum(axis=axes).astype(slope.dtype)
    return grad_h, grad_slope


def batchnorm_forward(h, gamma, beta, running_mean, running_var, *, train: bool,
                      momentum: float = 0.1, eps: float = 1e-5):
    """Batch norm over (batch, time) per channel.

    In train mode ``running_mean`` and ``running_var`` are updated in place.
    """
    axes = (0,) + tuple(range(2, h.ndim))
    if train:
        count = h.size // h.shape[1]
        mean = h.mean(axis=axes)
        var = h.var(axis=axes)
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (h - _per_channel(mean, h.ndim)) * _per_channel(inv_std, h.ndim)
    out = _per_channel(gamma, h.ndim) * xhat + _per_channel(beta, h.ndim)
    return out, (xhat, gamma, inv_std, train)


def batchnorm_backward(ctx, grad_out):
    xhat, gamma, inv_std, train = ctx
    ndim = xhat.ndim
    axes = (0,) + tuple(range(2, ndim))
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    grad_xhat = grad_out * _per_channel(gamma, ndim)
    if not train:
        return grad_xhat * _per_channel(inv_std, ndim), grad_gamma, grad_beta
    mean_g = grad_xhat.mean(axis=axes)
    mean_gx = (grad_xhat * xhat).mean(axis=axes)
    grad_h = (grad_xhat - _per_channel(mean_g, ndim) - xhat * _per_channel(mean_gx, ndim))
    grad_h *= _per_channel(inv_std, ndim)
    return grad_h, grad_gamma, grad_beta


def linear_forward(v, weight, bias):
    out = v @ weight.T
    if bias is not None:
        out = out + bias
    return out, (v, weight, bias is not None)


def linear_backward(ctx, grad_out):
    v, weight, has_bias = ctx
    grad_v = grad_out @ weight
    grad_w = grad_out.T @ v
    grad_b = grad_out.sum(axis=0) if has_bias else None
    return grad_v, grad_w, grad_b


# ----------------------------------------------------------------------------
# modules


class Module:
    """Parameter container. Subclasses register parameters, buffers and children."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def add_child(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def _accumulate(self, name: str, grad) -> None:
        if grad is not None:
            self.grads[name] += grad

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for name, value in self.params.items():
            yield prefix + name, value, self.grads[name]
        for child_name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self.buffers.items():
            yield prefix + name, value
        for child_name, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{child_name}.")

    def zero_grad(self) -> None:
        for _, _, grad in self.named_parameters():
            grad.fill(0.0)

    def num_parameters(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p for name, p, _ in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, target in own.items():
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise ValueError(f"{name}: shape {value.shape} != {target.shape}")
            target[...] = value

    def astype(self, dtype) -> None:
        """Cast every parameter, gradient and buffer in place (rebinds arrays)."""
        for name in list(self.params):
            self.params[name] = self.params[name].astype(dtype)
            self.grads[name] = self.grads[name].astype(dtype)
        for name in list(self.buffers):
            self.buffers[name] = self.buffers[name].astype(dtype)
        for child in self.children.values():
            child.astype(dtype)


def _uniform(rng: np.random.Generator, bound: float, shape, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 dilation: int = 1, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if kernel_size < 1 or dilation < 1:
            raise ValueError("kernel_size and dilation must be >= 1")
        self.dilation = int(dilation)
        bound = 1.0 / np.sqrt(in_channels * kernel_size)
        self.add_param("weight", _uniform(rng, bound, (out_channels, in_channels, kernel_size), dtype))
        self.add_param("bias", _uniform(rng, bound, (out_channels,), dtype))

    @property
    def kernel_size(self) -> int:
        return self.params["weight"].shape[2]

    @property
    def span(self) -> int:
        return (self.kernel_size - 1) * self.dilation + 1

    def forward(self, x):
        return conv1d_forward(x, self.params["weight"], self.params["bias"], self.dilation)

    def backward(self, ctx, grad_out):
        grad_x, grad_w, grad_b = conv1d_backward(ctx, grad_out)
        self._accumulate("weight", grad_w)
        self._accumulate("bias", grad_b)
        return grad_x


class BatchNorm1d(Module):
    def __init__(self, channels: int, *, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.add_param("beta", np.zeros(channels, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train: bool):
        return batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            train=train, momentum=self.momentum, eps=self.eps,
        )

    def backward(self, ctx, grad_out):
        grad_x, grad_gamma, grad_beta = batchnorm_backward(ctx, grad_out)
        self._accumulate("gamma", grad_gamma)
        self._accumulate("beta", grad_beta)
        return grad_x


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25, dtype=np.float32):
        super().__init__()
        self.add_param("slope", np.full(channels, init, dtype=dtype))

    def forward(self, x):
        return prelu_forward(x, self.params["slope"])

    def backward(self, ctx, grad_out):
        grad_x, grad_slope = prelu_backward(ctx, grad_out)
        self._accumulate("slope", grad_slope)
        return grad_x


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, *, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.add_param("weight", _uniform(rng, bound, (out_features, in_features), dtype))
        self.add_param("bias", _uniform(rng, bound, (out_features,), dtype))

    def forward(self, v):
        return linear_forward(v, self.params["weight"], self.params["bias"])

    def backward(self, ctx, grad_out):
        grad_v, grad_w, grad_b = linear_backward(ctx, grad_out)
        self._accumulate("weight", grad_w)
        self._accumulate("bias", grad_b)
        return grad_v


class GradTape:
    """Forward intermediates keyed by layer name; consumable by exactly one backward pass."""

    def __init__(self):
        self._records: dict[str, object] = {}
        self._consumed = False

    def record(self, key: str, ctx) -> None:
        if self._consumed:
            raise RuntimeError("cannot record onto a tape that was already used for backward")
        self._records[key] = ctx

    def __getitem__(self, key: str):
        return self._records[key]

    def __contains__(self, key: str) -> bool:
        return key in self._records

    def begin_backward(self) -> None:
        if self._consumed:
            raise RuntimeError("backward may be called only once per forward")
        self._consumed = True

    def release(self) -> None:
        self._records.clear()


# ----------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def __str__(self) -> str:
        lines = [f"grad check {'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})"]
        for name, err in self.errors.items():
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, zero_tol: float = 1e-7) -> float:
    """Max-abs difference scaled by the larger max-abs magnitude of the two.

    Gradients that are zero up to ``zero_tol`` on both sides (for example a conv
    bias feeding a train-mode batch norm) count as matching.
    """
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale < zero_tol:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_gradient(loss_fn: Callable[[], float], array: np.ndarray, eps: float = 1e-5,
                     indices=None) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. ``array`` (perturbed in place).

    ``indices`` restricts the check to a subset of flat positions; other entries stay zero.
    """
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        plus = loss_fn()
        flat[i] = orig - eps
        minus = loss_fn()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * eps)
    return grad


def grad_check(loss_fn: Callable[[], float], arrays: dict[str, np.ndarray],
               analytic: dict[str, np.ndarray], *, tolerance: float = 1e-6,
               eps: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must recompute the scalar loss from the current contents of
    ``arrays``. With ``max_entries`` set, a random subset of each array is probed.
    """
    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(tolerance)
    for name, array in arrays.items():
        if array.dtype != np.float64:
            raise TypeError(f"{name}: gradient checks need float64 arrays, got {array.dtype}")
        indices = None
        if max_entries is not None and array.size > max_entries:
            indices = rng.choice(array.size, size=max_entries, replace=False)
        numeric = numeric_gradient(loss_fn, array, eps, indices)
        grad = np.asarray(analytic[name], dtype=np.float64)
        if indices is not None:
            numeric = numeric.reshape(-1)[indices]
            grad = grad.reshape(-1)[indices]
        report.errors[name] = relative_error(grad, numeric)
    return report
