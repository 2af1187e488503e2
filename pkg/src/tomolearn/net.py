"""Bias-free convolutional denoiser with exact reverse-mode gradients.

Architecture: 3x3 same-padded convolutions; every hidden layer is
conv -> scale normalization -> ReLU, the final layer is a plain conv.
There are no additive parameters anywhere, so the network is positively
homogeneous: f(a*x) = a*f(x) for a > 0.

Scale normalization divides each channel by its root-mean-square (no mean
subtraction, no additive shift), re-multiplies by the RMS of the network
input, and applies a learnable positive per-channel scale.  Referencing
the input RMS keeps every layer degree-1 in the input (a bare per-channel
RMS division would be scale-invariant and break homogeneity) while still
equalizing channel magnitudes per instance; it is stable with
single-image batches.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import FormatError, ImageGrid

MAGIC_CHECKPOINT = b"TLNN"
_NORM_EPS = 1e-12
_SCALE_FLOOR = 1e-6


@dataclass
class DenoiserModel:
    """Kernel stack plus per-hidden-layer normalization scales."""

    kernels: list
    scales: list
    residual: bool = True
    normalize: bool = True

    def __post_init__(self):
        if len(self.kernels) < 1:
            raise ValueError("model needs at least one convolution")
        if self.kernels[0].shape[1] != 1 or self.kernels[-1].shape[0] != 1:
            raise ValueError("first layer must take 1 channel, last emit 1")
        for k in self.kernels:
            if k.shape[2:] != (3, 3):
                raise ValueError("all kernels must be 3x3")
        for s in self.scales:
            if np.any(s <= 0):
                raise ValueError("normalization scales must be positive")

    @property
    def depth(self) -> int:
        return len(self.kernels)

    @property
    def channels(self) -> int:
        return self.kernels[0].shape[0]

    @property
    def dtype(self):
        return self.kernels[0].dtype

    def parameter_count(self) -> int:
        return sum(k.size for k in self.kernels) + sum(s.size for s in self.scales)

    def copy(self) -> "DenoiserModel":
        return DenoiserModel([k.copy() for k in self.kernels],
                             [s.copy() for s in self.scales],
                             self.residual, self.normalize)


def init_model(depth: int, channels: int, residual: bool, seed: int,
               normalize: bool = True, dtype=np.float32) -> DenoiserModel:
    """He fan-in initialized kernels, unit scales; deterministic per seed."""
    if depth < 2:
        raise ValueError("depth must be at least 2")
    if channels < 1:
        raise ValueError("channels must be at least 1")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    widths = [1] + [channels] * (depth - 1) + [1]
    kernels = []
    for layer in range(depth):
        c_in, c_out = widths[layer], widths[layer + 1]
        std = np.sqrt(2.0 / (9.0 * c_in))
        kernels.append(rng.normal(0.0, std, size=(c_out, c_in, 3, 3))
                       .astype(dtype))
    scales = [np.ones(channels, dtype=dtype) for _ in range(depth - 1)]
    return DenoiserModel(kernels, scales, residual, normalize)


def _conv(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 convolution; x (C,H,W), kernel (O,C,3,3)."""
    c, h, w = x.shape
    o = kernel.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (C,H,W,3,3)
    cols = win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * 9)
    out = cols @ kernel.reshape(o, c * 9).T
    return np.ascontiguousarray(out.T.reshape(o, h, w))


def _conv_backward(x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray):
    """Gradients of _conv w.r.t. kernel and input."""
    c, h, w = x.shape
    o = kernel.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))
    cols = win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * 9)
    g = grad_out.reshape(o, h * w)
    grad_k = (g @ cols).reshape(o, c, 3, 3)
    grad_cols = (g.T @ kernel.reshape(o, c * 9)).reshape(h, w, c, 3, 3)
    grad_xp = np.zeros((c, h + 2, w + 2), dtype=np.result_type(x, grad_out))
    for a in range(3):
        for b in range(3):
            grad_xp[:, a:a + h, b:b + w] += grad_cols[:, :, :, a, b] \
                .transpose(2, 0, 1)
    return grad_k, grad_xp[:, 1:h + 1, 1:w + 1]


def _scalenorm(z: np.ndarray, scale: np.ndarray, rho: float):
    """Per-channel RMS division referenced to the input RMS ``rho``."""
    rms = np.sqrt(np.mean(z * z, axis=(1, 2)) + _NORM_EPS)
    out = z * (scale * rho / rms)[:, None, None]
    return out, rms


def _scalenorm_backward(z, scale, rms, rho, grad_out):
    """Returns (grad_z, grad_scale, grad_rho)."""
    npix = z.shape[1] * z.shape[2]
    inner = np.sum(grad_out * z, axis=(1, 2))
    grad_scale = rho * inner / rms
    grad_z = grad_out * (scale * rho / rms)[:, None, None] \
        - z * (scale * rho * inner / (npix * rms ** 3))[:, None, None]
    grad_rho = float(np.sum(scale * inner / rms))
    return grad_z, grad_scale, grad_rho


def forward_cached(model: DenoiserModel, x2d: np.ndarray):
    """Forward pass keeping per-layer intermediates for backprop."""
    x = x2d.astype(model.dtype)
    rho = float(np.sqrt(np.mean(x * x) + _NORM_EPS))
    act = x[None]
    cache = [("rho", rho, x)]
    for layer in range(model.depth - 1):
        z = _conv(act, model.kernels[layer])
        if model.normalize:
            zn, rms = _scalenorm(z, model.scales[layer], rho)
        else:
            zn, rms = z, None
        mask = zn > 0
        cache.append((act, z, rms, mask))
        act = zn * mask
    z_last = _conv(act, model.kernels[-1])
    cache.append((act, None, None, None))
    out = x - z_last[0] if model.residual else z_last[0]
    return out, cache


def backward_cached(model: DenoiserModel, cache, upstream: np.ndarray):
    """Exact gradients from a cached forward pass.

    Returns ({"kernels": [...], "scales": [...]}, input_gradient).
    """
    up = upstream.astype(model.dtype)
    _, rho, x_in = cache[0]
    grad_z_last = -up[None] if model.residual else up[None]
    act_last = cache[-1][0]
    grad_k_last, grad_act = _conv_backward(act_last, model.kernels[-1],
                                           grad_z_last)
    grad_kernels = [grad_k_last]
    grad_scales = []
    grad_rho_total = 0.0
    for layer in range(model.depth - 2, -1, -1):
        act_in, z, rms, mask = cache[layer + 1]
        grad_zn = grad_act * mask
        if model.normalize:
            grad_z, grad_scale, grad_rho = _scalenorm_backward(
                z, model.scales[layer], rms, rho, grad_zn)
            grad_rho_total += grad_rho
        else:
            grad_z, grad_scale = grad_zn, np.zeros_like(model.scales[layer])
        grad_scales.append(grad_scale)
        grad_k, grad_act = _conv_backward(act_in, model.kernels[layer], grad_z)
        grad_kernels.append(grad_k)
    grad_input = grad_act[0]
    if model.normalize:
        # the input RMS feeds every normalization layer directly
        grad_input = grad_input + grad_rho_total * x_in / (x_in.size * rho)
    if model.residual:
        grad_input = grad_input + up
    grad_kernels.reverse()
    grad_scales.reverse()
    return {"kernels": grad_kernels, "scales": grad_scales}, grad_input


def forward(model: DenoiserModel, x: ImageGrid) -> ImageGrid:
    out, _ = forward_cached(model, x.data)
    return ImageGrid(out, x.pixel_size)


def backward(model: DenoiserModel, x: ImageGrid, upstream: ImageGrid):
    """Reverse-mode gradients of forward(model, x) against an upstream field."""
    out, cache = forward_cached(model, x.data)
    if upstream.data.shape != out.shape:
        raise ValueError("upstream shape does not match forward output")
    return backward_cached(model, cache, upstream.data)


@dataclass
class AdamState:
    """First/second moment estimates shaped like the model parameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m_kernels: list = field(default_factory=list)
    v_kernels: list = field(default_factory=list)
    m_scales: list = field(default_factory=list)
    v_scales: list = field(default_factory=list)


def init_adam(model: DenoiserModel, lr: float = 1e-3) -> AdamState:
    return AdamState(
        lr=lr,
        m_kernels=[np.zeros_like(k) for k in model.kernels],
        v_kernels=[np.zeros_like(k) for k in model.kernels],
        m_scales=[np.zeros_like(s) for s in model.scales],
        v_scales=[np.zeros_like(s) for s in model.scales])


def _adam_update(p, g, m, v, state: AdamState, t: int):
    if g.shape != p.shape:
        raise ValueError("gradient shape does not match parameter shape")
    m_new = state.beta1 * m + (1 - state.beta1) * g
    v_new = state.beta2 * v + (1 - state.beta2) * g * g
    m_hat = m_new / (1 - state.beta1 ** t)
    v_hat = v_new / (1 - state.beta2 ** t)
    p_new = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return p_new.astype(p.dtype), m_new, v_new


def adam_step(model: DenoiserModel, state: AdamState, grads):
    """One Adam update with bias correction; returns (model, state)."""
    t = state.step + 1
    new_kernels, new_scales = [], []
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t,
                          [], [], [], [])
    for p, g, m, v in zip(model.kernels, grads["kernels"],
                          state.m_kernels, state.v_kernels):
        p2, m2, v2 = _adam_update(p, g, m, v, state, t)
        new_kernels.append(p2)
        new_state.m_kernels.append(m2)
        new_state.v_kernels.append(v2)
    for p, g, m, v in zip(model.scales, grads["scales"],
                          state.m_scales, state.v_scales):
        p2, m2, v2 = _adam_update(p, g, m, v, state, t)
        new_scales.append(np.maximum(p2, _SCALE_FLOOR).astype(p.dtype))
        new_state.m_scales.append(m2)
        new_state.v_scales.append(v2)
    return DenoiserModel(new_kernels, new_scales, model.residual,
                         model.normalize), new_state


def save_checkpoint(model: DenoiserModel, path, extra: dict | None = None) -> None:
    """Magic + JSON architecture header + raw little-endian parameter arrays."""
    header = {
        "depth": model.depth,
        "channels": model.channels,
        "residual": model.residual,
        "normalize": model.normalize,
        "dtype": "f64" if model.dtype == np.float64 else "f32",
        "extra": extra or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC_CHECKPOINT)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for k in model.kernels:
            f.write(k.astype(k.dtype.newbyteorder("<")).tobytes())
        for s in model.scales:
            f.write(s.astype(s.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path):
    """Returns (model, extra-metadata dict); round-trip is bit-exact."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC_CHECKPOINT:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC_CHECKPOINT!r}")
        raw_len = f.read(4)
        if len(raw_len) != 4:
            raise FormatError("truncated checkpoint header")
        (blob_len,) = struct.unpack("<I", raw_len)
        blob = f.read(blob_len)
        if len(blob) != blob_len:
            raise FormatError("truncated checkpoint header")
        header = json.loads(blob.decode("utf-8"))
        dtype = np.dtype(np.float64 if header["dtype"] == "f64" else np.float32)
        depth, channels = header["depth"], header["channels"]
        widths = [1] + [channels] * (depth - 1) + [1]
        kernels, scales = [], []
        for layer in range(depth):
            shape = (widths[layer + 1], widths[layer], 3, 3)
            raw = f.read(int(np.prod(shape)) * dtype.itemsize)
            if len(raw) != int(np.prod(shape)) * dtype.itemsize:
                raise FormatError("truncated parameter block")
            kernels.append(np.frombuffer(raw, dtype=dtype.newbyteorder("<"))
                           .astype(dtype).reshape(shape))
        for _ in range(depth - 1):
            raw = f.read(channels * dtype.itemsize)
            if len(raw) != channels * dtype.itemsize:
                raise FormatError("truncated scale block")
            scales.append(np.frombuffer(raw, dtype=dtype.newbyteorder("<"))
                          .astype(dtype))
    model = DenoiserModel(kernels, scales, header["residual"],
                          header["normalize"])
    return model, header.get("extra", {})
