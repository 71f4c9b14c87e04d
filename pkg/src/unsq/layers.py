"""Layer and loss vocabulary of the U-net: convolutions, pooling, up-convolution,
skip concatenation, batch normalization, temperature softmax and cross-entropies.

All ops take and return :class:`~unsq.tensor.Tensor` and record themselves on
the active tape. Convolutions use an im2col layout (one matmul per call).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _flat_sum, record

__all__ = [
    "ConvParams", "BatchNormParams", "ClassWeights",
    "conv2d", "max_pool2d", "conv_transpose2d", "concat_channels", "batch_norm2d",
    "softmax_temperature", "log_softmax_temperature", "weighted_cross_entropy",
    "soft_cross_entropy", "cross_entropy_with_targets",
]


@dataclass
class ConvParams:
    weight: Tensor  # (c_out, c_in, k_h, k_w)
    bias: Tensor  # (c_out,)

    def __post_init__(self):
        if self.weight.data.ndim != 4:
            raise ValueError(f"conv weight must be 4-D, got {self.weight.shape}")
        c_out, c_in, kh, kw = self.weight.shape
        if kh not in (1, 2, 3) or kw not in (1, 2, 3):
            raise ValueError(f"kernel {kh}x{kw} unsupported; sizes must be 1, 2 or 3")
        if c_out < 1 or c_in < 1:
            raise ValueError("conv needs at least one input and one output channel")
        if self.bias.shape != (c_out,):
            raise ValueError(f"bias shape {self.bias.shape} does not match c_out={c_out}")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        if not 0 < self.momentum <= 1:
            raise ValueError("momentum must be in (0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def create(cls, channels: int, dtype=np.float64, momentum: float = 0.1,
               epsilon: float = 1e-5) -> BatchNormParams:
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum, epsilon=epsilon,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.gamma, self.beta]


@dataclass(frozen=True)
class ClassWeights:
    """Per-pixel loss multipliers: ``w_f`` for foreground, ``w_b`` for background."""

    w_f: float = 1.0
    w_b: float = 1.0

    def __post_init__(self):
        if self.w_f < 0 or self.w_b < 0:
            raise ValueError("class weights must be non-negative")
        if self.w_f == 0 and self.w_b == 0:
            raise ValueError("class weights cannot both be zero")

    def as_array(self) -> np.ndarray:
        # channel 0 = background, channel 1 = foreground
        return np.array([self.w_b, self.w_f])


UNIT_WEIGHTS = ClassWeights(1.0, 1.0)


# --- convolutions --------------------------------------------------------

def _padding(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    if padding == "valid":
        return 0, 0, (size - k) // stride + 1
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return total // 2, total - total // 2, out
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d(x: Tensor, params: ConvParams, padding: str = "same", stride: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding and per-channel bias."""
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be (n, c, h, w), got {x.shape}")
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    n, c, h, w = x.shape
    co, ci, kh, kw = params.weight.shape
    if c != ci:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {ci}")
    pt, pb, oh = _padding(h, kh, stride, padding)
    pl, pr, ow = _padding(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: non-positive output size {oh}x{ow} for input {h}x{w}")

    xp = x.data
    if pt or pb or pl or pr:
        xp = np.pad(xp, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = params.weight.data.reshape(co, -1)
    out = cols @ wmat.T
    out += params.bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, co).transpose(0, 3, 1, 2))
    padded_shape = xp.shape

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, co)
        dw = (gm.T @ cols).reshape(params.weight.shape)
        db = gm.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros(padded_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, pt:pt + h, pl:pl + w]
        return dx, dw, db

    return record("conv2d", (x, params.weight, params.bias), out, backward)


def conv_transpose2d(x: Tensor, params: ConvParams, stride: int = 2) -> Tensor:
    """2x2, stride-2 transposed convolution: each input pixel paints a 2x2 patch.

    Weight layout matches :class:`ConvParams`, ``(c_out, c_in, 2, 2)``.
    """
    if params.kernel != (2, 2) or stride != 2:
        raise ValueError(f"conv_transpose2d supports only 2x2 kernels with stride 2, "
                         f"got {params.kernel} stride {stride}")
    n, c, h, w = x.shape
    co, ci = params.c_out, params.c_in
    if c != ci:
        raise ValueError(f"conv_transpose2d: input has {c} channels, kernel expects {ci}")
    wm = params.weight.data.transpose(1, 0, 2, 3).reshape(ci, co * 4)
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, ci)
    y = (xm @ wm).reshape(n, h, w, co, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(n, co, 2 * h, 2 * w)
    y = y + params.bias.data[None, :, None, None]

    def backward(g):
        gm = g.reshape(n, co, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, co * 4)
        dx = (gm @ wm.T).reshape(n, h, w, ci).transpose(0, 3, 1, 2) if x.requires_grad else None
        dw = (xm.T @ gm).reshape(ci, co, 2, 2).transpose(1, 0, 2, 3)
        db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    return record("conv_transpose2d", (x, params.weight, params.bias), y, backward)


# --- pooling / skip connections ------------------------------------------

def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> tuple[Tensor, np.ndarray]:
    """2x2 max pooling. Returns the pooled tensor and, per output cell, the flat
    ``h*w`` index of the winning input cell (ties go to the lowest index)."""
    if window != 2 or stride != 2:
        raise ValueError("only 2x2 pooling with stride 2 is supported")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2d needs even spatial dims, got {h}x{w}; resize the input")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h2)[:, None] + arg // 2
    cols = 2 * np.arange(w2)[None, :] + arg % 2
    flat_index = rows * w + cols

    def backward(g):
        gw = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return record("max_pool2d", (x,), out, backward), flat_index


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects 4-D tensors")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ValueError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    return record("concat", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


# --- batch normalization -------------------------------------------------

def batch_norm2d(x: Tensor, params: BatchNormParams, mode: str = "train") -> Tensor:
    """Per-channel normalization followed by ``gamma * xhat + beta``.

    Train mode uses the biased batch variance and updates running statistics
    in place; eval mode normalizes with the running statistics.
    """
    n, c, h, w = x.shape
    if c != params.channels:
        raise ValueError(f"batch_norm2d: input has {c} channels, params have {params.channels}")
    gamma = params.gamma.data[None, :, None, None]
    beta = params.beta.data[None, :, None, None]
    m = n * h * w

    if mode == "train":
        if m < 2:
            raise ValueError("batch_norm2d in train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = params.momentum
        params.running_mean *= 1 - mom
        params.running_mean += mom * mean
        params.running_var *= 1 - mom
        params.running_var += mom * var
    elif mode == "eval":
        mean, var = params.running_mean, params.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    inv = (1.0 / np.sqrt(var + params.epsilon))[None, :, None, None]
    xhat = (x.data - mean[None, :, None, None]) * inv
    out = gamma * xhat + beta
    train = mode == "train"

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma
        if train:
            dx = inv / m * (m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return record("batch_norm2d", (x, params.gamma, params.beta), out, backward)


# --- temperature softmax and losses --------------------------------------

def _check_binary_logits(logits: Tensor, T: float) -> None:
    if T <= 0:
        raise ValueError(f"temperature must be positive, got {T}")
    if logits.data.ndim != 4 or logits.shape[1] != 2:
        raise ValueError(f"expected logits of shape (n, 2, h, w), got {logits.shape}")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_temperature(logits: Tensor, T: float = 1.0) -> Tensor:
    """Per-pixel softmax over the 2 class channels of ``logits / T``."""
    _check_binary_logits(logits, T)
    p = np.exp(_log_softmax(logits.data / T))

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)) / T,)

    return record("softmax_temperature", (logits,), p, backward)


def log_softmax_temperature(logits: Tensor, T: float = 1.0) -> Tensor:
    _check_binary_logits(logits, T)
    ls = _log_softmax(logits.data / T)
    p = np.exp(ls)

    def backward(g):
        return ((g - p * g.sum(axis=1, keepdims=True)) / T,)

    return record("log_softmax_temperature", (logits,), ls, backward)


def cross_entropy_with_targets(logits: Tensor, targets: np.ndarray, T: float,
                               weights: ClassWeights = UNIT_WEIGHTS) -> Tensor:
    """Fused ``-(1/npix) * sum omega_k * t_k * log softmax(z/T)_k``.

    ``targets`` is an ``(n, 2, h, w)`` array of per-class target probabilities
    and is treated as a constant. The log-softmax is taken on logits directly.
    """
    _check_binary_logits(logits, T)
    if targets.shape != logits.shape:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    n, _, h, w = logits.shape
    npix = n * h * w
    ls = _log_softmax(logits.data / T)
    wt = targets * weights.as_array().astype(logits.dtype)[None, :, None, None]
    loss = -_flat_sum(wt * ls) / npix

    def backward(g):
        p = np.exp(ls)
        scale = g.reshape(()) / (npix * T)
        return (-(wt - p * wt.sum(axis=1, keepdims=True)) * scale,)

    return record("cross_entropy", (logits,), np.asarray(loss).reshape(1, 1, 1, 1), backward)


def hard_targets(mask: np.ndarray) -> np.ndarray:
    """``(n, 1, h, w)`` binary mask to ``(n, 2, h, w)`` one-hot (background first)."""
    m = np.asarray(mask)
    if m.ndim != 4 or m.shape[1] != 1:
        raise ValueError(f"mask must be (n, 1, h, w), got {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("targets must be binary (0 or 1)")
    m = m.astype(np.float64)
    return np.concatenate([1.0 - m, m], axis=1)


def weighted_cross_entropy(logits: Tensor, targets, weights: ClassWeights = UNIT_WEIGHTS) -> Tensor:
    """Class-weighted binary cross-entropy against a hard mask, at T = 1."""
    mask = targets.data if isinstance(targets, Tensor) else targets
    return cross_entropy_with_targets(logits, hard_targets(mask).astype(logits.dtype), 1.0, weights)


def soft_cross_entropy(student_logits: Tensor, teacher_probs, T: float,
                       weights: ClassWeights = UNIT_WEIGHTS) -> Tensor:
    """Cross-entropy of the student's temperature-T softmax against teacher probabilities."""
    probs = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs)
    if probs.ndim != 4 or probs.shape[1] != 2:
        raise ValueError(f"teacher probabilities must be (n, 2, h, w), got {probs.shape}")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6) or np.any(probs < 0):
        raise ValueError("teacher probabilities are not normalized per pixel")
    return cross_entropy_with_targets(student_logits, probs.astype(student_logits.dtype), T, weights)
