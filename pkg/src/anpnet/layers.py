"""Forward and backward transforms for every layer kind in the network.

All operations work on single items (channel-first ``[C, H, W]`` feature
maps or flat vectors) and are pure functions of their inputs; the batch
dimension is looped one level up. Convolution is implemented as im2col
followed by a matrix product, and the col2im scatter in the backward
pass accumulates in a fixed (kernel-row, kernel-column) order, so
repeated runs produce bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ParameterError
from .tensor import Rng, Tensor


@dataclass
class ConvParams:
    """Convolution weights [out_c, in_c/groups, kH, kW] plus geometry."""

    weights: Tensor
    bias: Tensor
    stride: int = 1
    pad: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-D, got {self.weights.shape}")
        if self.stride < 1 or self.pad < 0 or self.groups < 1:
            raise ParameterError(
                f"bad conv geometry: stride={self.stride} pad={self.pad} "
                f"groups={self.groups}"
            )
        out_c = self.weights.shape[0]
        if out_c % self.groups != 0:
            raise ShapeError(f"out_channels {out_c} not divisible by groups {self.groups}")
        if self.bias.shape != (out_c,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({out_c},)")


@dataclass
class LrnParams:
    """Cross-channel response normalization constants."""

    k: float = 2.0
    n: int = 5
    alpha: float = 1e-4
    beta: float = 0.75

    def __post_init__(self):
        if self.n < 1 or self.n % 2 == 0:
            raise ParameterError(f"window size must be odd and positive, got {self.n}")


@dataclass
class DropoutState:
    """Per-application dropout bookkeeping; the mask exists only in train mode."""

    rate: float
    mode: str = "train"
    mask: Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ParameterError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.mode not in ("train", "test"):
            raise ParameterError(f"mode must be 'train' or 'test', got {self.mode!r}")


def _conv_out_size(extent: int, kernel: int, stride: int, pad: int) -> int:
    span = extent + 2 * pad - kernel
    if span < 0:
        raise ShapeError(f"kernel {kernel} larger than padded input {extent + 2 * pad}")
    if span % stride != 0:
        raise ShapeError(
            f"input {extent} with kernel {kernel}, stride {stride}, pad {pad} "
            f"gives a non-integral output size"
        )
    return span // stride + 1


def _im2col(x: Tensor, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> Tensor:
    """Unfold [C,H,W] into a [C*kh*kw, ho*wo] patch matrix."""
    c = x.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, ho, wo),
        strides=(s0, s1, s2, stride * s1, stride * s2),
        writeable=False,
    )
    return windows.reshape(c * kh * kw, ho * wo)


def _col2im(cols: Tensor, c: int, h: int, w: int, kh: int, kw: int,
            stride: int, pad: int, ho: int, wo: int) -> Tensor:
    """Adjoint of :func:`_im2col`; overlaps accumulate in (kh, kw) order."""
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    if pad:
        return xp[:, pad:-pad, pad:-pad].copy()
    return xp


def _check_conv_input(x: Tensor, p: ConvParams):
    if x.ndim != 3:
        raise ShapeError(f"conv input must be [C,H,W], got {x.shape}")
    c = x.shape[0]
    if c % p.groups != 0 or c // p.groups != p.weights.shape[1]:
        raise ShapeError(
            f"input channels {c} incompatible with weights {p.weights.shape} "
            f"and groups {p.groups}"
        )


def conv_forward(x: Tensor, p: ConvParams) -> Tensor:
    """Grouped 2-D convolution; group g's outputs see only group g's inputs."""
    _check_conv_input(x, p)
    out_c, in_cg, kh, kw = p.weights.shape
    _, h, w = x.shape
    ho = _conv_out_size(h, kh, p.stride, p.pad)
    wo = _conv_out_size(w, kw, p.stride, p.pad)
    ocg = out_c // p.groups
    out = np.empty((out_c, ho, wo), dtype=x.dtype)
    for g in range(p.groups):
        xg = x[g * in_cg:(g + 1) * in_cg]
        wg = p.weights[g * ocg:(g + 1) * ocg].reshape(ocg, in_cg * kh * kw)
        cols = _im2col(xg, kh, kw, p.stride, p.pad, ho, wo)
        out[g * ocg:(g + 1) * ocg] = (wg @ cols).reshape(ocg, ho, wo)
    out += p.bias[:, None, None]
    return out


def conv_backward(x: Tensor, p: ConvParams, grad_out: Tensor,
                  need_input_grad: bool = True):
    """Gradients of ``sum(grad_out * conv_forward(x, p))`` w.r.t. x, weights, bias.

    ``need_input_grad=False`` skips the col2im scatter and returns None
    for the input gradient (useful for the first layer).
    """
    _check_conv_input(x, p)
    out_c, in_cg, kh, kw = p.weights.shape
    _, h, w = x.shape
    ho = _conv_out_size(h, kh, p.stride, p.pad)
    wo = _conv_out_size(w, kw, p.stride, p.pad)
    if grad_out.shape != (out_c, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(out_c, ho, wo)}")
    ocg = out_c // p.groups
    grad_x = np.empty_like(x) if need_input_grad else None
    grad_w = np.empty_like(p.weights)
    grad_b = grad_out.sum(axis=(1, 2))
    for g in range(p.groups):
        xg = x[g * in_cg:(g + 1) * in_cg]
        wg = p.weights[g * ocg:(g + 1) * ocg].reshape(ocg, in_cg * kh * kw)
        gg = grad_out[g * ocg:(g + 1) * ocg].reshape(ocg, ho * wo)
        cols = _im2col(xg, kh, kw, p.stride, p.pad, ho, wo)
        grad_w[g * ocg:(g + 1) * ocg] = (gg @ cols.T).reshape(ocg, in_cg, kh, kw)
        if need_input_grad:
            grad_cols = wg.T @ gg
            grad_x[g * in_cg:(g + 1) * in_cg] = _col2im(
                grad_cols, in_cg, h, w, kh, kw, p.stride, p.pad, ho, wo)
    return grad_x, grad_w, grad_b


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    """Subgradient 0 at exactly 0."""
    return np.where(x > 0, grad_out, 0)


def maxpool_forward(x: Tensor, size: int = 3, stride: int = 2):
    """Overlapping max pooling; returns the output and flat argmax indices.

    Ties go to the lowest linear index inside each window, which keeps
    the backward routing deterministic.
    """
    if x.ndim != 3:
        raise ShapeError(f"pool input must be [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h < size or w < size:
        raise ShapeError(f"input {h}x{w} smaller than pool window {size}")
    if (h - size) % stride != 0 or (w - size) % stride != 0:
        raise ShapeError(
            f"input {h}x{w} with window {size}, stride {stride} "
            f"gives a non-integral output size"
        )
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    s0, s1, s2 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(c, ho, wo, size, size),
        strides=(s0, stride * s1, stride * s2, s1, s2),
        writeable=False,
    ).reshape(c, ho, wo, size * size)
    local = windows.argmax(axis=3)
    out = np.take_along_axis(windows, local[..., None], axis=3)[..., 0]
    dy, dx = local // size, local % size
    rows = np.arange(ho)[None, :, None] * stride + dy
    cols = np.arange(wo)[None, None, :] * stride + dx
    indices = rows * w + cols
    return out, indices


def maxpool_backward(indices: np.ndarray, grad_out: Tensor, input_shape) -> Tensor:
    """Route each gradient to its recorded argmax position, summing overlaps."""
    c, h, w = input_shape
    if grad_out.shape != indices.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != {indices.shape}")
    grad_x = np.zeros((c, h * w), dtype=grad_out.dtype)
    flat_idx = indices.reshape(c, -1)
    flat_g = grad_out.reshape(c, -1)
    for ch in range(c):
        np.add.at(grad_x[ch], flat_idx[ch], flat_g[ch])
    return grad_x.reshape(c, h, w)


def _lrn_window_sum(values: Tensor, n: int) -> Tensor:
    """Sum over channels j in [i - n//2, i + n//2] clipped to the valid range."""
    nc = values.shape[0]
    half = n // 2
    prefix = np.concatenate(
        [np.zeros((1,) + values.shape[1:], dtype=values.dtype),
         np.cumsum(values, axis=0)], axis=0)
    his = np.minimum(nc - 1, np.arange(nc) + half)
    los = np.maximum(0, np.arange(nc) - half)
    return prefix[his + 1] - prefix[los]


def lrn_forward(a: Tensor, p: LrnParams) -> Tensor:
    """b_i = a_i / (k + alpha * sum_{j near i} a_j^2)^beta across channels."""
    if a.ndim != 3:
        raise ShapeError(f"lrn input must be [N,H,W], got {a.shape}")
    s = p.k + p.alpha * _lrn_window_sum(a * a, p.n)
    return a * np.power(s, -p.beta)


def lrn_backward(a: Tensor, grad_out: Tensor, p: LrnParams) -> Tensor:
    # d b_i / d a_m = delta_im * s_i^-beta
    #                 - 2 alpha beta a_i a_m s_i^-(beta+1) * [|i-m| <= n//2];
    # the window is symmetric, so the sum over i reuses the same window op.
    if grad_out.shape != a.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != {a.shape}")
    s = p.k + p.alpha * _lrn_window_sum(a * a, p.n)
    u = _lrn_window_sum(grad_out * a * np.power(s, -p.beta - 1), p.n)
    return grad_out * np.power(s, -p.beta) - 2 * p.alpha * p.beta * a * u


def dropout_forward(x: Tensor, s: DropoutState, rng: Rng | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); test mode is identity."""
    if s.mode == "test":
        return x
    if s.rate == 0.0:
        s.mask = np.ones(x.shape, dtype=x.dtype)
        return x.copy()
    if rng is None:
        raise ParameterError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= s.rate).astype(x.dtype)
    s.mask = keep
    return x * keep / (1.0 - s.rate)


def dropout_backward(s: DropoutState, grad_out: Tensor) -> Tensor:
    if s.mode == "test":
        return grad_out
    if s.mask is None:
        raise ParameterError("dropout_backward before dropout_forward")
    return grad_out * s.mask / (1.0 - s.rate)


def fc_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """y = W x + b with W of shape [D_out, D_in]."""
    if x.ndim != 1 or weights.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise ShapeError(f"fc shapes incompatible: x {x.shape}, W {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weights.shape[0]},)")
    return weights @ x + bias


def fc_backward(x: Tensor, weights: Tensor, grad_out: Tensor):
    if grad_out.shape != (weights.shape[0],):
        raise ShapeError(f"grad_out shape {grad_out.shape} != ({weights.shape[0]},)")
    grad_x = weights.T @ grad_out
    grad_w = np.outer(grad_out, x)
    grad_b = grad_out.copy()
    return grad_x, grad_w, grad_b


def softmax_loss(logits: Tensor, label: int):
    """Max-shifted softmax, cross-entropy loss, and the loss gradient.

    Returns ``(probs, loss, grad_logits)`` where
    ``grad_logits = probs - onehot(label)``.
    """
    if logits.ndim != 1:
        raise ShapeError(f"logits must be 1-D, got {logits.shape}")
    k = logits.shape[0]
    if not 0 <= label < k:
        raise IndexError(f"label {label} out of range for {k} classes")
    shifted = logits - logits.max()
    exps = np.exp(shifted)
    total = exps.sum()
    probs = exps / total
    loss = float(np.log(total) - shifted[label])
    grad = probs.copy()
    grad[label] -= 1.0
    return probs, loss, grad
