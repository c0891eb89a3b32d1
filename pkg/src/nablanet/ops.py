"""Differentiable primitive operations on (N, C, H, W) tensors.

Every op computes its forward value with numpy and, when a tape is active,
records a closure that maps the output gradient to input gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from nablanet.tensor import Tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class ConvKernel:
    """Weights (out, in, kH, kW) plus optional per-out-channel bias.

    Transpose convolutions reuse the type with weights laid out (in, out, kH, kW),
    i.e. the layout of the conv2d they are the adjoint of.
    """

    weight: Tensor
    bias: Optional[Tensor] = None

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]


def _check_4d(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"{op}: expected an (N, C, H, W) tensor, got shape {x.shape}")


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) view, no copy
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def _scatter_windows(dcols: np.ndarray, out_hw: tuple, stride: int) -> np.ndarray:
    """Adjoint of ``_windows``: sum (N, C, Ho, Wo, kh, kw) back into (N, C, H, W)."""
    n, c, ho, wo, kh, kw = dcols.shape
    dx = np.zeros((n, c) + out_hw, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[
                :, :, :, :, i, j
            ]
    return dx


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: ConvKernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding; output extent floor((H + 2p - k)/s) + 1."""
    _check_4d(x, "conv2d")
    w = kernel.weight
    if w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input shape {x.shape} does not match kernel shape {w.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be non-negative, got {padding}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: input {x.shape} with kernel {w.shape}, padding {padding} gives empty output")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.einsum("nchw,oc->nohw", cols, w.data[:, :, 0, 0], optimize=True)
    else:
        cols = _windows(xp, kh, kw, stride)
        # (N, Ho, Wo, O) -> (N, O, Ho, Wo)
        out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if kernel.bias is not None:
        out = out + kernel.bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)
    y = Tensor(out)

    def backward_fn(g):
        gb = g.sum(axis=(0, 2, 3)) if kernel.bias is not None else None
        if kh == 1 and kw == 1:
            gw = np.einsum("nohw,nchw->oc", g, cols, optimize=True)[:, :, None, None]
            gx_p = np.zeros_like(xp)
            gx_p[:, :, : stride * ho : stride, : stride * wo : stride] = np.einsum(
                "nohw,oc->nchw", g, w.data[:, :, 0, 0], optimize=True
            )
        else:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            dcols = np.tensordot(g, w.data, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
            gx_p = _scatter_windows(dcols.transpose(0, 3, 1, 2, 4, 5), xp.shape[2:], stride)
        gx = gx_p[:, :, padding : padding + h, padding : padding + wd] if padding else gx_p
        return gx, gw.astype(w.dtype, copy=False), gb

    inputs = (x, w) if kernel.bias is None else (x, w, kernel.bias)
    return record("conv2d", inputs, y, backward_fn)


def conv_transpose2d(x: Tensor, kernel: ConvKernel, stride: int = 2, padding: int = 0) -> Tensor:
    """Transpose convolution that exactly doubles H and W.

    ``kernel.weight`` is (C_in, C_out, k, k). The op is the adjoint of
    ``conv2d(., ConvKernel(weight), stride, padding)`` (plus bias).
    """
    _check_4d(x, "conv_transpose2d")
    w = kernel.weight
    if w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ValueError(f"conv_transpose2d: input shape {x.shape} does not match kernel shape {w.shape}")
    kh, kw = w.shape[2:]
    if stride != 2 or kh != kw or kh - 2 * padding != 2:
        raise ValueError(
            f"conv_transpose2d: stride {stride}, kernel {kh}x{kw}, padding {padding} does not double the spatial size"
        )
    n, c, h, wd = x.shape
    full_h = stride * (h - 1) + kh
    full_w = stride * (wd - 1) + kw
    # (N, H, W, C_out, kh, kw) -> scatter into the padded output canvas
    cols = np.tensordot(x.data, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    full = _scatter_windows(cols, (full_h, full_w), stride)
    out = full[:, :, padding : full_h - padding, padding : full_w - padding] if padding else full
    if kernel.bias is not None:
        out = out + kernel.bias.data[None, :, None, None]
    y = Tensor(np.ascontiguousarray(out, dtype=x.dtype))

    def backward_fn(g):
        gb = g.sum(axis=(0, 2, 3)) if kernel.bias is not None else None
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        win = _windows(gp, kh, kw, stride)  # (N, C_out, H, W, kh, kw)
        gx = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        return np.ascontiguousarray(gx), gw.astype(w.dtype, copy=False), gb

    inputs = (x, w) if kernel.bias is None else (x, w, kernel.bias)
    return record("conv_transpose2d", inputs, y, backward_fn)


def maxpool2d(x: Tensor, size: int = 2, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """Max pooling; gradient goes to the first row-major maximum of each window.

    The default is the 2x2/stride-2 subsampling used between stages, which
    requires even extents. Other geometries (3x3/stride-1/pad-1 inside the
    inception unit) pad with -inf.
    """
    _check_4d(x, "maxpool2d")
    stride = size if stride is None else stride
    n, c, h, wd = x.shape
    if size == 2 and stride == 2 and padding == 0:
        if h % 2 or wd % 2:
            raise ValueError(f"maxpool2d: spatial extent must be even, got {h}x{wd}")
        blocks = x.data.reshape(n, c, h // 2, 2, wd // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, wd // 2, 4)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        y = Tensor(np.ascontiguousarray(out))

        def backward_fn(g):
            gb = np.zeros((n, c, h // 2, wd // 2, 4), dtype=g.dtype)
            np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
            gx = gb.reshape(n, c, h // 2, wd // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, wd)
            return (gx,)

        return record("maxpool2d", (x,), y, backward_fn)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    ho = conv_output_size(h, size, stride, padding)
    wo = conv_output_size(wd, size, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"maxpool2d: window {size} too large for {h}x{wd}")
    win = _windows(xp, size, size, stride)[:, :, :ho, :wo].reshape(n, c, ho, wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    y = Tensor(np.ascontiguousarray(out))

    def backward_fn(g):
        dcols = np.zeros((n, c, ho, wo, size * size), dtype=g.dtype)
        np.put_along_axis(dcols, arg[..., None], g[..., None], axis=-1)
        gx = _scatter_windows(dcols.reshape(n, c, ho, wo, size, size), xp.shape[2:], stride)
        if padding:
            gx = gx[:, :, padding : padding + h, padding : padding + wd]
        return (np.ascontiguousarray(gx),)

    return record("maxpool2d", (x,), y, backward_fn)


@dataclass
class BNState:
    """Running statistics for one normalization site."""

    mean: np.ndarray
    var: np.ndarray
    updates: int = 0

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BNState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), 0)

    @property
    def populated(self) -> bool:
        return self.updates > 0


def batchnorm2d(
    x: Tensor, gamma: Tensor, beta: Tensor, state: Optional[BNState] = None, mode: str = "train"
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    train: batch statistics; running stats become ``0.9 * old + 0.1 * batch``
    (the first update copies the batch stats). infer: running stats only.
    """
    _check_4d(x, "batchnorm2d")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    if mode == "infer":
        if state is None or not state.populated:
            raise ValueError("batchnorm2d: infer mode needs populated running statistics")
        scale = gamma.data / np.sqrt(state.var + BN_EPS)
        shift = beta.data - state.mean * scale
        out = x.data * scale[None, :, None, None] + shift[None, :, None, None]
        y = Tensor(out.astype(x.dtype, copy=False))
        xhat = (x.data - state.mean[None, :, None, None]) / np.sqrt(state.var + BN_EPS)[None, :, None, None]

        def backward_infer(g):
            return (
                g * scale[None, :, None, None],
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

        return record("batchnorm2d", (x, gamma, beta), y, backward_infer)
    if mode != "train":
        raise ValueError(f"batchnorm2d: unknown mode {mode!r}")

    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = centered * inv_std[None, :, None, None]
    y = Tensor((xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]).astype(x.dtype, copy=False))

    if state is not None:
        if state.updates == 0:
            state.mean = mean.astype(state.mean.dtype)
            state.var = var.astype(state.var.dtype)
        else:
            state.mean = (BN_MOMENTUM * state.mean + (1 - BN_MOMENTUM) * mean).astype(state.mean.dtype)
            state.var = (BN_MOMENTUM * state.var + (1 - BN_MOMENTUM) * var).astype(state.var.dtype)
        state.updates += 1

    def backward_fn(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data[None, :, None, None]
        gx = (
            inv_std[None, :, None, None]
            / m
            * (m * gxhat - gxhat.sum(axis=(0, 2, 3))[None, :, None, None] - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
        )
        return gx, ggamma, gbeta

    return record("batchnorm2d", (x, gamma, beta), y, backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    y = Tensor(np.where(mask, x.data, 0).astype(x.dtype, copy=False))
    return record("relu", (x,), y, lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    y = Tensor(s)
    return record("sigmoid", (x,), y, lambda g: (g * s * (1 - s),))


def activation(x: Tensor, kind: str = "relu") -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the channel axis."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    y = Tensor(p)

    def backward_fn(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return record("softmax", (x,), y, backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "concat_channels")
    _check_4d(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: shapes {a.shape} and {b.shape} differ outside the channel axis")
    ca = a.shape[1]
    y = Tensor(np.concatenate([a.data, b.data], axis=1))
    return record("concat_channels", (a, b), y, lambda g: (g[:, :ca], g[:, ca:]))


def add_elementwise(a: Tensor, b: Tensor, tag: str = "") -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add_elementwise: shape mismatch {a.shape} vs {b.shape}")
    y = Tensor(a.data + b.data)
    return record("add", (a, b), y, lambda g: (g, g), tag=tag)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    y = Tensor(a.data * b.data)
    return record("mul", (a, b), y, lambda g: (g * b.data, g * a.data))


def global_avg_pool(x: Tensor) -> Tensor:
    _check_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    y = Tensor(x.data.mean(axis=(2, 3), keepdims=True))

    def backward_fn(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),)

    return record("global_avg_pool", (x,), y, backward_fn)


def sum_all(x: Tensor) -> Tensor:
    y = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    return record("sum", (x,), y, lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    y = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))
    return record("mean", (x,), y, lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))
