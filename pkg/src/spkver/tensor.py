"""Dense numeric kernel shared by the rest of the package.

Tensors are plain ``numpy.ndarray`` objects stored in float64, laid out
row-major as ``[C, H, W]`` (optionally with a leading batch axis).
All reductions accumulate in float64.

Convolution is cross-correlation (no kernel flip), as in every deep-learning
framework.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent."""


def as_tensor(data, shape=None) -> np.ndarray:
    """Return ``data`` as a finite float64 array, optionally reshaped."""
    arr = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"extents must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"data length {arr.size} does not match shape {shape} "
                             f"(product {int(np.prod(shape))})")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class Conv2dParams:
    weight: np.ndarray  # [C_out, C_in/groups, k_h, k_w]
    bias: np.ndarray | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1
    dilation: tuple[int, int] = (1, 1)

    def __post_init__(self):
        w = as_tensor(self.weight)
        if w.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D [C_out, C_in/groups, k_h, k_w], got {w.shape}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        object.__setattr__(self, "dilation", _pair(self.dilation))
        if self.groups < 1:
            raise ShapeError(f"groups must be >= 1, got {self.groups}")
        if w.shape[0] % self.groups:
            raise ShapeError(f"C_out={w.shape[0]} not divisible by groups={self.groups}")
        if min(self.stride) < 1 or min(self.dilation) < 1:
            raise ShapeError("stride and dilation must be >= 1")
        if min(self.padding) < 0:
            raise ShapeError("padding must be >= 0")
        if self.bias is not None:
            b = as_tensor(self.bias).reshape(-1)
            if b.shape[0] != w.shape[0]:
                raise ShapeError(f"bias length {b.shape[0]} != C_out {w.shape[0]}")
            object.__setattr__(self, "bias", b)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


@dataclass(frozen=True)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        vecs = {}
        for name in ("gamma", "beta", "mean", "var"):
            vecs[name] = as_tensor(getattr(self, name)).reshape(-1)
            object.__setattr__(self, name, vecs[name])
        n = {v.shape[0] for v in vecs.values()}
        if len(n) != 1:
            raise ShapeError(f"batchnorm vectors differ in length: "
                             f"{ {k: v.shape[0] for k, v in vecs.items()} }")
        if np.any(self.var < 0):
            raise ValueError("batchnorm var must be nonnegative")
        if self.eps < 0:
            raise ValueError("batchnorm eps must be nonnegative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def scale(self) -> np.ndarray:
        """Per-channel multiplier gamma / sqrt(var + eps)."""
        return self.gamma / np.sqrt(self.var + self.eps)

    @classmethod
    def identity(cls, channels: int, eps: float = 0.0) -> "BatchNormParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels),
                   np.ones(channels), eps)


def conv_output_size(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: np.ndarray, params: Conv2dParams) -> np.ndarray:
    """2-D grouped, strided, dilated cross-correlation.

    ``x`` is ``[C_in, H, W]`` or ``[N, C_in, H, W]``; the output keeps the
    same rank.
    """
    x = np.asarray(x, dtype=DTYPE)
    batched = x.ndim == 4
    if not batched:
        if x.ndim != 3:
            raise ShapeError(f"conv2d input must be [C, H, W] or [N, C, H, W], got {x.shape}")
        x = x[None]
    n, c, h, w = x.shape
    weight = params.weight
    g = params.groups
    c_out, c_g, kh, kw = weight.shape
    if c != c_g * g:
        raise ShapeError(f"input channels C_in={c} do not match weight "
                         f"(C_in/groups={c_g}, groups={g})")
    sh, sw = params.stride
    ph, pw = params.padding
    dh, dw = params.dilation
    ho = conv_output_size(h, kh, sh, ph, dh)
    wo = conv_output_size(w, kw, sw, pw, dw)
    if ho < 1:
        raise ShapeError(f"output height {ho} < 1 (H={h}, k_h={kh}, pad={ph}, dilation={dh})")
    if wo < 1:
        raise ShapeError(f"output width {wo} < 1 (W={w}, k_w={kw}, pad={pw}, dilation={dw})")

    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    span_h = dh * (kh - 1) + 1
    span_w = dw * (kw - 1) + 1
    win = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    win = win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw, ::dh, ::dw]
    # win: [N, C, Ho, Wo, kh, kw]
    win = win.reshape(n, g, c_g, ho, wo, kh, kw)
    wg = weight.reshape(g, c_out // g, c_g, kh, kw)
    out = np.einsum("ngcxyij,gocij->ngoxy", win, wg, optimize=True)
    out = out.reshape(n, c_out, ho, wo)
    if params.bias is not None:
        out = out + params.bias[None, :, None, None]
    return out if batched else out[0]


def batchnorm_inference(x: np.ndarray, bn: BatchNormParams) -> np.ndarray:
    """Apply frozen batch statistics per channel of ``[C, H, W]`` (or ``[N, C, H, W]``)."""
    x = np.asarray(x, dtype=DTYPE)
    c = x.shape[-3]
    if c != bn.channels:
        raise ShapeError(f"batchnorm has {bn.channels} channels, input has {c}")
    shape = (c, 1, 1)
    return (bn.gamma.reshape(shape) * (x - bn.mean.reshape(shape))
            / np.sqrt(bn.var.reshape(shape) + bn.eps) + bn.beta.reshape(shape))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    z = np.exp(v - v.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def l2_normalize(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot length-normalize a zero vector (degenerate embedding)")
    return v / norm
