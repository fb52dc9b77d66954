"""Neural layers built on the tensor core.

All layers take NHWC feature maps (``[N, H, W, C]``) or a single unbatched map
(``[H, W, C]``); vectors are ``[N, D]`` or ``[D]``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from math import ceil

import numpy as np

from . import kernels
from .errors import ContractError, ShapeError
from .tensor import Tensor, add, matmul, note_branches, record, reduce_mean, reshape


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class Act(enum.Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"


@dataclass
class ConvParams:
    kernel: Tensor  # [kh, kw, Cin, Cout]
    bias: Tensor | None
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        kh, kw, _, cout = self.kernel.shape
        if kh not in (1, 3) or kw not in (1, 3):
            raise ShapeError(f"kernel must be 1x1 or 3x3, got {kh}x{kw}")
        if self.bias is not None and self.bias.shape != (cout,):
            raise ShapeError(f"bias shape {list(self.bias.shape)} does not match Cout={cout}")
        if self.padding not in ("same", "valid"):
            raise ShapeError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.stride < 1:
            raise ShapeError("stride must be positive")


@dataclass
class DenseParams:
    weight: Tensor  # [in, out]
    bias: Tensor | None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.99
    epsilon: float = 1e-3


def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    """Add a leading batch axis to an unbatched input of the given rank."""
    if x.ndim == rank:
        return reshape(x, (1, *x.shape)), True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1}, got shape {list(x.shape)}")


def _same_pad(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = ceil(size / stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """2-D cross-correlation plus bias over an NHWC batch."""
    x, squeeze = _batched(x, 3)
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = p.kernel.shape
    if cin != kcin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    s = p.stride
    if p.padding == "same":
        ho, top, bottom = _same_pad(h, kh, s)
        wo, left, right = _same_pad(w, kw, s)
    else:
        if h < kh or w < kw:
            raise ShapeError(f"conv2d: input {h}x{w} smaller than kernel {kh}x{kw}")
        ho, wo = (h - kh) // s + 1, (w - kw) // s + 1
        top = bottom = left = right = 0

    kmat = p.kernel.data.reshape(kh * kw * cin, cout)
    pointwise = kh == 1 and kw == 1 and s == 1
    if pointwise:
        cols = x.data.reshape(n * h * w, cin)
        hp, wp = h, w
    else:
        xp = x.data
        if top or bottom or left or right:
            xp = np.pad(xp, ((0, 0), (top, bottom), (left, right), (0, 0)))
        hp, wp = xp.shape[1], xp.shape[2]
        cols = kernels.im2col(xp, kh, kw, s, ho, wo)
    out = cols @ kmat
    if p.bias is not None:
        out = out + p.bias.data
    out = out.reshape(n, ho, wo, cout)

    def back(g):
        g2 = g.reshape(n * ho * wo, cout)
        dk = (cols.T @ g2).reshape(p.kernel.shape)
        db = g2.sum(axis=0) if p.bias is not None else None
        dcols = g2 @ kmat.T
        if pointwise:
            dx = dcols.reshape(x.shape)
        else:
            dxp = kernels.col2im(dcols, n, hp, wp, cin, kh, kw, s, ho, wo)
            dx = dxp[:, top : top + h, left : left + w, :]
        return (dx, dk, db) if p.bias is not None else (dx, dk)

    inputs = (x, p.kernel, p.bias) if p.bias is not None else (x, p.kernel)
    y = record("conv2d", out, inputs, back)
    return reshape(y, y.shape[1:]) if squeeze else y


def dense(x: Tensor, p: DenseParams) -> Tensor:
    """Affine map ``x W + b`` over vectors or a batch of row vectors."""
    x, squeeze = _batched(x, 1)
    if x.shape[1] != p.in_dim:
        raise ShapeError(f"dense: input dim {x.shape[1]} does not match weight {list(p.weight.shape)}")
    y = matmul(x, p.weight)
    if p.bias is not None:
        y = add(y, p.bias)
    return reshape(y, (p.out_dim,)) if squeeze else y


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branches(mask)
    return record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return record("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis; input is a logit vector or a batch of them."""
    if x.ndim not in (1, 2):
        raise ShapeError(f"softmax expects a logit vector, got shape {list(x.shape)}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record("softmax", out, (x,), back)


def activation(kind: Act | str, x: Tensor) -> Tensor:
    kind = Act(kind.lower() if isinstance(kind, str) else kind)
    if kind is Act.RELU:
        return relu(x)
    if kind is Act.SIGMOID:
        return sigmoid(x)
    return softmax(x)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: ``[N,H,W,C] -> [N,C]`` or ``[H,W,C] -> [C]``."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool expects an HWC map, got shape {list(x.shape)}")
    return reduce_mean(x, over=(-3, -2))


def batch_norm(x: Tensor, p: BatchNormParams, mode: Mode) -> Tensor:
    """Batch normalization over every axis except the channel axis.

    In TRAIN mode the running statistics on ``p`` are replaced by their
    momentum-blended update.
    """
    c = x.shape[-1]
    if p.gamma.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but params for {p.gamma.shape[0]}")
    axes = tuple(range(x.ndim - 1))
    eps = x.dtype.type(p.epsilon)
    gamma, beta = p.gamma.data, p.beta.data

    if mode is Mode.EVAL:
        inv = 1 / np.sqrt(p.running_var.data + eps)
        xhat = (x.data - p.running_mean.data) * inv
        out = xhat * gamma + beta

        def back_eval(g):
            return g * (gamma * inv), (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return record("batch_norm", out, (x, p.gamma, p.beta), back_eval)

    count = int(np.prod([x.shape[a] for a in axes]))
    if x.shape[0] < 2:
        raise ContractError("batch_norm in TRAIN mode needs a batch of at least 2")
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = xhat * gamma + beta

    m = p.momentum
    p.running_mean = Tensor((m * p.running_mean.data + (1 - m) * mean).astype(x.dtype))
    p.running_var = Tensor((m * p.running_var.data + (1 - m) * var).astype(x.dtype))

    def back_train(g):
        gs = g.sum(axis=axes)
        gx = (g * xhat).sum(axis=axes)
        dx = (gamma * inv / count) * (count * g - gs - xhat * gx)
        return dx, gx, gs

    return record("batch_norm", out, (x, p.gamma, p.beta), back_train)


def dropout(x: Tensor, rate: float, mode: Mode, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the identity in EVAL mode or at rate 0."""
    if not 0 <= rate < 1:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if mode is Mode.EVAL or rate == 0:
        return x
    if rng is None:
        raise ContractError("dropout in TRAIN mode needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = (keep / (1 - rate)).astype(x.dtype)
    return record("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def bilinear_resize(x: Tensor, height: int, width: int) -> Tensor:
    """Bilinear resize with half-pixel centers and edge clamping."""
    if height < 1 or width < 1:
        raise ShapeError("target size must be positive")
    x, squeeze = _batched(x, 3)
    _, h, w, _ = x.shape
    out = kernels.bilinear(x.data, height, width)
    y = record("bilinear_resize", out, (x,), lambda g: (kernels.bilinear_grad(g, h, w),))
    return reshape(y, y.shape[1:]) if squeeze else y
