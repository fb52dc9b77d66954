"""Squeeze-and-excitation channel attention and two-tap residual fusion.

The deep tap is aligned to the shallow tap (1x1 conv to the shallow channel
count, then bilinear upsampling), each map is recalibrated by its own SE
block, and the two refined maps are summed.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ShapeError
from .layers import ConvParams, DenseParams, bilinear_resize, conv2d, dense, global_avg_pool, relu, sigmoid
from .tensor import Tensor, add, mul, reshape


@dataclass
class SEParams:
    w1: DenseParams  # C -> C/r
    w2: DenseParams  # C/r -> C
    r: int = 16

    def __post_init__(self):
        c = self.w1.in_dim
        if c % self.r:
            raise ShapeError(f"channel count {c} not divisible by reduction ratio {self.r}")
        if self.w1.out_dim != c // self.r or self.w2.in_dim != c // self.r or self.w2.out_dim != c:
            raise ShapeError(
                f"SE weights {list(self.w1.weight.shape)} / {list(self.w2.weight.shape)} "
                f"do not form a {c} -> {c // self.r} -> {c} bottleneck"
            )

    @property
    def channels(self) -> int:
        return self.w1.in_dim


@dataclass
class FusionParams:
    align: ConvParams
    se_f1: SEParams
    se_f2: SEParams

    def __post_init__(self):
        kh, kw, _, c1 = self.align.kernel.shape
        if (kh, kw) != (1, 1) or self.align.stride != 1:
            raise ShapeError("alignment conv must be 1x1 with stride 1")
        if self.se_f1.channels != c1 or self.se_f2.channels != c1:
            raise ShapeError(f"both SE blocks must act on the {c1} aligned channels")


def se_excite(z: Tensor, p: SEParams) -> Tensor:
    """Channel scales ``sigmoid(W2 relu(W1 z))`` for a squeezed vector (or batch)."""
    if z.shape[-1] != p.channels:
        raise ShapeError(f"se_excite: got {z.shape[-1]} channels, block is for {p.channels}")
    return sigmoid(dense(relu(dense(z, p.w1)), p.w2))


def se_block(f: Tensor, p: SEParams, scales: Tensor | None = None) -> Tensor:
    """Recalibrate ``f`` channel-wise by its excitation vector.

    ``scales`` overrides the computed excitation (used to pin s = 1 in tests).
    """
    if f.ndim not in (3, 4) or f.shape[-1] != p.channels:
        raise ShapeError(f"se_block: map {list(f.shape)} does not match {p.channels} channels")
    s = se_excite(global_avg_pool(f), p) if scales is None else scales
    if f.ndim == 4:
        s = reshape(s, (f.shape[0], 1, 1, f.shape[-1]))
    return mul(f, s)


def align_and_upsample(f2: Tensor, p: FusionParams, height: int, width: int) -> Tensor:
    """Project the deep tap to the shallow channel count and resize it to ``height x width``."""
    if f2.shape[-1] != p.align.kernel.shape[2]:
        raise ShapeError(f"align: deep tap has {f2.shape[-1]} channels, conv expects {p.align.kernel.shape[2]}")
    return bilinear_resize(conv2d(f2, p.align), height, width)


def fuse(f1_att: Tensor, f2_att: Tensor) -> Tensor:
    if f1_att.shape != f2_att.shape:
        raise ShapeError(f"fuse: shapes {list(f1_att.shape)} and {list(f2_att.shape)} differ")
    return add(f1_att, f2_att)


def attention_fusion(f1: Tensor, f2: Tensor, p: FusionParams) -> dict[str, Tensor]:
    """Full fusion path; returns every intermediate map by name."""
    h, w = f1.shape[-3], f1.shape[-2]
    f2_up = align_and_upsample(f2, p, h, w)
    f1_att = se_block(f1, p.se_f1)
    f2_att = se_block(f2_up, p.se_f2)
    return {"F2_aligned": f2_up, "F1_att": f1_att, "F2_att": f2_att, "F_merged": fuse(f1_att, f2_att)}
