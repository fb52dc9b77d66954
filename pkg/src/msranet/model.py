"""Backbone taps, attention fusion and the classification head as one model."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from math import prod, sqrt

import numpy as np

from .attention import FusionParams, SEParams, attention_fusion
from .errors import ConfigError, DataError, ShapeError
from .layers import (
    BatchNormParams,
    ConvParams,
    DenseParams,
    Mode,
    batch_norm,
    conv2d,
    dense,
    dropout,
    global_avg_pool,
    relu,
    softmax,
)
from .tensor import Tensor, _default_dtype

TAP_STRIDES = (16, 32)


def rng_stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named sub-stream of one run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, keys)])


@dataclass(frozen=True)
class StageConfig:
    channels: int
    convs: int = 1
    kernel: int = 3
    stride: int = 2


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple[StageConfig, ...]
    taps: tuple[int, int] = (3, 4)  # stage indices of the shallow and deep taps

    @classmethod
    def mini(cls, c1: int, c2: int, widths=(8, 16, 32)) -> "BackboneConfig":
        return cls(tuple(StageConfig(c) for c in (*widths, c1, c2)))


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    c1: int = 64
    c2: int = 128
    r: int = 16
    n_classes: int = 9
    hidden: int = 512
    dropout_rate: float = 0.5
    head_order: str = "algorithm"  # or "prose": dense -> dropout -> batchnorm
    se_shared: bool = False
    se_bias: bool = True
    variant: str = "full"  # or "f1_only": no SE, no deep tap
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3
    backbone: BackboneConfig | None = None

    def resolved_backbone(self) -> BackboneConfig:
        return self.backbone or BackboneConfig.mini(self.c1, self.c2)

    def validate(self) -> None:
        if self.input_size < 32 or self.input_size % 32:
            raise ConfigError(f"model.input_size must be a positive multiple of 32, got {self.input_size}")
        if self.n_classes < 2:
            raise ConfigError("model.n_classes must be at least 2")
        if self.r < 1 or self.c1 % self.r:
            raise ConfigError(f"model.c1={self.c1} is not divisible by model.r={self.r}")
        if not 0 < self.bn_momentum < 1:
            raise ConfigError("model.bn_momentum must be in (0, 1)")
        if self.bn_epsilon <= 0:
            raise ConfigError("model.bn_epsilon must be positive")
        if self.hidden < 1:
            raise ConfigError("model.hidden must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("model.dropout_rate must be in [0, 1)")
        if self.head_order not in ("algorithm", "prose"):
            raise ConfigError(f"model.head_order must be 'algorithm' or 'prose', got {self.head_order!r}")
        if self.variant not in ("full", "f1_only"):
            raise ConfigError(f"model.variant must be 'full' or 'f1_only', got {self.variant!r}")
        bb = self.resolved_backbone()
        t1, t2 = bb.taps
        if not 0 <= t1 < t2 < len(bb.stages):
            raise ConfigError(f"model.backbone: invalid tap indices {bb.taps}")
        for tap, want_stride, want_c in zip(bb.taps, TAP_STRIDES, (self.c1, self.c2)):
            stride = prod(s.stride for s in bb.stages[: tap + 1])
            if stride != want_stride:
                raise ConfigError(f"model.backbone: tap at stage {tap} has total stride {stride}, expected {want_stride}")
            if bb.stages[tap].channels != want_c:
                raise ConfigError(
                    f"model.c1/c2: stage {tap} has {bb.stages[tap].channels} channels but the channel plan needs {want_c}"
                )


@dataclass
class HeadParams:
    d1: DenseParams
    bn: BatchNormParams
    d_out: DenseParams
    dropout_rate: float = 0.5
    order: str = "algorithm"


@dataclass
class Model:
    config: ModelConfig
    backbone: list[list[ConvParams]]
    fusion: FusionParams | None
    head: HeadParams
    buffers: frozenset[str] = field(default=frozenset({"head.bn.running_mean", "head.bn.running_var"}))

    def _slots(self) -> list[tuple[str, object, str]]:
        """(name, owner, attribute) for every named tensor, trainable ones and BN statistics."""
        slots: list[tuple[str, object, str]] = []
        for si, stage in enumerate(self.backbone):
            for ci, conv in enumerate(stage):
                pre = f"backbone.stage{si}.conv{ci}"
                slots.append((f"{pre}.kernel", conv, "kernel"))
                if conv.bias is not None:
                    slots.append((f"{pre}.bias", conv, "bias"))
        if self.fusion is not None:
            fu = self.fusion
            slots.append(("fusion.align.kernel", fu.align, "kernel"))
            if fu.align.bias is not None:
                slots.append(("fusion.align.bias", fu.align, "bias"))
            blocks = [("se_f1", fu.se_f1)]
            if fu.se_f2 is not fu.se_f1:
                blocks.append(("se_f2", fu.se_f2))
            for bname, se in blocks:
                for lname in ("w1", "w2"):
                    d = getattr(se, lname)
                    slots.append((f"fusion.{bname}.{lname}.weight", d, "weight"))
                    if d.bias is not None:
                        slots.append((f"fusion.{bname}.{lname}.bias", d, "bias"))
        h = self.head
        slots += [
            ("head.d1.weight", h.d1, "weight"),
            ("head.d1.bias", h.d1, "bias"),
            ("head.bn.gamma", h.bn, "gamma"),
            ("head.bn.beta", h.bn, "beta"),
            ("head.bn.running_mean", h.bn, "running_mean"),
            ("head.bn.running_var", h.bn, "running_var"),
            ("head.d_out.weight", h.d_out, "weight"),
            ("head.d_out.bias", h.d_out, "bias"),
        ]
        return sorted(slots, key=lambda s: s[0])

    def registry(self) -> dict[str, Tensor]:
        """Every named tensor, sorted by name (trainable parameters and BN statistics)."""
        return {name: getattr(owner, attr) for name, owner, attr in self._slots()}

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.registry().items() if k not in self.buffers}

    def assign(self, tensors: dict[str, Tensor]) -> None:
        """Replace named tensors in place; unknown names are an error."""
        slots = {name: (owner, attr) for name, owner, attr in self._slots()}
        for name, t in tensors.items():
            if name not in slots:
                raise KeyError(name)
            owner, attr = slots[name]
            cur = getattr(owner, attr)
            if cur.shape != t.shape:
                raise ShapeError(f"{name}: shape {list(t.shape)} differs from {list(cur.shape)}")
            setattr(owner, attr, t)


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    limit = sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def _zeros(n: int, dtype, grad: bool = True) -> Tensor:
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=grad)


def _conv(rng, k: int, cin: int, cout: int, stride: int, dtype) -> ConvParams:
    return ConvParams(_he_uniform(rng, (k, k, cin, cout), k * k * cin, dtype), _zeros(cout, dtype), stride, "same")


def _dense(rng, din: int, dout: int, dtype, bias: bool = True) -> DenseParams:
    return DenseParams(_he_uniform(rng, (din, dout), din, dtype), _zeros(dout, dtype) if bias else None)


def build(config: ModelConfig, seed: int = 0, dtype=None, fold: int | None = None) -> Model:
    """Initialise a model deterministically from ``seed`` (He-uniform weights, zero biases).

    ``fold`` selects an independent initialisation per cross-validation fold.
    """
    config.validate()
    dtype = np.dtype(dtype or _default_dtype())
    rng = rng_stream(seed, "init") if fold is None else rng_stream(seed, "init", fold)
    bb = config.resolved_backbone()
    last = bb.taps[1] if config.variant == "full" else bb.taps[0]
    stages, cin = [], 3
    for st in bb.stages[: last + 1]:
        convs = []
        for j in range(st.convs):
            convs.append(_conv(rng, st.kernel, cin, st.channels, st.stride if j == 0 else 1, dtype))
            cin = st.channels
        stages.append(convs)

    fusion = None
    if config.variant == "full":
        c1, c2, r = config.c1, config.c2, config.r
        align = ConvParams(_he_uniform(rng, (1, 1, c2, c1), c2, dtype), _zeros(c1, dtype), 1, "same")

        def se():
            return SEParams(_dense(rng, c1, c1 // r, dtype, config.se_bias), _dense(rng, c1 // r, c1, dtype, config.se_bias), r)

        se_f1 = se()
        se_f2 = se_f1 if config.se_shared else se()
        fusion = FusionParams(align, se_f1, se_f2)

    hid = config.hidden
    head = HeadParams(
        d1=_dense(rng, config.c1, hid, dtype),
        bn=BatchNormParams(
            gamma=Tensor(np.ones(hid, dtype=dtype), requires_grad=True),
            beta=_zeros(hid, dtype),
            running_mean=Tensor(np.zeros(hid, dtype=dtype)),
            running_var=Tensor(np.ones(hid, dtype=dtype)),
            momentum=config.bn_momentum,
            epsilon=config.bn_epsilon,
        ),
        d_out=_dense(rng, hid, config.n_classes, dtype),
        dropout_rate=config.dropout_rate,
        order=config.head_order,
    )
    return Model(config, stages, fusion, head)


def head_forward(
    f_merged: Tensor, head: HeadParams, mode: Mode, rng: np.random.Generator | None = None
) -> tuple[Tensor, Tensor]:
    """GAP, dense+ReLU, batch norm and dropout (in the configured order), output dense, softmax.

    Returns ``(logits, probs)``.
    """
    if f_merged.shape[-1] != head.d1.in_dim:
        raise ShapeError(f"head expects {head.d1.in_dim} channels, got {f_merged.shape[-1]}")
    g = global_avg_pool(f_merged)
    x = relu(dense(g, head.d1))
    if head.order == "algorithm":
        x = dropout(batch_norm(x, head.bn, mode), head.dropout_rate, mode, rng)
    else:
        x = batch_norm(dropout(x, head.dropout_rate, mode, rng), head.bn, mode)
    logits = dense(x, head.d_out)
    return logits, softmax(logits)


def backbone_taps(model: Model, x: Tensor) -> tuple[Tensor, Tensor | None]:
    bb = model.config.resolved_backbone()
    taps = {}
    for si, stage in enumerate(model.backbone):
        for conv in stage:
            x = relu(conv2d(x, conv))
        taps[si] = x
    return taps[bb.taps[0]], taps.get(bb.taps[1])


def forward_taps(
    model: Model, f1: Tensor, f2: Tensor | None, mode: Mode, rng: np.random.Generator | None = None
) -> tuple[Tensor, dict[str, Tensor]]:
    """Run fusion and head on tap features (from the backbone or imported)."""
    cache: dict[str, Tensor] = {"F1": f1}
    if model.fusion is not None:
        if f2 is None:
            raise ShapeError("full model needs the deep tap")
        cache["F2"] = f2
        cache.update(attention_fusion(f1, f2, model.fusion))
    else:
        cache["F_merged"] = f1
    logits, probs = head_forward(cache["F_merged"], model.head, mode, rng)
    cache["logits"] = logits
    return probs, cache


def forward(
    model: Model, batch, mode: Mode = Mode.EVAL, rng: np.random.Generator | None = None
) -> tuple[Tensor, dict[str, Tensor]]:
    """Class probabilities ``[N, n_classes]`` for a normalized ``[N, S, S, 3]`` batch.

    The second value caches intermediate maps (F1, F2, F1_att, F2_att,
    F_merged, logits) for Grad-CAM.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=_param_dtype(model)))
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ShapeError(f"expected a [N, S, S, 3] batch, got {list(x.shape)}")
    s = x.shape[1]
    if x.shape[2] != s or s % 32:
        raise ShapeError(f"input must be square with side divisible by 32, got {x.shape[1]}x{x.shape[2]}")
    if (x.data > 1 + 1e-6).any():
        raise DataError("input is not normalized to [0, 1]")
    f1, f2 = backbone_taps(model, x)
    return forward_taps(model, f1, f2, mode, rng)


def _param_dtype(model: Model) -> np.dtype:
    return model.head.d1.weight.dtype


def param_count(model: Model) -> int:
    return sum(t.size for t in model.trainable().values())
