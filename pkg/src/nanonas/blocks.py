"""Candidate building blocks and their cost model.

Blocks are macro structural units (inverted residual, shuffle, skip, zero)
parameterized by an inner convolution operator (depthwise or full, odd
kernel). FLOPs are counted as 2 x multiply-accumulates over conv and linear
layers only; normalization and activations are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor

OPERATOR_KINDS = ("depthwise-conv", "full-conv")
BLOCK_FAMILIES = ("inverted-residual", "shuffle", "skip", "zero")


@dataclass(frozen=True)
class OperatorSpec:
    """Inner convolution choice of a block."""

    kind: str
    kernel: int

    def __post_init__(self):
        if self.kind not in OPERATOR_KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError(f"operator kernel must be odd, got {self.kernel}")

    def label(self):
        prefix = "dw" if self.kind == "depthwise-conv" else "conv"
        return f"{prefix}{self.kernel}x{self.kernel}"

    def to_json(self):
        return {"kind": self.kind, "kernel": self.kernel}

    @classmethod
    def from_json(cls, obj):
        return cls(kind=obj["kind"], kernel=int(obj["kernel"]))


@dataclass(frozen=True)
class BlockSpec:
    """Macro structure of a candidate block."""

    family: str
    expand: int | None = None
    depth: str | None = None

    def __post_init__(self):
        if self.family not in BLOCK_FAMILIES:
            raise ValueError(f"unknown block family {self.family!r}")
        if self.family == "inverted-residual":
            if self.expand not in (1, 3, 6):
                raise ValueError(f"inverted-residual expand must be 1, 3 or 6, got {self.expand}")
            if self.depth is not None:
                raise ValueError("depth variant applies only to shuffle blocks")
        elif self.family == "shuffle":
            if self.depth not in ("short", "long"):
                raise ValueError(f"shuffle depth must be 'short' or 'long', got {self.depth}")
            if self.expand is not None:
                raise ValueError("expand applies only to inverted-residual blocks")
        else:
            if self.expand is not None or self.depth is not None:
                raise ValueError(f"{self.family} blocks take no expand/depth")

    def label(self):
        if self.family == "inverted-residual":
            return f"ir{self.expand}"
        if self.family == "shuffle":
            return f"shuffle-{self.depth}"
        return self.family

    def to_json(self):
        obj = {"family": self.family}
        if self.expand is not None:
            obj["expand"] = self.expand
        if self.depth is not None:
            obj["depth"] = self.depth
        return obj

    @classmethod
    def from_json(cls, obj):
        return cls(
            family=obj["family"],
            expand=obj.get("expand"),
            depth=obj.get("depth"),
        )


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _he_init(rng, shape, fan_in, dtype):
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


class ConvLayer:
    """Conv2d with same-padding kernel//2 and no bias (norm supplies the shift)."""

    def __init__(self, name, c_in, c_out, kernel, stride, groups, rng, dtype=None):
        dtype = dtype or engine.current_dtype()
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride
        self.groups = groups
        self.padding = kernel // 2
        i_pg = c_in // groups
        fan_in = i_pg * kernel * kernel
        self.w = Tensor(
            _he_init(rng, (c_out, i_pg, kernel, kernel), fan_in, dtype), requires_grad=True
        )

    def forward(self, x):
        return engine.conv2d(
            x, self.w, stride=self.stride, padding=self.padding, groups=self.groups
        )

    def out_spatial(self, h, w):
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        return ho, wo

    def macs(self, h, w):
        ho, wo = self.out_spatial(h, w)
        i_pg = self.c_in // self.groups
        return self.c_out * i_pg * self.kernel * self.kernel * ho * wo

    def params(self):
        return {f"{self.name}.w": self.w}


class BatchNormLayer:
    def __init__(self, name, channels, dtype=None):
        dtype = dtype or engine.current_dtype()
        self.name = name
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def forward(self, x, training):
        return engine.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training
        )

    def params(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def state(self):
        return {
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }


class LinearLayer:
    def __init__(self, name, c_in, c_out, rng, dtype=None):
        dtype = dtype or engine.current_dtype()
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.w = Tensor(_he_init(rng, (c_in, c_out), c_in, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return engine.add(engine.matmul(x, self.w), self.b)

    def macs(self):
        return self.c_in * self.c_out

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}


class _ConvBN:
    """Conv + norm pair, optionally followed by relu."""

    def __init__(self, name, c_in, c_out, kernel, stride, groups, rng, act=True):
        self.conv = ConvLayer(name, c_in, c_out, kernel, stride, groups, rng)
        self.bn = BatchNormLayer(f"{name}.bn", c_out)
        self.act = act

    def forward(self, x, training):
        y = self.bn.forward(self.conv.forward(x), training)
        return engine.relu(y) if self.act else y

    def params(self):
        return {**self.conv.params(), **self.bn.params()}

    def state(self):
        return self.bn.state()


# ---------------------------------------------------------------------------
# block instances
# ---------------------------------------------------------------------------


class BlockInstance:
    """One built (block, operator) candidate with its own parameters."""

    def __init__(self, block: BlockSpec, op: OperatorSpec, c_in, c_out, stride):
        self.block = block
        self.op = op
        self.c_in = c_in
        self.c_out = c_out
        self.stride = stride
        self._stages: list[_ConvBN] = []

    # construction helpers -------------------------------------------------

    def _add(self, stage):
        self._stages.append(stage)
        return stage

    def forward(self, x: Tensor, training=True) -> Tensor:
        raise NotImplementedError

    def params(self) -> dict[str, Tensor]:
        out = {}
        for st in self._stages:
            out.update(st.params())
        return out

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for st in self._stages:
            out.update(st.state())
        return out

    def conv_layers(self):
        return [st.conv for st in self._stages]

    def param_count(self):
        return sum(p.size for p in self.params().values())

    def _conv_trace(self, h, w):
        """Yield (conv, h_in, w_in) per conv layer; default is a plain chain."""
        for st in self._stages:
            yield st.conv, h, w
            h, w = st.conv.out_spatial(h, w)

    def flops(self, h, w):
        """2 x MACs of all conv layers at (h, w) input spatial size, batch 1."""
        return sum(2 * conv.macs(hi, wi) for conv, hi, wi in self._conv_trace(h, w))

    def label(self):
        return f"{self.block.label()}/{self.op.label()}"


class InvertedResidualBlock(BlockInstance):
    """1x1 expand -> k x k (depthwise or full) -> 1x1 project, residual when legal."""

    def __init__(self, block, op, c_in, c_out, stride, rng):
        super().__init__(block, op, c_in, c_out, stride)
        c_mid = c_in * block.expand
        k = op.kernel
        groups = c_mid if op.kind == "depthwise-conv" else 1
        self.expand = self._add(_ConvBN("expand", c_in, c_mid, 1, 1, 1, rng))
        self.spatial = self._add(_ConvBN("spatial", c_mid, c_mid, k, stride, groups, rng))
        self.project = self._add(_ConvBN("project", c_mid, c_out, 1, 1, 1, rng, act=False))
        self.residual = stride == 1 and c_in == c_out

    def forward(self, x, training=True):
        y = self.expand.forward(x, training)
        y = self.spatial.forward(y, training)
        y = self.project.forward(y, training)
        if self.residual:
            y = engine.add(y, x)
        return y


class ShuffleBlock(BlockInstance):
    """Split/branch/concat/shuffle unit; `depth` sets the depthwise conv count.

    At stride 1 with matching channels, half the input passes through
    untouched. Otherwise both halves are convolved (the passive half gets a
    strided depthwise + pointwise pair).
    """

    def __init__(self, block, op, c_in, c_out, stride, rng):
        if c_in % 2 or c_out % 2:
            raise ValueError(f"shuffle block needs even channels, got {c_in}->{c_out}")
        super().__init__(block, op, c_in, c_out, stride)
        k = op.kernel
        dw_groups = op.kind == "depthwise-conv"
        n_dw = 1 if block.depth == "short" else 2
        self.passthrough = stride == 1 and c_in == c_out
        c_half = c_out // 2
        c_branch_in = c_in // 2 if self.passthrough else c_in

        self.branch_in = self._add(_ConvBN("branch.in", c_branch_in, c_half, 1, 1, 1, rng))
        self.branch_mid = []
        for i in range(n_dw):
            groups = c_half if dw_groups else 1
            st = stride if i == 0 else 1
            self.branch_mid.append(
                self._add(_ConvBN(f"branch.dw{i}", c_half, c_half, k, st, groups, rng, act=False))
            )
        self.branch_out = self._add(_ConvBN("branch.out", c_half, c_half, 1, 1, 1, rng))

        if not self.passthrough:
            pg = c_branch_in if dw_groups else 1
            self.passive_dw = self._add(
                _ConvBN("passive.dw", c_branch_in, c_branch_in, k, stride, pg, rng, act=False)
            )
            self.passive_out = self._add(_ConvBN("passive.out", c_branch_in, c_half, 1, 1, 1, rng))

    def forward(self, x, training=True):
        if self.passthrough:
            keep, active = engine.channel_split(x, 2)
        else:
            keep = active = x
        y = self.branch_in.forward(active, training)
        for st in self.branch_mid:
            y = st.forward(y, training)
        y = self.branch_out.forward(y, training)
        if not self.passthrough:
            keep = self.passive_dw.forward(keep, training)
            keep = self.passive_out.forward(keep, training)
        out = engine.concat([keep, y], axis=1)
        return engine.channel_shuffle(out, 2)

    def _conv_trace(self, h, w):
        hb, wb = h, w
        for st in [self.branch_in, *self.branch_mid, self.branch_out]:
            yield st.conv, hb, wb
            hb, wb = st.conv.out_spatial(hb, wb)
        if not self.passthrough:
            hp, wp = h, w
            for st in [self.passive_dw, self.passive_out]:
                yield st.conv, hp, wp
                hp, wp = st.conv.out_spatial(hp, wp)


class SkipBlock(BlockInstance):
    """Identity at stride 1 with matching channels, else a 1x1 strided conv."""

    def __init__(self, block, op, c_in, c_out, stride, rng):
        super().__init__(block, op, c_in, c_out, stride)
        self.identity = stride == 1 and c_in == c_out
        if not self.identity:
            self.proj = self._add(_ConvBN("proj", c_in, c_out, 1, stride, 1, rng, act=False))

    def forward(self, x, training=True):
        if self.identity:
            return x
        return self.proj.forward(x, training)


class ZeroBlock(BlockInstance):
    """Emits zeros of the output shape; has no parameters and cannot learn."""

    def forward(self, x, training=True):
        n, _, h, w = x.shape
        ho = (h + self.stride - 1) // self.stride
        wo = (w + self.stride - 1) // self.stride
        return Tensor(np.zeros((n, self.c_out, ho, wo), dtype=x.data.dtype))


_FAMILY_BUILDERS = {
    "inverted-residual": InvertedResidualBlock,
    "shuffle": ShuffleBlock,
    "skip": SkipBlock,
}


def build_block(block: BlockSpec, op: OperatorSpec, c_in, c_out, stride, rng) -> BlockInstance:
    """Instantiate a candidate block with freshly initialized parameters."""
    if c_in <= 0 or c_out <= 0:
        raise ValueError(f"channel counts must be positive, got {c_in}->{c_out}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    if block.family == "zero":
        return ZeroBlock(block, op, c_in, c_out, stride)
    return _FAMILY_BUILDERS[block.family](block, op, c_in, c_out, stride, rng)


def block_forward(instance: BlockInstance, x: Tensor, training=True) -> Tensor:
    if x.ndim != 4 or x.shape[1] != instance.c_in:
        raise engine.ShapeError(
            f"block_forward: input shape {x.shape} does not provide {instance.c_in} channels"
        )
    return instance.forward(x, training)


def block_flops(instance: BlockInstance, input_shape) -> int:
    """FLOPs (2 x MACs) of the block at a CHW input shape, batch-independent."""
    c, h, w = input_shape
    if c != instance.c_in:
        raise engine.ShapeError(
            f"block_flops: input channels {c} != block input channels {instance.c_in}"
        )
    return instance.flops(h, w)


# ---------------------------------------------------------------------------
# backbone scaffold
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SlotSpec:
    """One searchable position between the fixed stem and head."""

    c_in: int
    c_out: int
    stride: int


class Backbone:
    """Fixed stem (3x3 stride-2 conv) and head (pool + linear) around slots."""

    def __init__(self, in_channels, stem_channels, stages, num_classes, rng):
        if not stages:
            raise ValueError("backbone needs at least one stage")
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.stem = _ConvBN("stem", in_channels, stem_channels, 3, 2, 1, rng)
        self.slots: list[SlotSpec] = []
        c_prev = stem_channels
        for n_layers, channels, stride in stages:
            if n_layers < 1:
                raise ValueError("stage layer count must be >= 1")
            for i in range(n_layers):
                self.slots.append(SlotSpec(c_prev, channels, stride if i == 0 else 1))
                c_prev = channels
        self.head = LinearLayer("head", c_prev, num_classes, rng)

    def stem_forward(self, x, training=True):
        return self.stem.forward(x, training)

    def head_forward(self, x, training=True):
        return self.head.forward(engine.global_avg_pool(x))

    def fixed_params(self):
        return {**self.stem.params(), **self.head.params()}

    def fixed_state(self):
        return self.stem.state()

    def stem_out_spatial(self, h, w):
        return self.stem.conv.out_spatial(h, w)

    def fixed_flops(self, input_shape):
        """Stem + head FLOPs at a CHW reference input."""
        _, h, w = input_shape
        stem_macs = self.stem.conv.macs(h, w)
        return 2 * stem_macs + 2 * self.head.macs()

    def slot_input_shapes(self, input_shape):
        """CHW shape entering each slot at the given network input shape."""
        _, h, w = input_shape
        h, w = self.stem_out_spatial(h, w)
        shapes = []
        for slot in self.slots:
            shapes.append((slot.c_in, h, w))
            # same-padding blocks with odd kernels: out = ceil(in / stride)
            h = (h - 1) // slot.stride + 1
            w = (w - 1) // slot.stride + 1
        return shapes


def build_backbone(stem_channels, stage_layout, head_classes, in_channels=1, rng=0):
    """Scaffold with placeholder slots; stage_layout lists (layers, channels, stride)."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    return Backbone(in_channels, stem_channels, stage_layout, head_classes, rng)
