"""Residual backbones, K-way partitioning into local modules, and auxiliary networks.

Parameters are leaf tensors named hierarchically (``bb.3.conv1.w``,
``aux1.block.conv2.b``, ``head.fc.w``). Each parameter draws its initial values
from a generator seeded by ``(seed, name)``, so adding or removing unrelated
parameters never changes the initial value of another one.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import F, Tensor, leaf, resolve_dtype

Params = Dict[str, Tensor]


class BlockError(Exception):
    """Invalid backbone description, partition request or auxiliary wiring."""


RESIDUAL_GAIN = 0.1
LINEAR_GAIN = math.sqrt(0.5)


def param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def he_conv(name: str, cout: int, cin: int, k: int, seed: int, dtype, gain: float = 1.0) -> Tensor:
    std = gain * math.sqrt(2.0 / (cin * k * k))
    w = param_rng(seed, name).standard_normal((cout, cin, k, k)) * std
    return leaf(w.astype(dtype), requires_grad=True, name=name)


def zeros_param(name: str, shape, dtype) -> Tensor:
    return leaf(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


def conv_params(prefix: str, cout: int, cin: int, k: int, seed: int, dtype, gain: float = 1.0) -> Params:
    return {
        f"{prefix}.w": he_conv(f"{prefix}.w", cout, cin, k, seed, dtype, gain),
        f"{prefix}.b": zeros_param(f"{prefix}.b", (cout,), dtype),
    }


# ---------------------------------------------------------------------------
# descriptions


@dataclass(frozen=True)
class StageSpec:
    block_count: int
    channels: int
    stride: int = 1


@dataclass(frozen=True)
class BackboneSpec:
    stages: Tuple[StageSpec, ...]
    input_channels: int = 3
    stem_pool: int = 1  # parameter-free avg-pool applied before the first block
    res_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, StageSpec) else StageSpec(*s) for s in self.stages))

    def validate(self) -> None:
        if not self.stages:
            raise BlockError("backbone needs at least one stage")
        for i, s in enumerate(self.stages):
            if s.block_count < 1 or s.channels < 1:
                raise BlockError(f"stage {i}: block_count and channels must be positive")
            if s.stride not in (1, 2):
                raise BlockError(f"stage {i}: stride must be 1 or 2, got {s.stride}")
        if self.input_channels < 1:
            raise BlockError("input_channels must be positive")
        if self.stem_pool < 1:
            raise BlockError("stem_pool must be >= 1")

    @property
    def total_blocks(self) -> int:
        return sum(s.block_count for s in self.stages)


@dataclass(frozen=True)
class BlockDesc:
    """Shape of one residual unit: conv3x3-relu-conv3x3 plus skip."""

    in_channels: int
    out_channels: int
    stride: int = 1
    kernel: int = 3
    mid_channels: Optional[int] = None
    adapters: bool = False  # 1x1 in/out adapters around a reduced-width core

    @property
    def width(self) -> int:
        return self.mid_channels if self.mid_channels is not None else self.out_channels

    @property
    def projection(self) -> bool:
        return self.in_channels != self.out_channels or self.stride != 1


def simplify(desc: BlockDesc, channel_reduction: float = 1) -> BlockDesc:
    """Pass-through clone that optionally narrows the internal width.

    Kernel size and stride are kept. With ``channel_reduction > 1`` the core runs at
    ``ceil(width / factor)`` channels behind 1x1 adapters, so the block's input and
    output channel counts do not change.
    """
    if channel_reduction < 1:
        raise BlockError(f"channel reduction factor must be >= 1, got {channel_reduction}")
    if channel_reduction == 1:
        return desc
    mid = math.ceil(desc.width / channel_reduction)
    return replace(desc, mid_channels=mid, adapters=True)


# ---------------------------------------------------------------------------
# residual block


class ResidualBlock:
    def __init__(self, desc: BlockDesc, prefix: str, seed: int, dtype="f32", res_scale: float = 1.0,
                 stage: int = 0, index: int = 0):
        self.desc = desc
        self.prefix = prefix
        self.stage = stage
        self.index = index
        self.res_scale = res_scale
        dt = resolve_dtype(dtype)
        d = desc
        p: Params = {}
        core_in = d.in_channels
        if d.adapters:
            p.update(conv_params(f"{prefix}.ain", d.width, d.in_channels, 1, seed, dt))
            core_in = d.width
        p.update(conv_params(f"{prefix}.conv1", d.width, core_in, d.kernel, seed, dt))
        # small residual-branch init keeps activation scale flat with depth (no normalization layers)
        p.update(conv_params(f"{prefix}.conv2", d.width, d.width, d.kernel, seed, dt, gain=RESIDUAL_GAIN))
        if d.adapters:
            p.update(conv_params(f"{prefix}.aout", d.out_channels, d.width, 1, seed, dt, gain=LINEAR_GAIN))
        if d.projection:
            p.update(conv_params(f"{prefix}.proj", d.out_channels, d.in_channels, 1, seed, dt, gain=LINEAR_GAIN))
        self.params = p

    def _conv(self, x, name, stride=1):
        w = self.params[f"{self.prefix}.{name}.w"]
        b = self.params[f"{self.prefix}.{name}.b"]
        k = w.shape[-1]
        return F.conv2d(x, w, b, stride=stride, pad=k // 2)

    def forward(self, x: Tensor) -> Tensor:
        d = self.desc
        if x.shape[1] != d.in_channels:
            raise BlockError(f"{self.prefix}: expected {d.in_channels} input channels, got {x.shape[1]}")
        h = self._conv(x, "ain") if d.adapters else x
        h = F.relu(self._conv(h, "conv1", d.stride))
        h = self._conv(h, "conv2")
        if d.adapters:
            h = self._conv(h, "aout")
        if self.res_scale != 1:
            h = F.mul_scalar(h, self.res_scale)
        skip = self._conv(x, "proj", d.stride) if d.projection else x
        return F.add(skip, h)

    __call__ = forward


class Backbone:
    def __init__(self, spec: BackboneSpec, blocks: List[ResidualBlock]):
        self.spec = spec
        self.blocks = blocks

    @property
    def params(self) -> Params:
        out: Params = {}
        for b in self.blocks:
            out.update(b.params)
        return out

    def stage_blocks(self, stage: int) -> List[ResidualBlock]:
        return [b for b in self.blocks if b.stage == stage]

    def stage_end_indices(self) -> List[int]:
        return [max(b.index for b in self.stage_blocks(s)) for s in range(len(self.spec.stages))]

    def stage_stride(self, stage: int) -> int:
        """Cumulative downsampling factor at the output of ``stage`` (stem included)."""
        s = self.spec.stem_pool
        for st in self.spec.stages[:stage + 1]:
            s *= st.stride
        return s

    def forward(self, x: Tensor, taps: Optional[Dict[int, Tensor]] = None) -> Tensor:
        if self.spec.stem_pool > 1:
            x = F.avg_pool2d(x, self.spec.stem_pool)
        for b in self.blocks:
            x = b(x)
            if taps is not None:
                taps[b.index] = x
        return x


def build_backbone(spec: BackboneSpec, seed: int, dtype="f32") -> Backbone:
    spec.validate()
    blocks = []
    cin = spec.input_channels
    idx = 0
    for si, st in enumerate(spec.stages):
        for bi in range(st.block_count):
            stride = st.stride if bi == 0 else 1
            desc = BlockDesc(cin, st.channels, stride)
            blocks.append(ResidualBlock(desc, f"bb.{idx}", seed, dtype, spec.res_scale, stage=si, index=idx))
            cin = st.channels
            idx += 1
    return Backbone(spec, blocks)


# ---------------------------------------------------------------------------
# partition


@dataclass
class LocalModule:
    index: int
    blocks: List[ResidualBlock]
    stage_of_tail: int
    stem_pool: int = 1

    @property
    def params(self) -> Params:
        out: Params = {}
        for b in self.blocks:
            out.update(b.params)
        return out

    @property
    def block_indices(self) -> List[int]:
        return [b.index for b in self.blocks]

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].desc.out_channels

    def position_of(self, block_index: int) -> Tuple[int, int]:
        return (self.index, self.block_indices.index(block_index))


def partition(backbone: Backbone, K: int) -> List[LocalModule]:
    """Contiguous balanced split; earlier modules take the remainder."""
    n = len(backbone.blocks)
    if K < 1:
        raise BlockError(f"K must be >= 1, got {K}")
    if K > n:
        raise BlockError(f"cannot split {n} blocks into {K} modules")
    base, extra = divmod(n, K)
    modules = []
    start = 0
    for i in range(K):
        size = base + (1 if i < extra else 0)
        blocks = backbone.blocks[start:start + size]
        modules.append(LocalModule(i, blocks, blocks[-1].stage, backbone.spec.stem_pool if i == 0 else 1))
        start += size
    return modules


def forward_module(module: LocalModule, x: Tensor, taps: Optional[Dict[int, Tensor]] = None) -> Tensor:
    """Run a module's blocks. The output is not detached; the caller decides."""
    if module.stem_pool > 1:
        x = F.avg_pool2d(x, module.stem_pool)
    for b in module.blocks:
        x = b(x)
        if taps is not None:
            taps[b.index] = x
    return x


def stage_tail(backbone: Backbone, module: LocalModule) -> BlockDesc:
    if module.blocks[-1] not in backbone.blocks:
        raise BlockError("module does not belong to this backbone")
    return backbone.stage_blocks(module.stage_of_tail)[-1].desc


# ---------------------------------------------------------------------------
# auxiliary networks


class TaskHead:
    """Base for task heads. Subclasses set ``kind`` and ``params`` and implement forward."""

    kind = "abstract"

    def __init__(self):
        self.params: Params = {}

    def forward(self, x: Tensor, context=None):
        raise NotImplementedError


@dataclass
class AuxiliaryNetwork:
    module_index: int
    simplified_block: Optional[ResidualBlock]
    head: TaskHead
    fusion: Optional[object] = None  # bank.Fusion; absent for the genuine head and in no-bank mode
    fusion_schema: Dict[str, object] = field(default_factory=dict)
    is_genuine_head: bool = False
    shared_head: bool = False

    @property
    def params(self) -> Params:
        out: Params = {}
        if self.simplified_block is not None:
            out.update(self.simplified_block.params)
        if self.fusion is not None:
            out.update(self.fusion.params)
        out.update(self.head.params)
        return out

    def forward(self, x: Tensor, entries: Sequence = (), context=None):
        """Simplified block, then bank fusion, then the task head."""
        if self.is_genuine_head:
            return self.head.forward(x, context)
        h = self.simplified_block(x)
        if self.fusion is not None:
            return self.fusion(h, list(entries), head=self.head, context=context)
        # heads that fuse internally (the detection pyramid) take the entries directly
        return self.head.forward(h, list(entries) if context is None else context)


def build_aux(backbone: Backbone, module: LocalModule, head_factory: Callable[[str, int], TaskHead],
              fusion_factory: Optional[Callable[[str, int], object]], reduction: float = 1, seed: int = 0,
              dtype="f32", is_last: bool = False, genuine_head: Optional[TaskHead] = None,
              shared_head: bool = False, fusion_schema: Optional[dict] = None) -> AuxiliaryNetwork:
    """Stage-tail clone plus task head for one module.

    The last module gets the genuine task head with no simplified block.
    ``head_factory(prefix, in_channels)`` builds a fresh head; with ``shared_head``
    the genuine head object is reused instead.
    """
    fusion_schema = dict(fusion_schema or {})
    if is_last:
        if genuine_head is None:
            raise BlockError("the last module needs the genuine task head")
        return AuxiliaryNetwork(module.index, None, genuine_head, None, fusion_schema, is_genuine_head=True)
    tail = stage_tail(backbone, module)
    desc = simplify(BlockDesc(tail.out_channels, tail.out_channels, tail.stride, tail.kernel), reduction)
    if desc.in_channels != module.out_channels:
        raise BlockError(
            f"module {module.index} emits {module.out_channels} channels, "
            f"its stage tail expects {desc.in_channels}")
    prefix = f"aux{module.index}"
    block = ResidualBlock(desc, f"{prefix}.block", seed, dtype, backbone.spec.res_scale,
                          stage=module.stage_of_tail, index=-1)
    if shared_head:
        if genuine_head is None:
            raise BlockError("shared-head mode needs the genuine head")
        head = genuine_head
    else:
        head = head_factory(f"{prefix}.head", desc.out_channels)
    fusion = fusion_factory(f"{prefix}.fuse", desc.out_channels) if fusion_factory is not None else None
    return AuxiliaryNetwork(module.index, block, head, fusion, fusion_schema, shared_head=shared_head)
