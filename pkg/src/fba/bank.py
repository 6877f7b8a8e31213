"""Training-only feature bank and the light fusion operators applied to its slices."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import F, Tensor, detach, leaf, resolve_dtype

GAP_VECTOR = "gap_vector"
SCALE_MAP = "scale_map"
FULL_RES_MAP = "full_res_map"
TAGS = (GAP_VECTOR, SCALE_MAP, FULL_RES_MAP)

FUSION_KINDS = ("identity", "broadcast_add", "concat_project", "fpn_topdown")

Position = Tuple[int, int]  # (module index, block index inside the module)


class BankError(Exception):
    pass


class SchemaError(BankError):
    pass


class BankLifecycleError(BankError):
    pass


class FusionError(BankError):
    pass


@dataclass(frozen=True)
class BankKey:
    position: Position
    tag: str
    stride: Optional[int] = None

    def sort_key(self):
        return (self.tag, -(self.stride or 0), self.position)


@dataclass
class BankEntry:
    position: Position
    tag: str
    tensor: Tensor
    iteration: int
    stride: Optional[int] = None

    @property
    def key(self) -> BankKey:
        return BankKey(self.position, self.tag, self.stride)


@dataclass
class BankSchema:
    """Which features are registered and which slice each module reads.

    ``slices`` maps a module index to the keys it consumes; a key that no slice
    names is never registered.
    """

    task: str
    fusion: str
    slices: Dict[int, List[BankKey]] = field(default_factory=dict)

    @property
    def registrations(self) -> List[BankKey]:
        keys = {k for ks in self.slices.values() for k in ks}
        return sorted(keys, key=BankKey.sort_key)

    def keys_for(self, module: int) -> List[BankKey]:
        return sorted(self.slices.get(module, []), key=BankKey.sort_key)

    def produced_by(self, module: int) -> List[BankKey]:
        return [k for k in self.registrations if k.position[0] == module]

    @property
    def element_free(self) -> bool:
        return not self.registrations


class FeatureBank:
    """Per-step store of detached features.

    Entries are written during the bank-filling forward and read by auxiliaries.
    In strict mode reading an empty or stale bank raises.
    """

    def __init__(self, schema: BankSchema, strict: bool = False):
        self.schema = schema
        self.strict = strict
        self.step = 0
        self.frozen = False
        self._entries: Dict[BankKey, BankEntry] = {}
        self._declared = {(k.position, k.tag): k for k in schema.registrations}

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> List[BankEntry]:
        return [self._entries[k] for k in sorted(self._entries, key=BankKey.sort_key)]

    def element_count(self) -> int:
        return sum(e.tensor.size for e in self._entries.values())

    def register(self, position: Position, tag: str, t: Tensor, step: int) -> None:
        key = self._declared.get((tuple(position), tag))
        if key is None:
            raise SchemaError(f"({tuple(position)}, {tag}) is not declared in the {self.schema.task} schema")
        if self.frozen:
            raise BankLifecycleError("bank is frozen; registration is only allowed while it is being filled")
        if step != self.step:
            raise BankLifecycleError(f"registration for step {step} but the bank is at step {self.step}")
        # last write wins
        self._entries[key] = BankEntry(key.position, tag, detach(t), step, key.stride)

    def freeze(self) -> None:
        self.frozen = True

    def slice(self, module: int) -> List[BankEntry]:
        keys = self.schema.keys_for(module)
        out = []
        for k in keys:
            e = self._entries.get(k)
            if e is None:
                if self.strict:
                    raise BankLifecycleError(f"slice {module}: {k.tag}@{k.position} not registered this step")
                continue
            if e.iteration != self.step:
                if self.strict:
                    raise BankLifecycleError(f"slice {module}: stale entry from step {e.iteration}")
                continue
            out.append(e)
        return out

    def reset(self, step: int) -> None:
        self._entries.clear()
        self.step = step
        self.frozen = False


def bank_register(bank: FeatureBank, position: Position, tag: str, t: Tensor, step: int) -> None:
    bank.register(position, tag, t, step)


def bank_slice(bank: FeatureBank, i: int) -> List[BankEntry]:
    return bank.slice(i)


def bank_reset(bank: FeatureBank, step: int) -> None:
    bank.reset(step)


# ---------------------------------------------------------------------------
# fusion


def resize_to(t: Tensor, h: int, w: int) -> Tensor:
    """Nearest upsampling or average-pool downsampling by an integer factor."""
    th, tw = t.shape[2:]
    if (th, tw) == (h, w):
        return t
    if th < h:
        f = h // th
        if th * f != h or tw * f != w:
            raise FusionError(f"cannot resize {th}x{tw} to {h}x{w} by an integer factor")
        return F.upsample_nearest(t, f)
    f = th // h
    if h * f != th or w * f != tw:
        raise FusionError(f"cannot resize {th}x{tw} to {h}x{w} by an integer factor")
    return F.avg_pool2d(t, f)


class Fusion:
    """Learned light fusion owned by one auxiliary.

    ``broadcast_add`` projects pooled vectors to the local channel count with a
    zero-initialised affine map and adds them per channel. ``concat_project``
    concatenates resized maps with the local feature and maps back with a 1x1 conv
    initialised to pass the local feature through unchanged.
    """

    def __init__(self, kind: str, prefix: str, local_channels: int, entry_channels: Sequence[int], dtype="f32"):
        if kind not in ("broadcast_add", "concat_project"):
            raise FusionError(f"unknown fusion kind {kind!r}")
        self.kind = kind
        self.prefix = prefix
        self.local_channels = local_channels
        dt = resolve_dtype(dtype)
        self.params = {}
        if kind == "broadcast_add":
            d = int(sum(entry_channels))
            self.params[f"{prefix}.w"] = leaf(np.zeros((d, local_channels), dt), True, f"{prefix}.w")
            self.params[f"{prefix}.b"] = leaf(np.zeros(local_channels, dt), True, f"{prefix}.b")
        else:
            cin = local_channels + int(sum(entry_channels))
            w = np.zeros((local_channels, cin, 1, 1), dt)
            w[np.arange(local_channels), np.arange(local_channels), 0, 0] = 1
            self.params[f"{prefix}.w"] = leaf(w, True, f"{prefix}.w")
            self.params[f"{prefix}.b"] = leaf(np.zeros(local_channels, dt), True, f"{prefix}.b")

    def apply(self, local: Tensor, entries: Sequence[BankEntry]) -> Tensor:
        return fuse(local, entries, self.kind, self.params, self.prefix)

    def __call__(self, local: Tensor, entries: Sequence[BankEntry], head=None, context=None):
        h = self.apply(local, entries)
        return head.forward(h, context) if head is not None else h


def fuse(local_feat: Tensor, entries: Sequence[BankEntry], kind: str, params: Optional[dict] = None,
         prefix: str = "", fpn=None):
    """Combine a local feature with bank entries.

    Non-pyramid kinds return a tensor shaped like ``local_feat``; ``fpn_topdown``
    delegates to ``fpn`` and returns its pyramid.
    """
    if kind not in FUSION_KINDS:
        raise FusionError(f"unknown fusion kind {kind!r}")
    for e in entries:
        if not e.tensor.detached and e.tensor.node is not None:
            raise FusionError("bank entries must be detached")
    if kind == "identity" or not entries:
        if kind == "fpn_topdown" and fpn is not None:
            return fpn.forward(local_feat, [])
        return local_feat
    if kind == "fpn_topdown":
        if fpn is None:
            raise FusionError("fpn_topdown needs an FPN module")
        return fpn.forward(local_feat, list(entries))
    if params is None:
        raise FusionError(f"{kind} needs projection parameters")
    w, b = params[f"{prefix}.w"], params[f"{prefix}.b"]
    if kind == "broadcast_add":
        vecs = [e.tensor for e in entries]
        for v in vecs:
            if v.data.ndim != 2:
                raise FusionError(f"broadcast_add expects pooled vectors, got {v.shape}")
        v = vecs[0] if len(vecs) == 1 else F.concat(vecs)
        return F.add(local_feat, F.affine(v, w, b))
    # concat_project
    h, wd = local_feat.shape[2:]
    resized = [resize_to(e.tensor, h, wd) for e in entries]
    for r in resized:
        if r.shape[0] != local_feat.shape[0] or r.shape[2:] != (h, wd):
            raise FusionError(f"entry {r.shape} incompatible with local feature {local_feat.shape}")
    cat = F.concat([local_feat] + resized)
    if w.shape[1] != cat.shape[1]:
        raise FusionError(f"projection expects {w.shape[1]} channels, concat has {cat.shape[1]}")
    return F.conv2d(cat, w, b)
