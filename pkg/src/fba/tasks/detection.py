"""Anchor-free dense grid detection with a top-down feature pyramid head.

Each box is assigned to one pyramid level by its side length. The level's grid
cell containing the box centre is positive; its target offsets are
``(cx/s - col, cy/s - row, log(w/s), log(h/s))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..autograd import F, Tensor, leaf, resolve_dtype
from ..bank import SCALE_MAP, BankEntry, BankKey, BankSchema, FusionError
from ..blocks import Backbone, BackboneSpec, StageSpec, TaskHead, conv_params, param_rng
from .base import Task, TaskError
from .data import Batch, Dataset

PRED_CHANNELS = 5
# box side (input pixels) -> pyramid level; [lo, hi)
SIZE_BANDS = {4: (0.0, 12.0), 8: (12.0, 18.0), 16: (18.0, math.inf)}


def level_for_side(side: float, strides: Sequence[int]) -> int:
    for s in sorted(strides):
        lo, hi = SIZE_BANDS.get(s, (0.0, math.inf))
        if lo <= side < hi:
            return s
    return max(strides)


def center_cell(cx: float, cy: float, stride: int) -> Tuple[int, int]:
    """Grid cell (column, row) containing a centre point."""
    return int(cx // stride), int(cy // stride)


class LocalFPN(TaskHead):
    """Top-down pyramid over a local feature and optional detached scale maps.

    Every level gets a 1x1 lateral, the coarser merged level is upsampled 2x and
    added, then a 3x3 smoothing conv, relu and a 1x1 prediction conv emit
    ``[objectness logit, dx, dy, log w, log h]`` per cell. Levels coarser than the
    local feature also receive an average-pooled copy of the local lateral, so a
    head with no bank still predicts the whole pyramid from its own scale.
    """

    kind = "detection"

    def __init__(self, prefix: str, levels: Sequence[int], input_size: int, channels: Dict[int, int],
                 local_stride: int, width: int = 16, seed: int = 0, dtype="f32",
                 zero_init_entries: bool = True):
        super().__init__()
        self.prefix = prefix
        self.levels = sorted(levels, reverse=True)
        self.input_size = input_size
        self.channels = dict(channels)
        self.local_stride = local_stride
        self.width = width
        dt = resolve_dtype(dtype)
        p = {}
        for s, c in self.channels.items():
            name = f"{prefix}.lat{s}"
            if zero_init_entries and s != local_stride:
                p[f"{name}.w"] = leaf(np.zeros((width, c, 1, 1), dt), True, f"{name}.w")
                p[f"{name}.b"] = leaf(np.zeros(width, dt), True, f"{name}.b")
            else:
                p.update(conv_params(name, width, c, 1, seed, dt))
        for s in self.levels:
            p.update(conv_params(f"{prefix}.smooth{s}", width, width, 3, seed, dt))
            p.update(conv_params(f"{prefix}.pred{s}", PRED_CHANNELS, width, 1, seed, dt))
        self.params = p

    def _conv(self, x, name, pad=0):
        return F.conv2d(x, self.params[f"{self.prefix}.{name}.w"], self.params[f"{self.prefix}.{name}.b"], pad=pad)

    def stride_of(self, x: Tensor) -> int:
        s = self.input_size // x.shape[2]
        if s * x.shape[2] != self.input_size:
            raise FusionError(f"feature size {x.shape[2]} does not divide input size {self.input_size}")
        return s

    def forward(self, x: Tensor, context=None) -> Dict[int, Tensor]:
        others = _as_stride_map(context)
        return local_fpn_forward(self, x, others)


def _as_stride_map(context) -> Dict[int, Tensor]:
    if not context:
        return {}
    if isinstance(context, dict):
        return dict(context)
    out = {}
    for e in context:
        if isinstance(e, BankEntry):
            if e.tag != SCALE_MAP:
                raise FusionError(f"LocalFPN consumes scale maps, got {e.tag}")
            out[e.stride] = e.tensor
        else:
            raise FusionError(f"unexpected context item {type(e).__name__}")
    return out


def local_fpn_forward(fpn: LocalFPN, local_feat: Tensor, entries) -> Dict[int, Tensor]:
    """Run the pyramid; ``entries`` is a list of scale-map bank entries or a stride map."""
    others = _as_stride_map(entries)
    ls = fpn.stride_of(local_feat)
    others.pop(ls, None)
    if others and max(fpn.levels) not in set(others) | {ls}:
        raise FusionError(f"deepest scale {max(fpn.levels)} missing from bank entries {sorted(others)}")
    if f"{fpn.prefix}.lat{ls}.w" not in fpn.params:
        raise FusionError(f"{fpn.prefix} has no lateral for stride {ls}")
    local_lat = fpn._conv(local_feat, f"lat{ls}")
    terms: Dict[int, Tensor] = {}
    for s in fpn.levels:
        t = None
        if s == ls:
            t = local_lat
        elif s > ls:
            t = F.avg_pool2d(local_lat, s // ls)
        if s in others:
            if f"{fpn.prefix}.lat{s}.w" not in fpn.params:
                raise FusionError(f"{fpn.prefix} has no lateral for bank stride {s}")
            lat = fpn._conv(others[s], f"lat{s}")
            t = lat if t is None else F.add(t, lat)
        terms[s] = t
    out: Dict[int, Tensor] = {}
    prev, prev_s = None, None
    for s in fpn.levels:  # coarse to fine
        m = terms[s]
        if prev is not None:
            up = F.upsample_nearest(prev, prev_s // s)
            m = up if m is None else F.add(m, up)
        if m is None:
            continue
        prev, prev_s = m, s
        out[s] = fpn._conv(F.relu(fpn._conv(m, f"smooth{s}", pad=1)), f"pred{s}")
    return out


# ---------------------------------------------------------------------------
# targets, decoding and F1


def render_targets(boxes: List[np.ndarray], strides: Sequence[int], input_size: int) -> Dict[int, np.ndarray]:
    """Per-level target maps (N, 5, H/s, W/s) from per-image (k, 4) arrays of (cx, cy, w, h)."""
    n = len(boxes)
    maps = {s: np.zeros((n, PRED_CHANNELS, input_size // s, input_size // s)) for s in strides}
    for i, bx in enumerate(boxes):
        for cx, cy, w, h in bx:
            s = level_for_side(max(w, h), strides)
            col, row = center_cell(cx, cy, s)
            m = maps[s]
            m[i, 0, row, col] = 1.0
            m[i, 1, row, col] = cx / s - col
            m[i, 2, row, col] = cy / s - row
            m[i, 3, row, col] = math.log(w / s)
            m[i, 4, row, col] = math.log(h / s)
    return maps


def decode(preds: Dict[int, np.ndarray], threshold: float = 0.5, logits: bool = True):
    """Boxes and scores per image from prediction maps; objectness above threshold."""
    n = next(iter(preds.values())).shape[0]
    out = [([], []) for _ in range(n)]
    for s, p in preds.items():
        obj = 1 / (1 + np.exp(-p[:, 0])) if logits else p[:, 0]
        for i, row, col in zip(*np.nonzero(obj > threshold)):
            dx, dy, lw, lh = p[i, 1:, row, col]
            out[i][0].append(((col + dx) * s, (row + dy) * s, math.exp(lw) * s, math.exp(lh) * s))
            out[i][1].append(float(obj[i, row, col]))
    return [(np.array(b, dtype=float).reshape(-1, 4), np.array(sc, dtype=float)) for b, sc in out]


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def match_counts(pred_boxes, scores, gt_boxes, iou_thresh: float = 0.5) -> Tuple[int, int, int]:
    """Greedy matching by descending confidence; returns (tp, fp, fn)."""
    used = np.zeros(len(gt_boxes), dtype=bool)
    tp = fp = 0
    for k in np.argsort(-np.asarray(scores), kind="stable"):
        best, best_j = iou_thresh, -1
        for j, g in enumerate(gt_boxes):
            if not used[j]:
                v = iou(pred_boxes[k], g)
                if v >= best:
                    best, best_j = v, j
        if best_j >= 0:
            used[best_j] = True
            tp += 1
        else:
            fp += 1
    return tp, fp, int((~used).sum())


def f1_score(decoded, gt: List[np.ndarray], iou_thresh: float = 0.5) -> float:
    tp = fp = fn = 0
    for (pb, sc), g in zip(decoded, gt):
        a, b, c = match_counts(pb, sc, g, iou_thresh)
        tp, fp, fn = tp + a, fp + b, fn + c
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


# ---------------------------------------------------------------------------
# task


DEFAULT_STAGES = ((2, 16, 2), (2, 32, 2), (2, 64, 2))


@dataclass
class DetectionTask(Task):
    input_size: int = 64
    strides: Tuple[int, ...] = (4, 8, 16)
    fpn_width: int = 16
    pos_weight: float = 1.0

    def __post_init__(self):
        self.kind = "detection"
        self.metric_name = "f1"
        self.fusion_kind = "fpn_topdown"
        if self.backbone_spec is None:
            self.backbone_spec = BackboneSpec(tuple(StageSpec(*s) for s in DEFAULT_STAGES), input_channels=3,
                                              stem_pool=2)
        self.strides = tuple(sorted(self.strides))

    def _stage_of_stride(self, backbone: Backbone) -> Dict[int, int]:
        out = {}
        for si in range(len(backbone.spec.stages)):
            out[backbone.stage_stride(si)] = si
        missing = [s for s in self.strides if s not in out]
        if missing:
            raise TaskError(f"backbone has no stage at strides {missing}")
        return out

    def tap_strides(self, backbone):
        by_stride = self._stage_of_stride(backbone)
        ends = backbone.stage_end_indices()
        return {ends[by_stride[s]]: s for s in self.strides}

    def _channels(self, backbone) -> Dict[int, int]:
        by_stride = self._stage_of_stride(backbone)
        return {s: backbone.spec.stages[by_stride[s]].channels for s in self.strides}

    def genuine_head(self, backbone, seed, dtype):
        ends = self.tap_strides(backbone)
        final = max(ends.values())
        if backbone.blocks[-1].index not in ends or ends[backbone.blocks[-1].index] != final:
            raise TaskError("the deepest pyramid level must be the backbone output")
        return LocalFPN("head", self.strides, self.input_size, self._channels(backbone), final,
                        self.fpn_width, seed, dtype, zero_init_entries=False)

    def module_stride(self, backbone, module) -> int:
        return backbone.stage_stride(module.stage_of_tail)

    def aux_head(self, prefix, backbone, module, channels, seed, dtype, with_bank):
        ls = self.module_stride(backbone, module)
        if ls not in self.strides:
            raise TaskError(f"module {module.index} sits at stride {ls}, outside the pyramid {self.strides}")
        chans = {ls: channels}
        if with_bank:
            chans.update({s: c for s, c in self._channels(backbone).items() if s != ls})
        return LocalFPN(prefix, self.strides, self.input_size, chans, ls, self.fpn_width, seed, dtype,
                        zero_init_entries=True)

    def schema(self, backbone, modules):
        s = BankSchema("detection", "fpn_topdown")
        K = len(modules)
        if K < 2:
            return s
        owner = {}
        for m in modules:
            for b in m.blocks:
                owner[b.index] = m
        keys = []
        for bidx, stride in sorted(self.tap_strides(backbone).items()):
            m = owner[bidx]
            keys.append(BankKey(m.position_of(bidx), SCALE_MAP, stride))
        for m in modules[:-1]:
            ls = self.module_stride(backbone, m)
            s.slices[m.index] = [k for k in keys if k.stride != ls]
        last = modules[-1]
        s.slices[last.index] = [k for k in keys if k.position[0] != last.index]
        return s

    def loss(self, pred: Dict[int, Tensor], batch: Batch) -> Tensor:
        total = None
        for s, p in sorted(pred.items()):
            tgt = batch.targets[s]
            obj_t = Tensor(tgt[:, 0:1])
            obj = F.sigmoid(F.slice_channels(p, 0, 1))
            term = F.binary_cross_entropy(obj, obj_t)
            npos = float(tgt[:, 0].sum())
            if npos > 0:
                mask = np.repeat(tgt[:, 0:1], 4, axis=1)
                off = F.mul(F.slice_channels(p, 1, PRED_CHANNELS), Tensor(mask))
                reg = F.mse(off, Tensor(tgt[:, 1:] * mask))
                term = F.add(term, F.mul_scalar(reg, mask.size / (4 * npos)))
                if self.pos_weight:
                    # mean BCE over positive cells only; negatives are pinned at p=1, target 1
                    pinned = F.add(F.mul(obj, obj_t), Tensor(1 - tgt[:, 0:1]))
                    pos = F.binary_cross_entropy(pinned, Tensor(np.ones_like(tgt[:, 0:1])))
                    term = F.add(term, F.mul_scalar(pos, self.pos_weight * obj_t.size / npos))
            total = term if total is None else F.add(total, term)
        return total

    def evaluate_predictions(self, preds, data: Dataset) -> float:
        if len(data) == 0:
            raise TaskError("cannot evaluate on empty data")
        merged = {s: np.concatenate([p[s].data if isinstance(p[s], Tensor) else p[s] for p in preds])
                  for s in preds[0]}
        return f1_score(decode(merged), data.boxes)

    def output_shape(self, backbone, input_shape):
        n = input_shape[0]
        return {s: (n, PRED_CHANNELS, self.input_size // s, self.input_size // s) for s in self.strides}


def build_detection_task(input_size: int = 64, backbone_spec=None, strides=(4, 8, 16), fpn_width: int = 16,
                         pos_weight: float = 1.0) -> DetectionTask:
    return DetectionTask(backbone_spec=backbone_spec, input_size=input_size, strides=tuple(strides),
                         fpn_width=fpn_width, pos_weight=pos_weight)


def gen_detection_data(n: int, seed: int, size: int = 64, strides=(4, 8, 16), min_side: int = 8,
                       max_side: int = 24, max_boxes: int = 4, noise: float = 0.02, dtype="f32") -> Dataset:
    """Bright axis-aligned squares on a uniform background, 1-4 per image, never overlapping."""
    if n < 1:
        raise TaskError("n must be >= 1")
    rng = np.random.default_rng(seed)
    imgs = np.empty((n, 3, size, size))
    all_boxes = []
    for i in range(n):
        bg = rng.uniform(0.0, 0.35, size=3)
        img = np.broadcast_to(bg[:, None, None], (3, size, size)).copy()
        want = int(rng.integers(1, max_boxes + 1))
        placed: List[Tuple[int, int, int]] = []
        tries = 0
        while len(placed) < want and tries < 200:
            tries += 1
            side = int(rng.integers(min_side, max_side + 1))
            x0 = int(rng.integers(0, size - side + 1))
            y0 = int(rng.integers(0, size - side + 1))
            if any(x0 < px + ps and px < x0 + side and y0 < py + ps and py < y0 + side for px, py, ps in placed):
                continue
            placed.append((x0, y0, side))
        for x0, y0, side in placed:
            img[:, y0:y0 + side, x0:x0 + side] = rng.uniform(0.65, 1.0, size=3)[:, None, None]
        if noise:
            img += rng.uniform(-noise, noise, size=img.shape)
        imgs[i] = img
        all_boxes.append(np.array([(x0 + s / 2, y0 + s / 2, s, s) for x0, y0, s in placed], dtype=float))
    dt = resolve_dtype(dtype)
    targets = {s: m.astype(dt) for s, m in render_targets(all_boxes, strides, size).items()}
    return Dataset(imgs.astype(dt), targets, all_boxes, meta={"source": "synthetic", "seed": seed})
