from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List

import numpy as np

from ..autograd import F, Tensor, leaf, resolve_dtype
from ..bank import GAP_VECTOR, BankKey, BankSchema, Fusion
from ..blocks import Backbone, BackboneSpec, LocalModule, StageSpec, TaskHead, param_rng
from .base import Task, TaskError
from .data import Batch, Dataset


class ClsHead(TaskHead):
    """Global average pool followed by an affine classifier."""

    kind = "classification"

    def __init__(self, prefix: str, in_channels: int, num_classes: int, seed: int, dtype="f32"):
        super().__init__()
        dt = resolve_dtype(dtype)
        self.prefix = prefix
        self.in_channels = in_channels
        w = param_rng(seed, f"{prefix}.fc.w").standard_normal((in_channels, num_classes)) / math.sqrt(in_channels)
        self.params = {
            f"{prefix}.fc.w": leaf(w.astype(dt), True, f"{prefix}.fc.w"),
            f"{prefix}.fc.b": leaf(np.zeros(num_classes, dt), True, f"{prefix}.fc.b"),
        }

    def forward(self, x: Tensor, context=None) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise TaskError(f"{self.prefix}: expected {self.in_channels} channels, got {x.shape[1]}")
        return F.affine(F.global_avg_pool(x), self.params[f"{self.prefix}.fc.w"], self.params[f"{self.prefix}.fc.b"])


DEFAULT_STAGES = ((2, 8, 1), (2, 16, 2), (2, 32, 2), (2, 64, 2))


@dataclass
class ClassificationTask(Task):
    num_classes: int = 4
    input_size: int = 16

    def __post_init__(self):
        self.kind = "classification"
        self.metric_name = "accuracy"
        if self.fusion_kind == "identity":
            self.fusion_kind = "broadcast_add"
        if self.backbone_spec is None:
            self.backbone_spec = BackboneSpec(tuple(StageSpec(*s) for s in DEFAULT_STAGES), input_channels=3)

    def genuine_head(self, backbone, seed, dtype):
        return ClsHead("head", backbone.blocks[-1].desc.out_channels, self.num_classes, seed, dtype)

    def aux_head(self, prefix, backbone, module, channels, seed, dtype, with_bank):
        return ClsHead(prefix, channels, self.num_classes, seed, dtype)

    def aux_fusion(self, prefix, backbone, module, channels, schema, dtype):
        keys = schema.keys_for(module.index)
        if not keys:
            return None
        deep = backbone.blocks[-1].desc.out_channels
        return Fusion(self.fusion_kind, prefix, channels, [deep] * len(keys), dtype)

    def schema(self, backbone, modules):
        K = len(modules)
        s = BankSchema("classification", self.fusion_kind)
        if K >= 2:
            last = modules[-1]
            key = BankKey((K - 1, len(last.blocks) - 1), GAP_VECTOR)
            s.slices = {j: [key] for j in range(K - 1)}
        return s

    def bank_value(self, tag, feature):
        return F.global_avg_pool(feature) if tag == GAP_VECTOR else feature

    def loss(self, pred, batch: Batch):
        return F.softmax_cross_entropy(pred, Tensor(np.asarray(batch.targets)))

    def evaluate_predictions(self, preds, data: Dataset) -> float:
        if len(data) == 0:
            raise TaskError("cannot evaluate on empty data")
        logits = np.concatenate([p.data if isinstance(p, Tensor) else p for p in preds])
        return accuracy(logits, np.asarray(data.targets))

    def output_shape(self, backbone, input_shape):
        return (input_shape[0], self.num_classes)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def build_classification_task(num_classes: int = 4, input_size: int = 16, backbone_spec=None,
                              fusion_kind: str = "broadcast_add") -> ClassificationTask:
    if num_classes < 2:
        raise TaskError(f"need at least 2 classes, got {num_classes}")
    return ClassificationTask(backbone_spec=backbone_spec, fusion_kind=fusion_kind, num_classes=num_classes,
                              input_size=input_size)


def gen_classification_data(n: int, seed: int, num_classes: int = 4, size: int = 16, noise: float = 0.1,
                            dtype="f32") -> Dataset:
    """Oriented sinusoidal textures; class k has k+1 cycles per image width.

    Orientation, phase and per-channel contrast are random; uniform noise of the
    given amplitude is added.
    """
    if n < 1:
        raise TaskError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    imgs = np.empty((n, 3, size, size))
    for i, k in enumerate(labels):
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.0, size=3)
        proj = (xx * np.cos(theta) + yy * np.sin(theta)) / size
        wave = np.sin(2 * np.pi * (k + 1) * proj + phase)
        imgs[i] = 0.5 + 0.4 * amp[:, None, None] * wave[None]
    if noise:
        imgs += rng.uniform(-noise, noise, size=imgs.shape)
    return Dataset(imgs.astype(resolve_dtype(dtype)), labels.astype(np.int64),
                   meta={"source": "synthetic", "seed": seed})
