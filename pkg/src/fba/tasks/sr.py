from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..autograd import F, Tensor, resolve_dtype
from ..bank import FULL_RES_MAP, BankKey, BankSchema, Fusion
from ..blocks import BackboneSpec, StageSpec, TaskHead, conv_params
from .base import Task, TaskError
from .data import Batch, Dataset

PSNR_CAP = 99.0


class SRHead(TaskHead):
    """3x3 conv to 3*r^2 channels followed by sub-pixel shuffle."""

    kind = "super_resolution"

    def __init__(self, prefix: str, in_channels: int, scale: int, seed: int, dtype="f32"):
        super().__init__()
        self.prefix = prefix
        self.in_channels = in_channels
        self.scale = scale
        self.params = conv_params(f"{prefix}.conv", 3 * scale * scale, in_channels, 3, seed, resolve_dtype(dtype))

    def forward(self, x: Tensor, context=None) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise TaskError(f"{self.prefix}: expected {self.in_channels} channels, got {x.shape[1]}")
        y = F.conv2d(x, self.params[f"{self.prefix}.conv.w"], self.params[f"{self.prefix}.conv.b"], pad=1)
        return F.pixel_shuffle(y, self.scale)


def psnr(a, b) -> float:
    """PSNR in dB on a [0, 1] range; identical inputs are capped at 99 dB."""
    a = a.data if isinstance(a, Tensor) else np.asarray(a)
    b = b.data if isinstance(b, Tensor) else np.asarray(b)
    if a.shape != b.shape:
        raise TaskError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    err = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if err == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, max(0.0, 10 * math.log10(1.0 / err))))


@dataclass
class SRTask(Task):
    scale: int = 2
    hr_size: int = 48

    def __post_init__(self):
        self.kind = "super_resolution"
        self.metric_name = "psnr"
        if self.fusion_kind == "identity":
            self.fusion_kind = "concat_project"
        if self.backbone_spec is None:
            self.backbone_spec = BackboneSpec((StageSpec(8, 32, 1),), input_channels=3)

    @property
    def lr_size(self) -> int:
        return self.hr_size // self.scale

    def genuine_head(self, backbone, seed, dtype):
        return SRHead("head", backbone.blocks[-1].desc.out_channels, self.scale, seed, dtype)

    def aux_head(self, prefix, backbone, module, channels, seed, dtype, with_bank):
        return SRHead(prefix, channels, self.scale, seed, dtype)

    def aux_fusion(self, prefix, backbone, module, channels, schema, dtype):
        keys = schema.keys_for(module.index)
        if not keys:
            return None
        first = backbone.blocks[0].desc.out_channels
        return Fusion(self.fusion_kind, prefix, channels, [first] * len(keys), dtype)

    def schema(self, backbone, modules):
        s = BankSchema("super_resolution", self.fusion_kind)
        K = len(modules)
        if K >= 2:
            key = BankKey((0, 0), FULL_RES_MAP)
            s.slices = {j: [key] for j in range(K - 1)}
        return s

    def loss(self, pred, batch: Batch):
        return F.mse(pred, Tensor(batch.targets))

    def evaluate_predictions(self, preds, data: Dataset) -> float:
        if len(data) == 0:
            raise TaskError("cannot evaluate on empty data")
        out = np.concatenate([p.data if isinstance(p, Tensor) else p for p in preds])
        out = np.clip(out, 0.0, 1.0)
        return float(np.mean([psnr(o, t) for o, t in zip(out, data.targets)]))

    def output_shape(self, backbone, input_shape):
        n, c, h, w = input_shape
        return (n, 3, h * self.scale, w * self.scale)


def build_sr_task(scale: int = 2, hr_size: int = 48, backbone_spec=None,
                  fusion_kind: str = "concat_project") -> SRTask:
    if scale not in (2, 3, 4):
        raise TaskError(f"unsupported scale factor {scale}; expected 2, 3 or 4")
    if hr_size % scale:
        raise TaskError(f"HR size {hr_size} not divisible by scale {scale}")
    return SRTask(backbone_spec=backbone_spec, fusion_kind=fusion_kind, scale=scale, hr_size=hr_size)


def box_downsample(hr: np.ndarray, r: int) -> np.ndarray:
    """Mean of each r x r cell over the last two axes."""
    *lead, h, w = hr.shape
    if h % r or w % r:
        raise TaskError(f"HR size {h}x{w} not divisible by {r}")
    return hr.reshape(*lead, h // r, r, w // r, r).mean(axis=(-3, -1))


def gen_sr_data(n: int, seed: int, r: int = 2, hr_size: int = 48, dtype="f32") -> Dataset:
    """Smooth sinusoid mixtures plus sharp rectangles; LR is the r x r box average."""
    if n < 1:
        raise TaskError("n must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(hr_size) / hr_size, np.arange(hr_size) / hr_size, indexing="ij")
    hr = np.empty((n, 3, hr_size, hr_size))
    for i in range(n):
        img = np.zeros((3, hr_size, hr_size)) + rng.uniform(0.3, 0.7, size=3)[:, None, None]
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 3.0, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.03, 0.12, size=3)
            img += amp[:, None, None] * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)[None]
        for _ in range(int(rng.integers(1, 4))):
            w, h = rng.integers(6, hr_size // 2, size=2)
            x0 = int(rng.integers(0, hr_size - w))
            y0 = int(rng.integers(0, hr_size - h))
            img[:, y0:y0 + h, x0:x0 + w] = rng.uniform(0.0, 1.0, size=3)[:, None, None]
        hr[i] = np.clip(img, 0.0, 1.0)
    lr = box_downsample(hr, r)
    dt = resolve_dtype(dtype)
    return Dataset(lr.astype(dt), hr.astype(dt), meta={"source": "synthetic", "seed": seed, "scale": r})
