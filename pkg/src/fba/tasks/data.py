"""Datasets, batches, the CIFAR-10 binary reader and PPM export."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional

import numpy as np

from ..autograd import Tensor

CIFAR_RECORD = 3073


class DataFormatError(Exception):
    pass


@dataclass
class Batch:
    inputs: Tensor
    targets: Any  # labels (N,) | {stride: (N,5,h,w)} | HR images (N,3,H,W)
    boxes: Optional[List[np.ndarray]] = None

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: Any
    boxes: Optional[List[np.ndarray]] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def astype(self, dtype) -> "Dataset":
        tg = self.targets
        if isinstance(tg, dict):
            tg = {k: v.astype(dtype) for k, v in tg.items()}
        elif tg.dtype.kind == "f":
            tg = tg.astype(dtype)
        return Dataset(self.inputs.astype(dtype), tg, self.boxes, dict(self.meta))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        tg = self.targets
        tg = {k: v[idx] for k, v in tg.items()} if isinstance(tg, dict) else tg[idx]
        boxes = [self.boxes[i] for i in idx] if self.boxes is not None else None
        return Dataset(self.inputs[idx], tg, boxes, dict(self.meta))

    def batch(self, idx) -> Batch:
        sub = self.subset(idx)
        return Batch(Tensor(sub.inputs), sub.targets, sub.boxes)

    def batches(self, batch_size: int, shuffle_seed: Optional[int] = None) -> Iterator[Batch]:
        n = len(self)
        order = np.arange(n)
        if shuffle_seed is not None:
            order = np.random.default_rng(shuffle_seed).permutation(n)
        for s in range(0, n, batch_size):
            yield self.batch(order[s:s + batch_size])


def load_cifar10_binary(path: str) -> Dataset:
    """Read a CIFAR-10 binary batch: 1 label byte then 3072 pixel bytes (R, G, B planes)."""
    size = os.path.getsize(path)
    if size == 0 or size % CIFAR_RECORD:
        offset = (size // CIFAR_RECORD) * CIFAR_RECORD
        raise DataFormatError(
            f"{path}: size {size} is not a multiple of {CIFAR_RECORD}; incomplete record at byte offset {offset}")
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(f"{path}: label {labels[bad[0]]} > 9 at byte offset {bad[0] * CIFAR_RECORD}")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, meta={"source": "cifar10", "path": path})


def write_ppm(path: str, image: np.ndarray) -> None:
    """Write a (3, H, W) image in [0, 1] as binary PPM (P6, maxval 255)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {img.shape}")
    px = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P6":
        raise DataFormatError(f"{path}: not a binary PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    px = np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / maxval
