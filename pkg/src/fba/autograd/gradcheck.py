"""Finite-difference check of every op's backward rule.

Each case draws random shapes and values in float64, reduces the op output to a
scalar with ``mse`` against a fixed random target, and compares the analytic
gradient of every differentiable input with central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import ops as F
from .tensor import Tape, Tensor, backward, leaf, numeric_gradient


@dataclass
class CheckResult:
    kind: str
    cases: int
    worst_rel_err: float
    passed: bool


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


# Each builder returns (list of input arrays, indices of differentiable inputs, fn(*tensors) -> Tensor)
Builder = Callable[[np.random.Generator], Tuple[List[np.ndarray], List[int], Callable]]


def _nchw(rng, c_max=3, hw=(2, 5)):
    return (int(rng.integers(1, 3)), int(rng.integers(1, c_max + 1)),
            int(rng.integers(*hw)), int(rng.integers(*hw)))


def _case_add(rng):
    shp = _nchw(rng)
    if rng.random() < 0.5:
        b = rng.standard_normal(shp[:2])
    else:
        b = rng.standard_normal(shp)
    return [rng.standard_normal(shp), b], [0, 1], F.add


def _case_sub(rng):
    shp = _nchw(rng)
    b = rng.standard_normal(shp[:2]) if rng.random() < 0.5 else rng.standard_normal(shp)
    return [rng.standard_normal(shp), b], [0, 1], F.sub


def _case_mul_scalar(rng):
    c = float(rng.uniform(-2, 2))
    return [rng.standard_normal(_nchw(rng))], [0], lambda a: F.mul_scalar(a, c)


def _case_emul(rng):
    shp = _nchw(rng)
    return [rng.standard_normal(shp), rng.standard_normal(shp)], [0, 1], F.mul


def _case_matmul(rng):
    n, k, m = (int(v) for v in rng.integers(1, 5, size=3))
    return [rng.standard_normal((n, k)), rng.standard_normal((k, m))], [0, 1], F.matmul


def _case_affine(rng):
    n, k, m = (int(v) for v in rng.integers(1, 5, size=3))
    return [rng.standard_normal((n, k)), rng.standard_normal((k, m)), rng.standard_normal(m)], [0, 1, 2], F.affine


def _case_conv(rng):
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2)) if k == 3 else 0
    n, c, _, _ = _nchw(rng)
    h = int(rng.integers(k, 6))
    w = int(rng.integers(k, 6))
    o = int(rng.integers(1, 4))
    return ([rng.standard_normal((n, c, h, w)), rng.standard_normal((o, c, k, k)), rng.standard_normal(o)],
            [0, 1, 2], lambda x, wt, b: F.conv2d(x, wt, b, stride=stride, pad=pad))


def _case_relu(rng):
    return [_away_from_zero(rng, _nchw(rng))], [0], F.relu


def _case_sigmoid(rng):
    return [rng.standard_normal(_nchw(rng)) * 2], [0], F.sigmoid


def _case_avgpool(rng):
    k = int(rng.integers(1, 3))
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = k * int(rng.integers(1, 4)), k * int(rng.integers(1, 4))
    return [rng.standard_normal((n, c, h, w))], [0], lambda x: F.avg_pool2d(x, k)


def _case_gap(rng):
    return [rng.standard_normal(_nchw(rng))], [0], F.global_avg_pool


def _case_upsample(rng):
    f = int(rng.integers(1, 4))
    return [rng.standard_normal(_nchw(rng, hw=(1, 4)))], [0], lambda x: F.upsample_nearest(x, f)


def _case_pixel_shuffle(rng):
    r = int(rng.integers(1, 4))
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    return [rng.standard_normal((n, c * r * r, h, w))], [0], lambda x: F.pixel_shuffle(x, r)


def _case_concat(rng):
    n, _, h, w = _nchw(rng)
    parts = [rng.standard_normal((n, int(rng.integers(1, 4)), h, w)) for _ in range(int(rng.integers(1, 4)))]
    return parts, list(range(len(parts))), lambda *xs: F.concat(xs)


def _case_slice(rng):
    shp = _nchw(rng, c_max=5)
    c = shp[1]
    start = int(rng.integers(0, c))
    stop = int(rng.integers(start + 1, c + 1))
    return [rng.standard_normal(shp)], [0], lambda x: F.slice_channels(x, start, stop)


def _case_sce(rng):
    n, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    labels = rng.integers(0, c, size=n).astype(np.float64)
    return [rng.standard_normal((n, c)) * 2, labels], [0], F.softmax_cross_entropy


def _case_mse(rng):
    shp = _nchw(rng)
    return [rng.standard_normal(shp), rng.standard_normal(shp)], [0, 1], F.mse


def _case_bce(rng):
    shp = _nchw(rng)
    p = rng.uniform(0.1, 0.9, size=shp)
    y = rng.uniform(0, 1, size=shp)
    return [p, y], [0, 1], F.binary_cross_entropy


CASES: Dict[str, Builder] = {
    "add": _case_add,
    "sub": _case_sub,
    "mul_scalar": _case_mul_scalar,
    "elementwise_mul": _case_emul,
    "matmul": _case_matmul,
    "affine": _case_affine,
    "conv2d": _case_conv,
    "relu": _case_relu,
    "avg_pool2d": _case_avgpool,
    "global_avg_pool": _case_gap,
    "upsample_nearest": _case_upsample,
    "pixel_shuffle": _case_pixel_shuffle,
    "concat": _case_concat,
    "slice_channels": _case_slice,
    "softmax_cross_entropy": _case_sce,
    "mse": _case_mse,
    "sigmoid": _case_sigmoid,
    "binary_cross_entropy": _case_bce,
}

_SCALAR_OUTPUT = {"softmax_cross_entropy", "mse", "binary_cross_entropy"}


def check_op(kind: str, cases: int = 20, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, kind))])
    worst = 0.0
    for _ in range(cases):
        arrays, diff_idx, fn = CASES[kind](rng)
        probe = None

        def scalar(*tensors):
            nonlocal probe
            out = fn(*tensors)
            if kind in _SCALAR_OUTPUT:
                return out
            if probe is None:
                probe = Tensor(rng.standard_normal(out.shape))
            return F.mse(out, probe)

        # freeze the probe before differentiating
        scalar(*[Tensor(a) for a in arrays])
        for i in diff_idx:
            with Tape():
                inputs = [leaf(a, requires_grad=(j == i), name=f"in{j}") for j, a in enumerate(arrays)]
                grads = backward(scalar(*inputs))
            analytic = grads[f"in{i}"].data

            def f(t, i=i):
                ins = [t if j == i else Tensor(a) for j, a in enumerate(arrays)]
                return scalar(*ins)

            numeric = numeric_gradient(f, Tensor(arrays[i]), eps).data
            worst = max(worst, rel_err(analytic, numeric))
    return CheckResult(kind, cases, worst, worst < tol)


def run_all(cases: int = 20, seed: int = 0) -> List[CheckResult]:
    return [check_op(kind, cases=cases, seed=seed) for kind in CASES]


def main(cases: int = 20, seed: int = 0) -> int:
    t0 = time.perf_counter()
    results = run_all(cases, seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.kind:<24} cases={r.cases} worst_rel_err={r.worst_rel_err:.2e}")
    print(f"{sum(r.passed for r in results)}/{len(results)} ops passed in {time.perf_counter() - t0:.1f}s")
    return 0 if all(r.passed for r in results) else 1
