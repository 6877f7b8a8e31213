"""Local (gradient-isolated) and end-to-end training steps, optimizers, schedule, memory accounting.

A local step has two phases. Phase 1 runs the backbone forward without
recording, detaching every module boundary, and fills the feature bank. Phase 2
trains each module on its own tape: the module forward is recomputed from its
detached input, the auxiliary produces a prediction, and the backward is confined
to that module's backbone and auxiliary parameters. The tape is freed before the
next module starts, which is what bounds the activation peak.
"""
from __future__ import annotations

import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autograd import GradMap, MemoryTrace, Tape, Tensor, backward, detach, no_grad
from .bank import BankSchema, FeatureBank
from .blocks import (
    AuxiliaryNetwork,
    Backbone,
    LocalModule,
    Params,
    build_aux,
    build_backbone,
    forward_module,
    partition,
)
from .tasks.base import Task
from .tasks.data import Batch, Dataset

MODES = ("e2e", "local_fba", "local_nobank")
OPTIMIZERS = ("sgd", "sgd_nesterov", "adam")


class TrainerError(Exception):
    pass


class GradientLeakError(TrainerError):
    pass


class DivergenceError(TrainerError):
    def __init__(self, module: int, value: float):
        super().__init__(f"non-finite loss {value} in module {module}")
        self.module = module


class OwnershipError(TrainerError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class OptimizerConfig:
    kind: str = "sgd_nesterov"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class Schedule:
    initial_lr: float
    total_steps: int
    warmup_steps: int = 5


@dataclass
class TrainerConfig:
    mode: str = "local_fba"
    K: int = 4
    eta_l: float = 0.1
    eta_a: Optional[float] = None  # defaults to eta_l
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    warmup_steps: int = 5
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    shared_head: bool = False
    channel_reduction: float = 1
    dtype: str = "f32"
    parallel: bool = False
    threads: Optional[int] = None

    def __post_init__(self):
        if self.eta_a is None:
            self.eta_a = self.eta_l

    def validate(self, total_steps: Optional[int] = None) -> None:
        if self.mode not in MODES:
            raise TrainerError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer.kind not in OPTIMIZERS:
            raise TrainerError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer.kind!r}")
        if not (self.eta_l > 0 and self.eta_a > 0):
            raise TrainerError("learning rates must be positive")
        if self.K < 1:
            raise TrainerError("K must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise TrainerError("batch_size and epochs must be >= 1")
        if self.warmup_steps < 0 or (total_steps is not None and self.warmup_steps >= total_steps):
            raise TrainerError(f"warmup_steps ({self.warmup_steps}) must be below total steps ({total_steps})")
        if self.channel_reduction < 1:
            raise TrainerError("channel_reduction must be >= 1")


# ---------------------------------------------------------------------------
# optimizer and schedule


class OptimizerState:
    """Momentum or Adam moment buffers, keyed by parameter name."""

    def __init__(self):
        self.buffers: Dict[str, Dict[str, np.ndarray]] = {}
        self.steps: Dict[str, int] = {}

    def buffer(self, name: str, key: str, like: np.ndarray) -> np.ndarray:
        slot = self.buffers.setdefault(name, {})
        if key not in slot:
            slot[key] = np.zeros_like(like)
        return slot[key]


def optimizer_step(params: Params, grads: GradMap, state: OptimizerState, kind: str, lr: float,
                   weight_decay: float = 0.0, momentum: float = 0.9, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> None:
    """Update ``params`` in place by rebinding each tensor's array.

    sgd / sgd_nesterov: ``v <- mu v + (g + wd w)``; ``w <- w - lr (g + wd w + mu v)``.
    adam: bias-corrected first/second moments, L2 term folded into the gradient.
    """
    if lr < 0:
        raise TrainerError("learning rate must be non-negative")
    mu = momentum if kind == "sgd_nesterov" else (momentum if kind == "sgd" and momentum else 0.0)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = g.data if isinstance(g, Tensor) else g
        w = p.data
        if g.shape != w.shape:
            raise TrainerError(f"gradient shape {g.shape} does not match parameter {name} {w.shape}")
        d = g + weight_decay * w if weight_decay else g
        if kind in ("sgd", "sgd_nesterov"):
            if mu:
                v = mu * state.buffer(name, "v", w) + d
                state.buffers[name]["v"] = v
                new = w - lr * (d + mu * v)
            else:
                new = w - lr * d
        elif kind == "adam":
            t = state.steps.get(name, 0) + 1
            state.steps[name] = t
            m = beta1 * state.buffer(name, "m", w) + (1 - beta1) * d
            v = beta2 * state.buffer(name, "v", w) + (1 - beta2) * d * d
            state.buffers[name]["m"], state.buffers[name]["v"] = m, v
            mhat = m / (1 - beta1 ** t)
            vhat = v / (1 - beta2 ** t)
            new = w - lr * mhat / (np.sqrt(vhat) + eps)
        else:
            raise TrainerError(f"unknown optimizer {kind!r}")
        p.data = new.astype(w.dtype, copy=False)


def _opt_step(params, grads, state, cfg: TrainerConfig, lr):
    o = cfg.optimizer
    optimizer_step(params, grads, state, o.kind, lr, o.weight_decay, o.momentum, o.beta1, o.beta2, o.eps)


def cosine_lr(step: int, schedule: Schedule) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise TrainerError(f"step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup_steps
    if w and step < w:
        return schedule.initial_lr * step / w
    span = schedule.total_steps - w
    progress = (step - w) / span if span > 0 else 1.0
    return 0.5 * schedule.initial_lr * (1 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# network assembly


class Network:
    """Backbone, genuine head, and (in local modes) partition plus auxiliaries."""

    def __init__(self, task: Task, mode: str = "local_fba", K: int = 4, seed: int = 0, dtype="f32",
                 shared_head: bool = False, channel_reduction: float = 1):
        if mode not in MODES:
            raise TrainerError(f"unknown mode {mode!r}")
        self.task = task
        self.mode = mode
        self.seed = seed
        self.dtype = dtype
        self.backbone: Backbone = build_backbone(task.backbone_spec, seed, dtype)
        self.head = task.genuine_head(self.backbone, seed, dtype)
        self.K = 1 if mode == "e2e" else K
        self.modules: List[LocalModule] = partition(self.backbone, self.K)
        self.tap_strides = task.tap_strides(self.backbone)
        use_bank = mode == "local_fba"
        self.schema: BankSchema = task.schema(self.backbone, self.modules) if use_bank else \
            BankSchema(task.kind, "identity")
        self.auxes: List[AuxiliaryNetwork] = []
        if mode != "e2e":
            for m in self.modules:
                is_last = m.index == self.K - 1
                keys = self.schema.keys_for(m.index)

                def head_factory(prefix, ch, m=m):
                    return task.aux_head(prefix, self.backbone, m, ch, seed, dtype, use_bank)

                def fusion_factory(prefix, ch, m=m):
                    return task.aux_fusion(prefix, self.backbone, m, ch, self.schema, dtype)

                aux = build_aux(self.backbone, m, head_factory, fusion_factory if use_bank else None,
                                channel_reduction, seed, dtype, is_last=is_last, genuine_head=self.head,
                                shared_head=shared_head,
                                fusion_schema={"kind": self.schema.fusion, "keys": keys})
                self.auxes.append(aux)
        self._check_disjoint(shared_head)

    def _check_disjoint(self, shared_head: bool) -> None:
        seen: Dict[str, str] = {}
        head_names = set(self.head.params)
        for j in range(len(self.auxes)):
            for name in list(self.theta(j)) + list(self.gamma(j)):
                owner = f"module{j}"
                if name in seen and seen[name] != owner:
                    if shared_head and name in head_names:
                        continue
                    raise TrainerError(f"parameter {name} owned by both {seen[name]} and {owner}")
                seen[name] = owner

    # parameter views ---------------------------------------------------------
    def theta(self, j: int) -> Params:
        return self.modules[j].params

    def gamma(self, j: int) -> Params:
        return self.auxes[j].params

    def deployed_params(self) -> Params:
        out = dict(self.backbone.params)
        out.update(self.head.params)
        return out

    def all_params(self) -> Params:
        out = self.deployed_params()
        for a in self.auxes:
            out.update(a.params)
        return out

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.all_params().items()}

    # forward -----------------------------------------------------------------
    def head_context(self, taps: Dict[int, Tensor]) -> Dict[int, Tensor]:
        return {s: taps[b] for b, s in self.tap_strides.items() if b in taps}

    def deployed_forward(self, x: Tensor):
        taps: Dict[int, Tensor] = {}
        out = self.backbone.forward(x, taps)
        return self.head.forward(out, self.head_context(taps))

    def predict(self, x: Tensor):
        with no_grad():
            return self.deployed_forward(x)

    def evaluate(self, data: Dataset, batch_size: int = 64) -> float:
        preds = [self.predict(b.inputs) for b in data.batches(batch_size)]
        return self.task.evaluate_predictions(preds, data)


# ---------------------------------------------------------------------------
# steps


@dataclass
class StepMetrics:
    local_losses: List[float]
    head_loss: float
    lr: float
    peak_retained: int
    module_peaks: List[int] = field(default_factory=list)


def _finite(loss: Tensor, module: int) -> float:
    v = float(loss.data)
    if not math.isfinite(v):
        raise DivergenceError(module, v)
    return v


def _check_isolation(grads: GradMap, allowed: Params, module: int) -> None:
    foreign = set(grads) - set(allowed)
    if foreign:
        raise GradientLeakError(f"module {module} loss reached foreign parameters: {sorted(foreign)[:5]}")


def _lrs(cfg: TrainerConfig, lr: float):
    return lr, lr * (cfg.eta_a / cfg.eta_l)


def e2e_train_step(net: Network, batch: Batch, opt_state: OptimizerState, cfg: TrainerConfig, lr: float,
                   trace: Optional[MemoryTrace] = None, update: bool = True) -> StepMetrics:
    """One forward over the whole network, one backward, one update."""
    if cfg.mode != "e2e":
        raise TrainerError("e2e_train_step needs mode 'e2e'")
    if trace is not None:
        trace.module, trace.bank, trace.boundary = 0, 0, 0
    with Tape(trace) as tape:
        pred = net.deployed_forward(batch.inputs)
        loss = net.task.loss(pred, batch)
        value = _finite(loss, 0)
        grads = backward(loss)
        peak = tape.peak
    if update:
        lr_l, lr_a = _lrs(cfg, lr)
        _opt_step(net.backbone.params, grads, opt_state, cfg, lr_l)
        _opt_step(net.head.params, grads, opt_state, cfg, lr_a)
    return StepMetrics([value], value, lr, peak, [peak])


@dataclass
class Phase1Result:
    boundaries: List[Tensor]
    taps: Dict[int, Tensor]  # stride -> detached stage-end feature


def phase1(net: Network, batch: Batch, bank: Optional[FeatureBank], step: int, keep_boundaries: bool,
           keep_taps: bool) -> Phase1Result:
    """Unrecorded forward over the detached chain; fills the bank."""
    res = Phase1Result([detach(batch.inputs)], {})
    regs = net.schema.registrations if bank is not None else []
    last_needed = max([k.position[0] for k in regs], default=-1)
    if keep_boundaries:
        last_needed = net.K - 1
    if keep_taps and net.tap_strides:
        last_needed = max(last_needed, net.K - 2)
    x = res.boundaries[0]
    with no_grad():
        for m in net.modules[:last_needed + 1]:
            taps: Dict[int, Tensor] = {}
            x = detach(forward_module(m, x, taps))
            for key in net.schema.produced_by(m.index) if bank is not None else []:
                feat = taps[m.blocks[key.position[1]].index]
                bank.register(key.position, key.tag, net.task.bank_value(key.tag, feat), step)
            if keep_taps:
                for b in m.blocks:
                    if b.index in net.tap_strides:
                        res.taps[net.tap_strides[b.index]] = detach(taps[b.index])
            if keep_boundaries:
                res.boundaries.append(x)
    if bank is not None:
        bank.freeze()
    return res


def _module_update(net: Network, j: int, x: Tensor, batch: Batch, bank: Optional[FeatureBank],
                   tap_cache: Dict[int, Tensor], opt_state: OptimizerState, cfg: TrainerConfig, lr: float,
                   trace: Optional[MemoryTrace], update: bool):
    """Recompute module j from its detached input, run its auxiliary, backward, update.

    Returns (loss, tape peak, grads, detached output, detached stage-end taps).
    """
    m, aux = net.modules[j], net.auxes[j]
    with Tape(trace) as tape:
        taps: Dict[int, Tensor] = {}
        out = forward_module(m, x, taps)
        if aux.is_genuine_head:
            ctx = net.head_context(taps)
            extra = {e.stride: e.tensor for e in bank.slice(j)} if bank is not None else tap_cache
            for s, t in extra.items():
                ctx.setdefault(s, t)
            pred = aux.head.forward(out, ctx)
        else:
            pred = aux.forward(out, bank.slice(j) if bank is not None else [])
        loss = net.task.loss(pred, batch)
        value = _finite(loss, j)
        grads = backward(loss)
        peak = tape.peak
    own = dict(net.theta(j))
    own.update(net.gamma(j))
    _check_isolation(grads, own, j)
    if update:
        lr_l, lr_a = _lrs(cfg, lr)
        _opt_step(net.theta(j), grads, opt_state, cfg, lr_l)
        _opt_step(net.gamma(j), grads, opt_state, cfg, lr_a)
    new_taps = {net.tap_strides[b]: detach(t) for b, t in taps.items() if b in net.tap_strides}
    return value, peak, grads, detach(out), new_taps


def _begin_step(net: Network, batch: Batch, bank: Optional[FeatureBank], cfg: TrainerConfig, step: int,
                parallel: bool) -> Phase1Result:
    if cfg.mode not in ("local_fba", "local_nobank"):
        raise TrainerError("local training needs mode local_fba or local_nobank")
    if cfg.mode == "local_fba" and bank is None:
        raise TrainerError("local_fba needs a feature bank")
    use_bank = cfg.mode == "local_fba"
    if use_bank:
        bank.reset(step)
    if use_bank or parallel:
        return phase1(net, batch, bank if use_bank else None, step, keep_boundaries=parallel,
                      keep_taps=parallel and not use_bank)
    return Phase1Result([detach(batch.inputs)], {})


def local_train_step(net: Network, batch: Batch, bank: Optional[FeatureBank], opt_states: Sequence[OptimizerState],
                     cfg: TrainerConfig, lr: float, step: int = 0, trace: Optional[MemoryTrace] = None,
                     update: bool = True, grad_log: Optional[list] = None) -> StepMetrics:
    """Gradient-isolated update of every module with sequential phase 2.

    Only one module tape is alive at a time; the held boundary is the current
    module's detached input. In no-bank mode the stage-end features needed by the
    deployed head of the last module are carried forward as detached tensors.
    """
    _begin_step(net, batch, bank, cfg, step, parallel=False)
    use_bank = cfg.mode == "local_fba"
    bank_elems = bank.element_count() if use_bank else 0
    x = detach(batch.inputs)
    tap_cache: Dict[int, Tensor] = {}
    losses, peaks, totals = [], [], []
    for j in range(net.K):
        boundary = (x.size if j > 0 else 0) + sum(t.size for t in tap_cache.values())
        if trace is not None:
            trace.module, trace.bank, trace.boundary = j, bank_elems, boundary
            trace.mark(0)
        value, peak, grads, out, taps = _module_update(net, j, x, batch, bank if use_bank else None, tap_cache,
                                                       opt_states[j], cfg, lr, trace, update)
        if grad_log is not None:
            grad_log.append(grads)
        losses.append(value)
        peaks.append(peak)
        totals.append(peak + bank_elems + boundary)
        if not use_bank:
            tap_cache.update(taps)
        x = out
    if use_bank:
        bank.reset(step + 1)
    return StepMetrics(losses, losses[-1], lr, max(totals), peaks)


def resolve_workers(cfg: TrainerConfig, K: int) -> int:
    env = os.environ.get("FBA_THREADS")
    n = cfg.threads if cfg.threads else (os.cpu_count() or 1)
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise TrainerError(f"FBA_THREADS must be an integer, got {env!r}") from None
        if cap < 1:
            raise TrainerError("FBA_THREADS must be >= 1")
        n = min(n, cap)
    return max(1, min(n, K))


def parallel_phase2(net: Network, batch: Batch, bank: Optional[FeatureBank], opt_states: Sequence[OptimizerState],
                    cfg: TrainerConfig, lr: float, step: int = 0, workers: Optional[int] = None,
                    update: bool = True) -> StepMetrics:
    """Phase 1 on the calling thread, then one job per module on a thread pool.

    Each job owns its module's backbone parameters, auxiliary parameters and
    optimizer state; boundaries and bank entries are read-only detached snapshots.
    """
    res = _begin_step(net, batch, bank, cfg, step, parallel=True)
    use_bank = cfg.mode == "local_fba"
    owners: Dict[str, int] = {}
    for j in range(net.K):
        for name in list(net.theta(j)) + list(net.gamma(j)):
            if owners.setdefault(name, j) != j:
                raise OwnershipError(f"parameter {name} is owned by modules {owners[name]} and {j}")
    if len({id(s) for s in opt_states[:net.K]}) != net.K:
        raise OwnershipError("each module needs its own optimizer state")
    n = workers if workers is not None else resolve_workers(cfg, net.K)
    n = max(1, min(n, net.K))

    def job(j):
        return _module_update(net, j, res.boundaries[j], batch, bank if use_bank else None, res.taps,
                              opt_states[j], cfg, lr, None, update)

    if n == 1:
        results = [job(j) for j in range(net.K)]
    else:
        with ThreadPoolExecutor(max_workers=n) as ex:
            results = list(ex.map(job, range(net.K)))
    losses = [r[0] for r in results]
    peaks = [r[1] for r in results]
    bank_elems = bank.element_count() if use_bank else 0
    held = sum(b.size for b in res.boundaries[1:]) + sum(t.size for t in res.taps.values())
    if use_bank:
        bank.reset(step + 1)
    # n tapes may be alive at once
    concurrent = sum(sorted(peaks, reverse=True)[:n])
    return StepMetrics(losses, losses[-1], lr, concurrent + bank_elems + held, peaks)


# ---------------------------------------------------------------------------
# memory


@dataclass
class MemoryReport:
    mode: str
    peak_retained_elements: int
    per_module_peaks: List[int]
    bank_elements: int
    boundary_elements: int

    def to_dict(self) -> dict:
        return asdict(self)


def measure_peak_memory(trace: MemoryTrace) -> MemoryReport:
    """Max over samples of tape + bank + boundary elements alive together."""
    if not trace.samples:
        raise TrainerError("empty memory trace")
    per: Dict[int, int] = {}
    peak = bank = boundary = 0
    for module, retained, b, bd in trace.samples:
        if module >= 0:
            per[module] = max(per.get(module, 0), retained)
        peak = max(peak, retained + b + bd)
        bank = max(bank, b)
        boundary = max(boundary, bd)
    modules = [per[k] for k in sorted(per)]
    return MemoryReport(trace.mode, peak, modules, bank, boundary)


def profile_step(net: Network, batch: Batch, cfg: TrainerConfig) -> MemoryReport:
    """Run one step with zero learning rate under a trace; parameters are untouched."""
    trace = MemoryTrace(cfg.mode)
    if cfg.mode == "e2e":
        e2e_train_step(net, batch, OptimizerState(), cfg, 0.0, trace=trace, update=False)
    else:
        bank = FeatureBank(net.schema) if cfg.mode == "local_fba" else None
        states = [OptimizerState() for _ in range(net.K)]
        local_train_step(net, batch, bank, states, cfg, 0.0, trace=trace, update=False)
    return measure_peak_memory(trace)


# ---------------------------------------------------------------------------
# driver


class Trainer:
    """Owns a network, its optimizer states and the bank; runs epochs."""

    def __init__(self, task: Task, cfg: TrainerConfig):
        self.task = task
        self.cfg = cfg
        self.net = Network(task, cfg.mode, cfg.K, cfg.seed, cfg.dtype, cfg.shared_head, cfg.channel_reduction)
        self.bank = FeatureBank(self.net.schema) if cfg.mode == "local_fba" else None
        self.opt_states = [OptimizerState() for _ in range(self.net.K)]
        self.step = 0

    def schedule(self, steps_per_epoch: int) -> Schedule:
        total = steps_per_epoch * self.cfg.epochs
        self.cfg.validate(total)
        return Schedule(self.cfg.eta_l, total, self.cfg.warmup_steps)

    def train_step(self, batch: Batch, lr: float) -> StepMetrics:
        cfg = self.cfg
        if cfg.mode == "e2e":
            m = e2e_train_step(self.net, batch, self.opt_states[0], cfg, lr)
        elif cfg.parallel:
            m = parallel_phase2(self.net, batch, self.bank, self.opt_states, cfg, lr, self.step)
        else:
            m = local_train_step(self.net, batch, self.bank, self.opt_states, cfg, lr, self.step)
        self.step += 1
        return m

    def fit(self, train, test: Optional[Dataset] = None, on_epoch=None, eval_every: int = 1):
        """Train for ``cfg.epochs``; ``on_epoch(epoch, row)`` receives per-epoch summaries.

        ``train`` is a Dataset or a callable ``epoch -> Dataset`` (a fresh synthetic
        draw per epoch); every epoch must have the same size.
        """
        cfg = self.cfg
        draw = train if callable(train) else (lambda epoch: train)
        first = draw(0)
        spe = math.ceil(len(first) / cfg.batch_size)
        sched = self.schedule(spe)
        history = []
        for epoch in range(cfg.epochs):
            data = first if epoch == 0 else draw(epoch)
            if math.ceil(len(data) / cfg.batch_size) != spe:
                raise TrainerError("every epoch must yield the same number of batches")
            losses, heads, lr = [], [], 0.0
            for batch in data.batches(cfg.batch_size, shuffle_seed=cfg.seed * 100003 + epoch):
                lr = cosine_lr(self.step, sched)
                m = self.train_step(batch, lr)
                losses.append(m.local_losses)
                heads.append(m.head_loss)
            row = {
                "epoch": epoch,
                "lr": lr,
                "module_losses": [float(np.mean(c)) for c in zip(*losses)],
                "loss": float(np.mean(heads)),
            }
            last = epoch == cfg.epochs - 1
            if test is not None and (last or (epoch + 1) % eval_every == 0):
                row["train_metric"] = self.net.evaluate(data)
                row["test_metric"] = self.net.evaluate(test)
            history.append(row)
            if on_epoch is not None:
                on_epoch(epoch, row)
        return history
