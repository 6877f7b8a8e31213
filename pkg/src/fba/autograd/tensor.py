"""Tensors, the recording tape, and reverse-mode backward.

Every op that touches a tensor requiring gradient appends a :class:`Node` to the
active :class:`Tape`. Each node carries the number of activation elements it keeps
alive for its backward rule, so the tape always knows how much activation memory
the current graph pins. ``backward`` frees every node it traverses.
"""
from __future__ import annotations

import itertools
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
_leaf_counter = itertools.count()


class AutogradError(Exception):
    """Base class for engine errors."""


class ConstructionError(AutogradError):
    pass


class ValidationError(AutogradError):
    pass


class ContractError(AutogradError):
    pass


class LifecycleError(AutogradError):
    pass


class _State(threading.local):
    def __init__(self) -> None:
        self.tapes: List["Tape"] = []
        self.default_tape: Optional["Tape"] = None
        self.grad_enabled = True


_state = _State()
DEBUG = os.environ.get("FBA_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Toggle finite-value checks after every forward op."""
    global DEBUG
    DEBUG = bool(flag)


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(_DTYPES[dtype])
        except KeyError:
            raise ContractError(f"unknown dtype {dtype!r}; expected one of {sorted(_DTYPES)}") from None
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dt}")
    return dt


class Tensor:
    """Immutable n-d array that may be attached to a recording tape.

    ``data`` is never modified in place. Parameters are rebound to fresh arrays by
    the optimizer, which leaves arrays saved by earlier graphs intact.
    """

    __slots__ = ("data", "node", "requires_grad", "detached", "name", "__weakref__")

    def __init__(self, data: np.ndarray, node: Optional["Node"] = None, requires_grad: bool = False,
                 detached: bool = False, name: Optional[str] = None):
        self.data = data
        self.node = node
        self.requires_grad = requires_grad
        self.detached = detached
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def tracked(self) -> bool:
        """True if gradient can flow into this tensor."""
        return self.node is not None or self.requires_grad

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.detached:
            flags.append("detached")
        if self.node is not None:
            flags.append(f"node={self.node.kind}#{self.node.id}")
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{', ' if flags else ''}{', '.join(flags)})"


def tensor_new(shape: Sequence[int], values, requires_grad: bool = False, dtype="f64",
               name: Optional[str] = None) -> Tensor:
    """Build a leaf tensor from a shape and a row-major value buffer."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ConstructionError(f"shape must be a non-empty list of positive sizes, got {list(shape)}")
    arr = np.asarray(values, dtype=resolve_dtype(dtype)).reshape(-1)
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise ConstructionError(f"shape {list(shape)} needs {expected} values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("tensor values must be finite")
    return leaf(arr.reshape(shape), requires_grad=requires_grad, name=name)


def leaf(data: np.ndarray, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    """Wrap an array as a leaf; requires_grad leaves are registered on the active tape."""
    data = np.asarray(data)
    if requires_grad and name is None:
        name = f"leaf{next(_leaf_counter)}"
    t = Tensor(data, requires_grad=requires_grad, name=name)
    if requires_grad and _state.tapes:
        _state.tapes[-1].leaves.append(t)
    return t


def constant(data, dtype=None) -> Tensor:
    """Untracked tensor (targets, masks, inputs)."""
    arr = np.asarray(data) if dtype is None else np.asarray(data, dtype=resolve_dtype(dtype))
    return Tensor(arr)


def detach(t: Tensor) -> Tensor:
    """Same values, no tape node, never receives or forwards gradient."""
    return Tensor(t.data, node=None, requires_grad=False, detached=True)


@dataclass(eq=False)
class Node:
    id: int
    kind: str
    inputs: List[Tensor]
    attrs: Dict[str, Any]
    saved: Dict[str, Any]
    retained: int
    backward_fn: Callable
    tape: "Tape"
    freed: bool = False


class Tape:
    """Ordered record of ops plus a running count of retained activation elements.

    Use as a context manager to make it the active tape of the current thread;
    leaving the context releases whatever is still live.
    """

    def __init__(self, trace: Optional["MemoryTrace"] = None):
        self.nodes: List[Node] = []
        self.leaves: List[Tensor] = []
        self.retained_total = 0
        self.peak = 0
        self.trace = trace
        self._ids = itertools.count()
        self._thread = threading.get_ident()

    def __enter__(self) -> "Tape":
        if threading.get_ident() != self._thread:
            raise LifecycleError("a tape is confined to the thread that created it")
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.remove(self)
        self.release()

    def record(self, kind, inputs, attrs, saved, retained, backward_fn) -> Node:
        node = Node(next(self._ids), kind, list(inputs), attrs, saved, int(retained), backward_fn, self)
        self.nodes.append(node)
        self._change(node.retained)
        return node

    def free(self, nodes) -> int:
        released = 0
        for n in nodes:
            if not n.freed:
                n.freed = True
                n.saved = {}
                n.inputs = []
                released += n.retained
        if released:
            self._change(-released)
        return released

    def release(self) -> None:
        self.free(self.nodes)
        self.nodes = [n for n in self.nodes if not n.freed]

    def live_nodes(self) -> List[Node]:
        return [n for n in self.nodes if not n.freed]

    def _change(self, delta: int) -> None:
        self.retained_total += delta
        if self.retained_total > self.peak:
            self.peak = self.retained_total
        if self.trace is not None:
            self.trace.sample(self.retained_total)


def active_tape() -> Tape:
    if _state.tapes:
        return _state.tapes[-1]
    if _state.default_tape is None:
        _state.default_tape = Tape()
    return _state.default_tape


def grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording (inference, bank-filling forward)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@dataclass
class RetainedStats:
    total: int
    per_node: Dict[int, int] = field(default_factory=dict)


def retained_activation_stats(tape: Tape) -> RetainedStats:
    per_node = {n.id: n.retained for n in tape.nodes if not n.freed}
    return RetainedStats(total=sum(per_node.values()), per_node=per_node)


class GradMap(dict):
    """Parameter name -> gradient tensor (same shape as the parameter)."""

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}


def backward(loss: Tensor) -> GradMap:
    """Reverse pass from a scalar loss; frees every node it visits."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = GradMap()
    if loss.node is None:
        if loss.requires_grad:
            grads[loss.name] = Tensor(np.ones_like(loss.data))
        return grads
    if loss.node.freed:
        raise LifecycleError("backward through a freed tape segment")

    # DFS for the reachable subgraph; node ids are topologically ordered per tape
    reachable: Dict[int, Node] = {}
    stack = [loss.node]
    while stack:
        n = stack.pop()
        if id(n) in reachable:
            continue
        if n.freed:
            raise LifecycleError(f"node {n.kind}#{n.id} was already freed")
        reachable[id(n)] = n
        for t in n.inputs:
            if t.node is not None:
                stack.append(t.node)
    order = sorted(reachable.values(), key=lambda n: n.id, reverse=True)

    node_grads: Dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.data)}
    leaf_grads: Dict[int, np.ndarray] = {}
    leaf_refs: Dict[int, Tensor] = {}
    for n in order:
        g = node_grads.pop(id(n), None)
        if g is None:
            continue
        in_grads = n.backward_fn(g, n.saved, n.attrs)
        for t, gi in zip(n.inputs, in_grads):
            if gi is None or not t.tracked:
                continue
            if t.node is not None:
                key = id(t.node)
                if key in node_grads:
                    node_grads[key] = node_grads[key] + gi
                else:
                    node_grads[key] = gi
            else:
                key = id(t)
                leaf_refs[key] = t
                leaf_grads[key] = leaf_grads[key] + gi if key in leaf_grads else gi

    for key, g in leaf_grads.items():
        t = leaf_refs[key]
        if t.name in grads:
            raise ContractError(f"two leaves share the name {t.name!r}")
        grads[t.name] = Tensor(np.asarray(g, dtype=t.data.dtype).reshape(t.shape))

    loss.node.tape.free(order)
    return grads


def numeric_gradient(f: Callable[[Tensor], Tensor], t: Tensor, eps: float = 1e-5) -> Tensor:
    """Central finite differences of a scalar function, one element at a time."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(t.data, dtype=t.data.dtype, copy=True)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    with no_grad():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = float(f(Tensor(base.copy())).data)
            flat[k] = orig - eps
            fm = float(f(Tensor(base.copy())).data)
            flat[k] = orig
            out[k] = (fp - fm) / (2 * eps)
    return Tensor(out.reshape(t.shape))


class MemoryTrace:
    """Samples of retained-element counts, tagged with the trainer's current context.

    The trainer updates ``module``, ``bank`` and ``boundary`` as it moves through a
    step; every tape change appends one sample.
    """

    def __init__(self, mode: str = ""):
        self.mode = mode
        self.module = -1
        self.bank = 0
        self.boundary = 0
        self.samples: List[tuple] = []
        self._lock = threading.Lock()

    def sample(self, retained: int) -> None:
        with self._lock:
            self.samples.append((self.module, int(retained), int(self.bank), int(self.boundary)))

    def mark(self, retained: int = 0) -> None:
        """Record a sample outside tape activity (bank filled, boundary handed off)."""
        self.sample(retained)
