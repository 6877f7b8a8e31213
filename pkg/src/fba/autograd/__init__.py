from .tensor import (
    AutogradError,
    ConstructionError,
    ContractError,
    GradMap,
    LifecycleError,
    MemoryTrace,
    Node,
    RetainedStats,
    Tape,
    Tensor,
    ValidationError,
    active_tape,
    backward,
    constant,
    detach,
    leaf,
    no_grad,
    numeric_gradient,
    resolve_dtype,
    retained_activation_stats,
    set_debug,
    tensor_new,
)
from .ops import OpError, UnsupportedOpError, forward_op, op_kinds
from . import ops as F

__all__ = [
    "AutogradError", "ConstructionError", "ContractError", "GradMap", "LifecycleError", "MemoryTrace",
    "Node", "RetainedStats", "Tape", "Tensor", "ValidationError", "active_tape", "backward", "constant",
    "detach", "leaf", "no_grad", "numeric_gradient", "resolve_dtype", "retained_activation_stats",
    "set_debug", "tensor_new", "OpError", "UnsupportedOpError", "forward_op", "op_kinds", "F",
]
