from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from ..autograd import Tensor
from ..bank import BankSchema
from ..blocks import Backbone, BackboneSpec, LocalModule, TaskHead
from .data import Batch, Dataset


class TaskError(Exception):
    pass


@dataclass
class Task:
    """Binds one backbone layout, head family, bank schema, loss and metric.

    Subclasses fill in the task-specific pieces; the trainer only talks to this
    surface.
    """

    kind: str = "abstract"
    backbone_spec: Optional[BackboneSpec] = None
    fusion_kind: str = "identity"
    metric_name: str = ""
    options: Dict[str, Any] = field(default_factory=dict)

    # heads -----------------------------------------------------------------
    def genuine_head(self, backbone: Backbone, seed: int, dtype) -> TaskHead:
        raise NotImplementedError

    def aux_head(self, prefix: str, backbone: Backbone, module: LocalModule, channels: int, seed: int, dtype,
                 with_bank: bool) -> TaskHead:
        raise NotImplementedError

    def aux_fusion(self, prefix: str, backbone: Backbone, module: LocalModule, channels: int, schema: BankSchema,
                   dtype):
        """Fusion object for module's auxiliary, or None when the head fuses internally."""
        return None

    def tap_strides(self, backbone: Backbone) -> Dict[int, int]:
        """Block index -> stride of extra backbone features the genuine head reads."""
        return {}

    # bank ------------------------------------------------------------------
    def schema(self, backbone: Backbone, modules: List[LocalModule]) -> BankSchema:
        raise NotImplementedError

    def bank_value(self, tag: str, feature: Tensor) -> Tensor:
        return feature

    # objective -------------------------------------------------------------
    def loss(self, pred, batch: Batch) -> Tensor:
        raise NotImplementedError

    def evaluate_predictions(self, preds: List[Any], data: Dataset) -> float:
        raise NotImplementedError

    def output_shape(self, backbone: Backbone, input_shape) -> Any:
        raise NotImplementedError
