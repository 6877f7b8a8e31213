from .base import Task, TaskError
from .classification import (
    ClassificationTask,
    ClsHead,
    accuracy,
    build_classification_task,
    gen_classification_data,
)
from .data import Batch, DataFormatError, Dataset, load_cifar10_binary, read_ppm, write_ppm
from .detection import (
    DetectionTask,
    LocalFPN,
    build_detection_task,
    center_cell,
    decode,
    f1_score,
    gen_detection_data,
    iou,
    local_fpn_forward,
    render_targets,
)
from .sr import SRHead, SRTask, box_downsample, build_sr_task, gen_sr_data, psnr

TASK_KINDS = ("classification", "detection", "super_resolution")

__all__ = [
    "Task", "TaskError", "ClassificationTask", "ClsHead", "accuracy", "build_classification_task",
    "gen_classification_data", "Batch", "DataFormatError", "Dataset", "load_cifar10_binary", "read_ppm",
    "write_ppm", "DetectionTask", "LocalFPN", "build_detection_task", "center_cell", "decode", "f1_score",
    "gen_detection_data", "iou", "local_fpn_forward", "render_targets", "SRHead", "SRTask",
    "box_downsample", "build_sr_task", "gen_sr_data", "psnr", "TASK_KINDS",
]
