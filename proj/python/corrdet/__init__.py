"""Few-shot object detection with correlational aggregation."""

import torch as _torch  # loads the libtorch shared libraries the extension links against

from ._core import (
    CorrdetError,
    Predictor,
    average_precision,
    class_id,
    class_names,
    evaluate_map,
    generate_scene,
    giou,
    hungarian_match,
    iou,
    read_image,
    resolve_config,
    task_encodings,
    write_image,
)

__all__ = [
    "CorrdetError",
    "Predictor",
    "average_precision",
    "class_id",
    "class_names",
    "evaluate_map",
    "generate_scene",
    "giou",
    "hungarian_match",
    "iou",
    "read_image",
    "resolve_config",
    "task_encodings",
    "write_image",
]
