"""Dataset layer: record types, 3-D to 2-D projection, instruction
generation, synthetic scene building, and manifest loading."""

from langrasp.data.types import (
    CameraView,
    GenericSample,
    Grasp6D,
    InstructionSample,
    PartAnnotation,
)
from langrasp.data.parts import (
    assign_grasps_to_parts,
    project_grasp_to_rect,
    project_part_to_mask,
    project_points,
)

__all__ = [
    "CameraView",
    "GenericSample",
    "Grasp6D",
    "InstructionSample",
    "PartAnnotation",
    "assign_grasps_to_parts",
    "project_grasp_to_rect",
    "project_part_to_mask",
    "project_points",
]
