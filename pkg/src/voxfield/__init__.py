"""voxfield: dense voxel radiance fields on the CPU.

Explicit density + RGB grids, differentiable volume rendering with
hand-derived gradients, linear-time ray-weight spread regularization,
fused Adam with zero-gradient skip, and bounded / forward-facing /
unbounded scene parameterizations.
"""

import os

# Pick the always-available threading layer up front; this also avoids the
# TBB version probe warning on import.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"

from .grid import VoxelGrid, create_grid, trilinear_sample, trilinear_scatter_grad, upscale, tv_add_grad
from .distortion import RaySampleBatch, distloss_forward, distloss_backward, distloss_oracle
from .optimizer import AdamState, adam_step, adam_reference_step
from .contraction import ContractionConfig, RigidTransform, contract, compute_alignment, forward_facing_warp

__all__ = [
    "VoxelGrid",
    "create_grid",
    "trilinear_sample",
    "trilinear_scatter_grad",
    "upscale",
    "tv_add_grad",
    "RaySampleBatch",
    "distloss_forward",
    "distloss_backward",
    "distloss_oracle",
    "AdamState",
    "adam_step",
    "adam_reference_step",
    "ContractionConfig",
    "RigidTransform",
    "contract",
    "compute_alignment",
    "forward_facing_warp",
]
