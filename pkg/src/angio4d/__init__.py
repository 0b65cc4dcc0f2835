"""angio4d: sparse-view 4D X-ray angiography reconstruction.

Recovers a 3D+time attenuation scene from a handful of projection
sequences by decomposing it into a low-rank static tensorial field plus a
sparse dynamic neural field, trained end-to-end with differentiable
Beer-Lambert ray marching.  Ships a procedural 4D coronary phantom so the
whole pipeline is reproducible without licensed data.
"""

from .dataset import AngioDataset
from .fields import AxisEncoding, DynamicField, VMGrid, scene_eval
from .geometry import CArmPose, DetectorGrid, SceneBounds, default_pose_set
from .losses import LossWeights
from .metrics import EvalReport, dsc, evaluate, psnr, ssim, vessel_mask_from_mip
from .optim import Adam, Schedule
from .phantom import build_default_phantom, rasterize, synthesize_dataset
from .trainer import RunConfig, TrainState, train

__version__ = "0.1.0"

__all__ = [
    "AngioDataset",
    "AxisEncoding",
    "DynamicField",
    "VMGrid",
    "scene_eval",
    "CArmPose",
    "DetectorGrid",
    "SceneBounds",
    "default_pose_set",
    "LossWeights",
    "EvalReport",
    "dsc",
    "evaluate",
    "psnr",
    "ssim",
    "vessel_mask_from_mip",
    "Adam",
    "Schedule",
    "build_default_phantom",
    "rasterize",
    "synthesize_dataset",
    "RunConfig",
    "TrainState",
    "train",
    "__version__",
]
