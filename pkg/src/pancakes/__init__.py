"""Gaussian splatting with depth supervision and normal-aligned ("pancaked") Gaussians."""
import os

import numba

# the default TBB layer is not installed everywhere; workqueue always is
numba.config.THREADING_LAYER = os.environ.get("NUMBA_THREADING_LAYER", "workqueue")

from .errors import (ConfigurationError, ContractViolation, DegenerateCovarianceError,  # noqa: E402
                     DegenerateInputError, InsufficientPointsError, NoReliableNormalError,
                     NumericalError, PancakeError)
from .scene import Camera, GaussianCloud, init_from_pointcloud, load_cloud_ply, save_cloud_ply  # noqa: E402
from .normals import NormalField, estimate_normals, nearest_normal  # noqa: E402
from .rasterizer import RenderOutput, backward, render, render_normals_pass, set_num_threads  # noqa: E402
from .reference import render_reference  # noqa: E402
from .losses import LossBreakdown, LossWeights, total_loss  # noqa: E402
from .metrics import psnr, ssim, depth_mse  # noqa: E402
from .data import SceneDataset, load_dataset, split_8_1, synth_scene  # noqa: E402
from .trainer import TrainConfig, evaluate, train  # noqa: E402

if os.environ.get("PANCAKE_THREADS"):
    set_num_threads(int(os.environ["PANCAKE_THREADS"]))

__version__ = "0.1.0"
