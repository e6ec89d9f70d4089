"""Multi-phase CT restoration: phantoms, degradation, a numpy autograd
engine, the fusion network, training, and evaluation metrics."""

__version__ = "0.1.0"

from .volume import ABDOMEN_WINDOW, PHASES, Mask, Volume, WindowSpec, make_phantom, window_hu  # noqa: E402
from .nifti import read_nifti, write_nifti  # noqa: E402
from .degrade import DegradationRecipe, DegradeConfig, apply_recipe, degrade_second_order  # noqa: E402
from .model import Checkpoint, PfnlConfig, enhance, forward, init_params, load_checkpoint, save_checkpoint, zero_params  # noqa: E402
from .loss import combined_loss, sobel3d  # noqa: E402
from .train import TrainConfig, parse_config, train  # noqa: E402
from .metrics import dice, nsd, psnr, ssim3d, wilcoxon_signed_rank  # noqa: E402

__all__ = [
    "ABDOMEN_WINDOW", "PHASES", "Mask", "Volume", "WindowSpec", "make_phantom", "window_hu",
    "read_nifti", "write_nifti",
    "DegradationRecipe", "DegradeConfig", "apply_recipe", "degrade_second_order",
    "Checkpoint", "PfnlConfig", "enhance", "forward", "init_params", "load_checkpoint", "save_checkpoint", "zero_params",
    "combined_loss", "sobel3d",
    "TrainConfig", "parse_config", "train",
    "dice", "nsd", "psnr", "ssim3d", "wilcoxon_signed_rank",
]
