"""Segmentation at any voxel spacing with a U-Net whose weights are generated
from the spacing by a hypernetwork."""

from .hypernet import HyperNet, HyperNetConfig, init_hypernet
from .model import SegModel, load_checkpoint, save_checkpoint
from .segnet import UNetConfig, dispatch, flatten, param_count, param_layout, unet_forward
from .synthdata import PhantomSpec, SpacingRange, generate_phantom
from .volume import LabelMap, Volume, resample_image, resample_labels

__version__ = "0.1.0"

__all__ = [
    "HyperNet", "HyperNetConfig", "init_hypernet",
    "SegModel", "load_checkpoint", "save_checkpoint",
    "UNetConfig", "dispatch", "flatten", "param_count", "param_layout", "unet_forward",
    "PhantomSpec", "SpacingRange", "generate_phantom",
    "LabelMap", "Volume", "resample_image", "resample_labels",
]
