"""Volumetric dilated-convolution segmentation (MeshNet) with a U-Net baseline, in numpy."""

from .models import build_meshnet, build_unet, parameter_count, receptive_field
from .volume import LabelVolume, SubvolumeRef, Volume, read_volume, write_volume

__all__ = [
    "Volume", "LabelVolume", "SubvolumeRef", "read_volume", "write_volume",
    "build_meshnet", "build_unet", "parameter_count", "receptive_field",
]
__version__ = "0.1.0"
