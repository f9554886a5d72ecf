"""voxel-fm - self-supervised 3D volume encoders and their evaluation."""

__version__ = "0.1.0"
__author__ = "voxel-fm developers"

__all__ = ["__version__"]
