"""Pose/size-normalizing spatial transformers feeding a deep-supervised
UNet for 2D segmentation, built on a self-contained numpy autodiff core.
"""

__version__ = "0.1.0"

from .kernels import backend_name

__all__ = ["backend_name", "__version__"]
