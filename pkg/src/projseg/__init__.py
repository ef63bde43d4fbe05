"""Volumetric segmentation through learned projection space.

The pipeline projects a 3-d volume onto a fan of 2-d views with a
mask-weighted line-integral transform, segments the views with small
U-nets, lifts the per-view predictions back to 3-d with a learnable
filtered backprojection, and fuses several scan orientations into one
volumetric mask.  Everything is differentiable, so the whole chain can
be trained end to end on synthetic phantoms.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, grad_check

__all__ = ["Tensor", "grad_check", "__version__"]
