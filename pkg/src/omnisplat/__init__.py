"""Differentiable omnidirectional Gaussian splatting.

Renders 3D Gaussian clouds to equirectangular panoramas and optimizes
the cloud, the camera poses, and a per-pixel spherical distortion model
jointly by gradient descent.
"""

from __future__ import annotations

__version__ = "0.1.0"
