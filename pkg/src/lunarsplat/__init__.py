"""Semantic Gaussian-splat terrain mapping at desk scale.

Subpackages cover the synthetic scene simulator, the differentiable
rasterizer with semantic channels, the loss stack, the incremental mapping
back-end, monocular scale alignment, and the reconstruction metrics suite.
"""

__version__ = "0.1.0"
