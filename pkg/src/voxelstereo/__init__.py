"""Multi-view stereopsis toolkit on metric voxel grids.

Differentiable projection/unprojection between images and a 3D feature
grid, recurrent and pointwise grid fusion, classical visual-hull and
plane-sweep baselines, a procedural posed-scene generator, and an
evaluation harness.
"""

__version__ = "0.1.0"
