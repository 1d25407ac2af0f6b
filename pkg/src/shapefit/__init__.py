"""Category-level 3D surface reconstruction from partial depth observations.

Trains a deformable neural signed-distance prior on synthetic analytic
shapes, canonicalizes observed partial point clouds, and jointly optimizes
object pose and a latent shape code at test time.
"""

__version__ = "0.1.0"
