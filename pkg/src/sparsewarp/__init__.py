"""Sparse-to-dense deformable 3D registration: dense displacement fields
reconstructed from sparse keypoint correspondences through a learned
attention kernel, with coarse-to-fine refinement and an interactive service."""

__version__ = "0.1.0"
