"""Desk-scale 6D object pose estimation toolkit.

Onboards textured meshes into multi-view template sets, matches query images
against them with a RoPE-based transformer (or a geometry oracle), solves for
pose with RANSAC + SQPnP, and scores results with standard pose-error metrics.
"""

__version__ = "0.1.0"
