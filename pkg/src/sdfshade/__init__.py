"""Differentiable renderer over signed-distance fields with physically-based
materials: volumetric rendering, deferred shading, inverse-rendering losses
with hand-written adjoints, isosurface meshing with texture baking, and an
evaluation suite."""

from . import (brdf, cli, deferred, fields, invrender, kernels, losses,
               meshing, metrics, scene, volren)

__version__ = "0.1.0"

__all__ = ["brdf", "cli", "deferred", "fields", "invrender", "kernels",
           "losses", "meshing", "metrics", "scene", "volren", "__version__"]
