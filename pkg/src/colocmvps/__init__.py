"""Multi-view photometric stereo with a co-located point light.

Recovers a depth map, a normal map and a low-dimensional log-BRDF over a
reference view by alternating a PatchMatch-based shape solve with a
quasi-Newton reflectance solve.
"""

from .brdf import BrdfCurve, BrdfDictionary, learn_dictionary
from .energy import EnergyParams
from .scene import Camera, Dataset, SurfaceEstimate, ViewImage
from .solver import Reconstruction, SolverConfig, reconstruct

__all__ = [
    "BrdfCurve",
    "BrdfDictionary",
    "Camera",
    "Dataset",
    "EnergyParams",
    "Reconstruction",
    "SolverConfig",
    "SurfaceEstimate",
    "ViewImage",
    "learn_dictionary",
    "reconstruct",
]

__version__ = "0.1.0"
