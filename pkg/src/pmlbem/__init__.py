"""PML-truncated boundary integral solver for electromagnetic scattering in
locally perturbed layered media."""

from .pml import PmlProfile, StretchJacobians, complex_distance, stretched_green

__all__ = [
    "PmlProfile",
    "StretchJacobians",
    "complex_distance",
    "stretched_green",
]

__version__ = "0.1.0"
