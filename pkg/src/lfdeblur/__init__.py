"""Motion deblurring for microlens-array light-field images."""

from .deblur import (
    DeblurConfig,
    DeblurResult,
    DivergenceError,
    blind_deconvolve,
    deconvolve_known_kernel,
)
from .forward import (
    CorrectionSet,
    ForwardModel,
    PatchLayout,
    PlanarModel,
    build_mask,
    forward_full,
    render_lf,
    render_lf_adjoint,
)
from .geometry import CameraConfig, LatticeSpec
from .psf import PsfBank, build_psf_bank, load_bank, project_kernel, save_bank

__version__ = "0.1.0"

__all__ = [
    "CameraConfig",
    "CorrectionSet",
    "DeblurConfig",
    "DeblurResult",
    "DivergenceError",
    "ForwardModel",
    "LatticeSpec",
    "PatchLayout",
    "PlanarModel",
    "PsfBank",
    "blind_deconvolve",
    "build_mask",
    "build_psf_bank",
    "deconvolve_known_kernel",
    "forward_full",
    "load_bank",
    "project_kernel",
    "render_lf",
    "render_lf_adjoint",
    "save_bank",
]
