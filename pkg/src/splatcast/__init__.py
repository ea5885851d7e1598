"""splatcast: ray-traced rendering and mesh-based editing of flat Gaussian splat scenes."""

from .core import (
    ConfidenceLevel,
    FlatGaussian,
    chi2_quantile,
    covariance,
    eps_flat_for_points,
    flatten,
    gamma_p,
)
from .errors import (
    ContractError,
    DegenerateEditError,
    FitDivergenceError,
    FormatError,
    SplatError,
    ValidationError,
)
from .fitting import FitConfig, FitResult, finite_diff_check, fit, psnr, ssim
from .fixtures import ground_truth_scene, look_at, random_scene, ring_cameras
from .gsio import (
    export_splat_mesh,
    load_cameras,
    load_gs_ply,
    load_image,
    load_solid_mesh,
    save_cameras,
    save_gs_ply,
    save_image,
)
from .meshing import EditSpec, apply_edit, gaussian_to_polygon, polygon_to_gaussian
from .render import RenderConfig, aggregate_color, render_image
from .scene import Camera, Material, PointLight, Scene, SolidMesh

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "ConfidenceLevel",
    "ContractError",
    "DegenerateEditError",
    "EditSpec",
    "FitConfig",
    "FitDivergenceError",
    "FitResult",
    "FlatGaussian",
    "FormatError",
    "Material",
    "PointLight",
    "RenderConfig",
    "Scene",
    "SolidMesh",
    "SplatError",
    "ValidationError",
    "aggregate_color",
    "apply_edit",
    "chi2_quantile",
    "covariance",
    "eps_flat_for_points",
    "export_splat_mesh",
    "finite_diff_check",
    "fit",
    "flatten",
    "gamma_p",
    "gaussian_to_polygon",
    "ground_truth_scene",
    "load_cameras",
    "load_gs_ply",
    "load_image",
    "load_solid_mesh",
    "look_at",
    "polygon_to_gaussian",
    "psnr",
    "random_scene",
    "render_image",
    "ring_cameras",
    "save_cameras",
    "save_gs_ply",
    "save_image",
    "ssim",
]
