"""Scene data model: splats, solid meshes with materials, lights, cameras."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import FlatGaussian
from .errors import ValidationError

__all__ = ["Material", "PointLight", "SolidMesh", "Scene", "Camera"]

MATERIAL_KINDS = ("diffuse", "mirror", "glass")


@dataclass
class Material:
    kind: str = "diffuse"
    albedo: np.ndarray = (1.0, 1.0, 1.0)
    ior: float = 1.5  # used by glass only

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        self.ior = float(self.ior)
        if self.kind not in MATERIAL_KINDS:
            raise ValidationError(f"unknown material kind {self.kind!r}")
        if np.any(self.albedo < 0.0) or np.any(self.albedo > 1.0):
            raise ValidationError("albedo components must lie in [0, 1]")
        if self.kind == "glass" and self.ior < 1.0:
            raise ValidationError(f"glass ior must be >= 1, got {self.ior}")


@dataclass
class PointLight:
    position: np.ndarray
    intensity: np.ndarray  # RGB, >= 0 componentwise

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(3)
        if np.any(self.intensity < 0.0):
            raise ValidationError("light intensity must be non-negative")


@dataclass
class SolidMesh:
    """Triangle mesh with a single material and an optional rigid/affine pose."""

    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int indices
    material: Material = field(default_factory=Material)
    transform: np.ndarray | None = None  # optional 4x4 homogeneous pose

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.transform is not None:
            self.transform = np.asarray(self.transform, dtype=np.float64).reshape(4, 4)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValidationError("triangle indices out of range")

    def world_vertices(self) -> np.ndarray:
        if self.transform is None:
            return self.vertices
        return self.vertices @ self.transform[:3, :3].T + self.transform[:3, 3]


@dataclass
class Scene:
    gaussians: list[FlatGaussian] = field(default_factory=list)
    solids: list[SolidMesh] = field(default_factory=list)
    lights: list[PointLight] = field(default_factory=list)
    background: np.ndarray = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)


@dataclass
class Camera:
    """Pinhole camera, camera-to-world pose, looking down its local -z axis."""

    rotation: np.ndarray  # (3, 3) camera-to-world
    position: np.ndarray  # (3,)
    focal_x: float
    focal_y: float
    width: int
    height: int
    cx: float | None = None  # principal point, defaults to image center
    cy: float | None = None

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0

    def validate(self) -> None:
        if self.focal_x <= 0.0 or self.focal_y <= 0.0:
            raise ValidationError("focal length must be positive")
        err = np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3)))
        if err > 1e-6:
            raise ValidationError(f"camera rotation not orthonormal (err={err:.2e})")

    @property
    def forward(self) -> np.ndarray:
        """World-space view direction (local -z)."""
        return -self.rotation[:, 2]
