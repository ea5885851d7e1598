"""Bidirectional map between a flat splat and its octagon mesh proxy.

Forward: eight polygon vertices on the confidence ellipse of the splat's
disk plane, triangulated as a fan. Inverse: recover mean, frame and scales
from (possibly edited) vertices via one Gram-Schmidt step. Edits move the
vertices and round-trip through the inverse map.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import ConfidenceLevel, FlatGaussian, matrix_to_quat
from .errors import DegenerateEditError, ValidationError
from .scene import Scene

__all__ = [
    "N_SIDES",
    "FAN_INDICES",
    "SplatMesh",
    "EditSpec",
    "gaussian_to_polygon",
    "polygon_to_gaussian",
    "polygon_vertices_batch",
    "apply_edit",
]

N_SIDES = 8

# Triangle fan over the octagon; every splat reuses this index pattern.
FAN_INDICES = np.array(
    [(0, 1, 2), (0, 2, 3), (0, 3, 4), (0, 4, 5), (0, 5, 6), (0, 6, 7)], dtype=np.int64
)

# cos/sin(2*pi*i/8) for i = 0..7, with the exact zeros kept exact.
_SQ = math.sqrt(0.5)
_COS = np.array([1.0, _SQ, 0.0, -_SQ, -1.0, -_SQ, 0.0, _SQ])
_SIN = np.array([0.0, _SQ, 1.0, _SQ, 0.0, -_SQ, -1.0, -_SQ])

_DEGENERATE_NORM = 1e-12


@dataclass
class SplatMesh:
    """Octagon proxy of one splat: 8 vertices plus the shared fan pattern."""

    splat_index: int
    vertices: np.ndarray  # (8, 3)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(N_SIDES, 3)

    @property
    def fan_indices(self) -> np.ndarray:
        return FAN_INDICES


def polygon_vertices_batch(means, r2, r3, s2, s3, q: float) -> np.ndarray:
    """Vertices (N, 8, 3) of the octagon proxies for N splats at once."""
    root_q = math.sqrt(q)
    a = (root_q * np.asarray(s2))[:, None, None] * _COS[None, :, None]
    b = (root_q * np.asarray(s3))[:, None, None] * _SIN[None, :, None]
    return np.asarray(means)[:, None, :] + a * np.asarray(r2)[:, None, :] + b * np.asarray(r3)[:, None, :]


def gaussian_to_polygon(g: FlatGaussian, level: ConfidenceLevel, splat_index: int = 0) -> SplatMesh:
    """Octagon proxy of one splat at the given confidence level.

    Vertex i sits at m + sqrt(Q) * (s2*cos(2*pi*i/8) * r2 + s3*sin(2*pi*i/8) * r3),
    i.e. the image of the unit octagon under the splat's scaled frame.
    """
    rot = g.rotation
    verts = polygon_vertices_batch(
        g.mean[None], rot[:, 1][None], rot[:, 2][None], g.scales[1:2], g.scales[2:3], level.q
    )[0]
    return SplatMesh(splat_index, verts)


def polygon_to_gaussian(
    vertices,
    level: ConfidenceLevel,
    eps_flat: float,
    opacity_hat: float = 1.0,
    color=(1.0, 1.0, 1.0),
    splat_index: int = 0,
    anchors: tuple[int, int] = (0, 2),
) -> FlatGaussian:
    """Recover a splat's geometry (m, R, S) from its 8 polygon vertices.

    The center is the midpoint of vertices 2 and 6; the first anchor vertex
    fixes r2 and s2 (with the general cos(2*pi*i1/8) divisor, equal to 1 for
    the default i1 = 0); the second anchor yields r3 by one Gram-Schmidt
    orthogonalization step against r2. Exact parameter recovery holds for
    the default anchors (0, 2).
    """
    verts = np.asarray(vertices, dtype=np.float64).reshape(N_SIDES, 3)
    i1, i2 = anchors
    cos_div = _COS[i1]
    if cos_div == 0.0:
        raise ValidationError(f"anchor i1={i1} has cos(2*pi*i1/8) = 0; s2 is unrecoverable")
    root_q = math.sqrt(level.q)
    center = 0.5 * (verts[2] + verts[6])

    p1 = verts[i1] - center
    n1 = float(np.linalg.norm(p1))
    if n1 < _DEGENERATE_NORM:
        raise DegenerateEditError(splat_index, "anchor vertex collapsed onto the center")
    r2 = p1 / n1
    s2 = n1 / (root_q * cos_div)

    p2 = verts[i2] - center
    orth = p2 - np.dot(p2, r2) * r2
    n2 = float(np.linalg.norm(orth))
    if n2 < _DEGENERATE_NORM:
        raise DegenerateEditError(splat_index, "second anchor collinear with the first")
    r3 = orth / n2
    s3 = float(np.dot(p2, r3)) / root_q

    r1 = np.cross(r2, r3)
    rot = np.stack([r1, r2, r3], axis=1)
    return FlatGaussian(center, matrix_to_quat(rot), (eps_flat, s2, s3), opacity_hat, color)


@dataclass
class EditSpec:
    """Declarative splat edit: a selection plus an affine vertex transform.

    JSON form:
      {"select": {"indices": [...]} | {"box": {"min": [x,y,z], "max": [x,y,z]}},
       "linear": [[3x3]], "translate": [x, y, z]}
    """

    indices: list[int] | None = None
    box: tuple[np.ndarray, np.ndarray] | None = None
    linear: np.ndarray = None
    translate: np.ndarray = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.linear is None:
            self.linear = np.eye(3)
        self.linear = np.asarray(self.linear, dtype=np.float64).reshape(3, 3)
        self.translate = np.asarray(self.translate, dtype=np.float64).reshape(3)
        if self.box is not None:
            lo, hi = self.box
            self.box = (
                np.asarray(lo, dtype=np.float64).reshape(3),
                np.asarray(hi, dtype=np.float64).reshape(3),
            )
        if (self.indices is None) == (self.box is None):
            raise ValidationError("selection must be exactly one of indices or box")
        if self.indices is not None and len(self.indices) == 0:
            raise ValidationError("explicit index selection is empty")
        if abs(np.linalg.det(self.linear)) <= 1e-12:
            raise ValidationError("edit transform is singular")

    @classmethod
    def from_json(cls, text: str) -> "EditSpec":
        data = json.loads(text)
        select = data.get("select", {})
        box = None
        if "box" in select:
            box = (select["box"]["min"], select["box"]["max"])
        return cls(
            indices=select.get("indices"),
            box=box,
            linear=data.get("linear"),
            translate=data.get("translate", (0.0, 0.0, 0.0)),
        )

    def to_json(self) -> str:
        select: dict = {}
        if self.indices is not None:
            select["indices"] = [int(i) for i in self.indices]
        else:
            select["box"] = {"min": self.box[0].tolist(), "max": self.box[1].tolist()}
        return json.dumps(
            {"select": select, "linear": self.linear.tolist(), "translate": self.translate.tolist()}
        )

    def selected_indices(self, scene: Scene) -> list[int]:
        """Resolve the selection against a scene (box selects by splat mean)."""
        if self.indices is not None:
            n = len(scene.gaussians)
            for i in self.indices:
                if not 0 <= i < n:
                    raise ValidationError(f"selected splat {i} outside scene of {n}")
            return [int(i) for i in self.indices]
        lo, hi = self.box
        picked = []
        for i, g in enumerate(scene.gaussians):
            if np.all(g.mean >= lo) and np.all(g.mean <= hi):
                picked.append(i)
        return picked


def apply_edit(scene: Scene, spec: EditSpec, level: ConfidenceLevel) -> Scene:
    """Apply an affine vertex edit to the selected splats of a scene.

    Each selected splat is meshed, all 8 vertices are transformed, and the
    Gaussian geometry is recovered from the edited polygon; opacity and
    color are preserved. Non-selected splats are returned untouched and the
    output ordering equals the input ordering.
    """
    selected = set(spec.selected_indices(scene))
    out = list(scene.gaussians)
    for i in sorted(selected):
        g = scene.gaussians[i]
        mesh = gaussian_to_polygon(g, level, splat_index=i)
        moved = mesh.vertices @ spec.linear.T + spec.translate
        out[i] = polygon_to_gaussian(
            moved,
            level,
            eps_flat=g.scales[0],
            opacity_hat=g.opacity_hat,
            color=g.color,
            splat_index=i,
        )
    return Scene(out, scene.solids, scene.lights, scene.background)
