"""Triangle-soup BVH and ray queries.

The tree is a flat array-of-nodes form so the numba kernels can traverse it
without objects: axis-aligned boxes split at the median of triangle
centroids along the longest axis, leaves holding up to LEAF_SIZE triangles
through a permutation array. Traversal results are guaranteed to match a
brute-force scan over all triangles, including tie-breaks.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ValidationError

LEAF_SIZE = 4


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        self.t_min = float(self.t_min)
        n = float(np.linalg.norm(self.direction))
        if not np.isfinite(n) or n == 0.0:
            raise ValidationError("ray direction must be a nonzero finite vector")
        self.direction = self.direction / n

    def point_at(self, t):
        return self.origin + t * self.direction


@dataclass
class Hit:
    t: float
    triangle_index: int
    kind: str = "generic"

    @property
    def splat_index(self):
        """Owning splat for fan-meshed splat soups (6 triangles per splat)."""
        return self.triangle_index // 6


@dataclass
class Bvh:
    """Flattened BVH over a shared-vertex triangle soup.

    `kind` tags what the triangles represent ("splat" soups carry 6
    triangles per splat in emission order, so triangle_index // 6 recovers
    the splat index).
    """

    verts: np.ndarray
    tris: np.ndarray
    kind: str = "generic"
    node_min: np.ndarray = field(default=None, repr=False)
    node_max: np.ndarray = field(default=None, repr=False)
    node_left: np.ndarray = field(default=None, repr=False)
    node_right: np.ndarray = field(default=None, repr=False)
    node_start: np.ndarray = field(default=None, repr=False)
    node_count: np.ndarray = field(default=None, repr=False)
    order: np.ndarray = field(default=None, repr=False)

    @property
    def n_triangles(self):
        return int(self.tris.shape[0])

    @property
    def n_nodes(self):
        return int(self.node_min.shape[0])


def _empty_bvh(verts, tris, kind):
    return Bvh(
        verts=verts,
        tris=tris,
        kind=kind,
        node_min=np.empty((0, 3), dtype=np.float64),
        node_max=np.empty((0, 3), dtype=np.float64),
        node_left=np.empty(0, dtype=np.int64),
        node_right=np.empty(0, dtype=np.int64),
        node_start=np.empty(0, dtype=np.int64),
        node_count=np.empty(0, dtype=np.int64),
        order=np.empty(0, dtype=np.int64),
    )


def build_bvh(triangles, kind="generic"):
    """Build a BVH from an (M, 3, 3) triangle soup (triangle, corner, xyz).

    The build is deterministic: longest-axis split (lowest axis on ties) at
    the median, stable ordering of equal centroids, depth-first node layout.
    """
    soup = np.ascontiguousarray(triangles, dtype=np.float64)
    if soup.ndim != 3 or soup.shape[1:] != (3, 3):
        raise ValidationError(
            f"triangle soup must have shape (M, 3, 3), got {soup.shape}"
        )
    m = soup.shape[0]
    verts = soup.reshape(-1, 3)
    tris = np.arange(3 * m, dtype=np.int64).reshape(m, 3)
    return build_bvh_mesh(verts, tris, kind=kind)


def build_bvh_mesh(vertices, triangles, kind="generic"):
    """Build a BVH over a shared-vertex mesh (V, 3) + (M, 3) int indices."""
    verts = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
    tris = np.ascontiguousarray(triangles, dtype=np.int64).reshape(-1, 3)
    m = tris.shape[0]
    if m == 0:
        return _empty_bvh(verts, tris, kind)
    if tris.min() < 0 or tris.max() >= verts.shape[0]:
        raise ValidationError("triangle indices out of vertex range")

    corners = verts[tris]  # (M, 3, 3)
    tri_min = corners.min(axis=1)
    tri_max = corners.max(axis=1)
    tri_cent = corners.mean(axis=1)

    order = np.arange(m, dtype=np.int64)
    node_min = []
    node_max = []
    node_left = []
    node_right = []
    node_start = []
    node_count = []

    def new_node():
        node_min.append(None)
        node_max.append(None)
        node_left.append(-1)
        node_right.append(-1)
        node_start.append(0)
        node_count.append(0)
        return len(node_min) - 1

    stack = [(new_node(), 0, m)]
    while stack:
        nid, lo, hi = stack.pop()
        seg = order[lo:hi]
        bmin = tri_min[seg].min(axis=0)
        bmax = tri_max[seg].max(axis=0)
        node_min[nid] = bmin
        node_max[nid] = bmax
        if hi - lo <= LEAF_SIZE:
            node_start[nid] = lo
            node_count[nid] = hi - lo
            continue
        axis = int(np.argmax(bmax - bmin))
        keys = tri_cent[seg, axis]
        order[lo:hi] = seg[np.argsort(keys, kind="stable")]
        mid = (lo + hi) // 2
        lid = new_node()
        rid = new_node()
        node_left[nid] = lid
        node_right[nid] = rid
        stack.append((rid, mid, hi))
        stack.append((lid, lo, mid))

    return Bvh(
        verts=verts,
        tris=tris,
        kind=kind,
        node_min=np.ascontiguousarray(np.stack(node_min), dtype=np.float64),
        node_max=np.ascontiguousarray(np.stack(node_max), dtype=np.float64),
        node_left=np.asarray(node_left, dtype=np.int64),
        node_right=np.asarray(node_right, dtype=np.int64),
        node_start=np.asarray(node_start, dtype=np.int64),
        node_count=np.asarray(node_count, dtype=np.int64),
        order=order,
    )


def ray_triangle_intersect(ray, v0, v1, v2):
    """Two-sided ray/triangle test with inclusive edge and vertex hits.

    Returns the parameter t (strictly greater than ray.t_min) or None.
    """
    v0 = np.asarray(v0, dtype=np.float64)
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    o = ray.origin
    d = ray.direction
    t = _kernels.ray_tri(
        o[0], o[1], o[2], d[0], d[1], d[2],
        v0[0], v0[1], v0[2], v1[0], v1[1], v1[2], v2[0], v2[1], v2[2],
        ray.t_min,
    )
    if not np.isfinite(t):
        return None
    return float(t)


def trace_nearest(ray, bvh, t_max=np.inf):
    """Nearest hit along the ray with ray.t_min < t < t_max, or None."""
    o = ray.origin
    d = ray.direction
    t, idx = _kernels.bvh_nearest(
        o[0], o[1], o[2], d[0], d[1], d[2], ray.t_min, t_max,
        bvh.node_min, bvh.node_max, bvh.node_left, bvh.node_right,
        bvh.node_start, bvh.node_count, bvh.order, bvh.verts, bvh.tris,
    )
    if idx < 0:
        return None
    return Hit(t=float(t), triangle_index=int(idx), kind=bvh.kind)


def trace_nearest_brute(ray, bvh, t_max=np.inf):
    """Reference nearest-hit by scanning every triangle in index order."""
    o = ray.origin
    d = ray.direction
    t, idx = _kernels.brute_nearest(
        o[0], o[1], o[2], d[0], d[1], d[2], ray.t_min, t_max, bvh.verts, bvh.tris
    )
    if idx < 0:
        return None
    return Hit(t=float(t), triangle_index=int(idx), kind=bvh.kind)
