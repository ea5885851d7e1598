"""Ray/triangle intersection and the BVH: correctness against a
plane-then-inside oracle, exact brute-force equivalence, and structural
invariants of the tree."""

import numpy as np
import pytest

from splatcast.accel import (
    LEAF_SIZE,
    Bvh,
    Hit,
    Ray,
    ValidationError,
    build_bvh,
    build_bvh_mesh,
    ray_triangle_intersect,
    trace_nearest,
    trace_nearest_brute,
)


def plane_then_inside(ray, v0, v1, v2):
    """Independent intersection oracle: intersect the supporting plane, then
    test the point against the three edge half-spaces."""
    n = np.cross(v1 - v0, v2 - v0)
    denom = np.dot(n, ray.direction)
    if denom == 0.0:
        return None
    t = np.dot(n, v0 - ray.origin) / denom
    if t <= ray.t_min:
        return None
    p = ray.origin + t * ray.direction
    # inside iff all edge cross products point along the (signed) normal
    for a, b in ((v0, v1), (v1, v2), (v2, v0)):
        if np.dot(np.cross(b - a, p - a), n) < -1e-12 * np.dot(n, n):
            return None
    return t


def random_triangles(rng, count, extent=2.0, size=0.8):
    base = rng.uniform(-extent, extent, size=(count, 1, 3))
    return base + rng.uniform(-size, size, size=(count, 3, 3))


def test_intersect_against_plane_oracle(rng):
    hits = 0
    for trial in range(500):
        tri = random_triangles(rng, 1)[0]
        origin = rng.uniform(-3, 3, 3)
        if trial % 2 == 0:
            # aim at a barycentric point inside the triangle so hits are common
            w = rng.dirichlet((1.0, 1.0, 1.0))
            direction = w @ tri - origin
        else:
            direction = rng.normal(size=3)
        ray = Ray(origin=origin, direction=direction)
        t_impl = ray_triangle_intersect(ray, tri[0], tri[1], tri[2])
        t_ref = plane_then_inside(ray, tri[0], tri[1], tri[2])
        if t_ref is None:
            # oracle's epsilon band may differ exactly on an edge; accept
            # implementation hits only if they are on-plane and on-edge
            if t_impl is not None:
                p = ray.point_at(t_impl)
                n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
                assert abs(np.dot(p - tri[0], n)) < 1e-9 * np.linalg.norm(n)
        else:
            hits += 1
            assert t_impl is not None
            assert t_impl == pytest.approx(t_ref, rel=1e-9)
    assert hits > 200  # the aimed half of the sampler hits reliably


def test_intersect_hits_from_both_sides():
    tri = np.array([[0.0, -1, -1], [0.0, 1, -1], [0.0, 0, 1]])
    front = Ray(origin=(1.0, 0, 0), direction=(-1.0, 0, 0))
    back = Ray(origin=(-1.0, 0, 0), direction=(1.0, 0, 0))
    assert ray_triangle_intersect(front, *tri) == pytest.approx(1.0)
    assert ray_triangle_intersect(back, *tri) == pytest.approx(1.0)


def test_intersect_parallel_ray_misses():
    tri = np.array([[0.0, -1, -1], [0.0, 1, -1], [0.0, 0, 1]])
    ray = Ray(origin=(1.0, 0, 0), direction=(0.0, 1.0, 0.0))  # parallel plane
    assert ray_triangle_intersect(ray, *tri) is None


def test_intersect_inclusive_edges_and_vertices():
    """Rays exactly through a vertex or an edge count as hits (u, v >= 0)."""
    tri = np.array([[0.0, 0, 0], [0.0, 2, 0], [0.0, 0, 2]])
    through_vertex = Ray(origin=(1.0, 0, 0), direction=(-1.0, 0, 0))
    assert ray_triangle_intersect(through_vertex, *tri) == pytest.approx(1.0)
    through_edge = Ray(origin=(1.0, 1.0, 0.0), direction=(-1.0, 0, 0))
    assert ray_triangle_intersect(through_edge, *tri) == pytest.approx(1.0)
    through_hypotenuse = Ray(origin=(1.0, 1.0, 1.0), direction=(-1.0, 0, 0))
    assert ray_triangle_intersect(through_hypotenuse, *tri) == pytest.approx(1.0)


def test_intersect_respects_t_min():
    tri = np.array([[0.0, -1, -1], [0.0, 1, -1], [0.0, 0, 1]])
    ray = Ray(origin=(1.0, 0, 0), direction=(-1.0, 0, 0), t_min=1.0)
    assert ray_triangle_intersect(ray, *tri) is None  # t == t_min excluded
    ray2 = Ray(origin=(1.0, 0, 0), direction=(-1.0, 0, 0), t_min=0.5)
    assert ray_triangle_intersect(ray2, *tri) == pytest.approx(1.0)


def test_ray_validation_and_normalization():
    with pytest.raises(ValidationError):
        Ray(origin=(0, 0, 0), direction=(0.0, 0.0, 0.0))
    with pytest.raises(ValidationError):
        Ray(origin=(0, 0, 0), direction=(np.nan, 0.0, 0.0))
    ray = Ray(origin=(0, 0, 0), direction=(0.0, 0.0, 10.0))
    assert np.linalg.norm(ray.direction) == pytest.approx(1.0)
    np.testing.assert_allclose(ray.point_at(2.0), [0, 0, 2.0])


def test_hit_maps_triangle_to_splat():
    assert Hit(t=1.0, triangle_index=0, kind="splat").splat_index == 0
    assert Hit(t=1.0, triangle_index=5, kind="splat").splat_index == 0
    assert Hit(t=1.0, triangle_index=6, kind="splat").splat_index == 1
    assert Hit(t=1.0, triangle_index=17, kind="splat").splat_index == 2


def test_bvh_structure_invariants(rng):
    tris = random_triangles(rng, 137)
    bvh = build_bvh(tris, kind="splat")
    assert bvh.n_triangles == 137
    # permutation covers all triangles exactly once
    assert sorted(bvh.order.tolist()) == list(range(137))
    # leaves respect the size bound and partition the permutation array
    spans = []
    for node in range(bvh.n_nodes):
        if bvh.node_count[node] > 0:
            assert bvh.node_count[node] <= LEAF_SIZE
            spans.append((bvh.node_start[node], bvh.node_count[node]))
        else:
            left, right = bvh.node_left[node], bvh.node_right[node]
            # child boxes nest inside the parent box
            for child in (left, right):
                assert np.all(bvh.node_min[child] >= bvh.node_min[node] - 1e-12)
                assert np.all(bvh.node_max[child] <= bvh.node_max[node] + 1e-12)
    spans.sort()
    covered = 0
    for start, count in spans:
        assert start == covered
        covered += count
    assert covered == 137
    # every triangle is inside its leaf box
    for node in range(bvh.n_nodes):
        cnt = bvh.node_count[node]
        if cnt > 0:
            for j in range(bvh.node_start[node], bvh.node_start[node] + cnt):
                tri = bvh.verts[bvh.tris[bvh.order[j]]]
                assert np.all(tri >= bvh.node_min[node] - 1e-12)
                assert np.all(tri <= bvh.node_max[node] + 1e-12)


def test_bvh_build_is_deterministic(rng):
    tris = random_triangles(rng, 64)
    a = build_bvh(tris, kind="splat")
    b = build_bvh(tris.copy(), kind="splat")
    assert np.array_equal(a.order, b.order)
    assert np.array_equal(a.node_min, b.node_min)
    assert np.array_equal(a.node_left, b.node_left)


def test_trace_matches_brute_force(rng):
    tris = random_triangles(rng, 500)
    bvh = build_bvh(tris, kind="splat")
    mismatches = 0
    for _ in range(300):
        ray = Ray(origin=rng.uniform(-3, 3, 3), direction=rng.normal(size=3))
        fast = trace_nearest(ray, bvh)
        slow = trace_nearest_brute(ray, bvh)
        if (fast is None) != (slow is None):
            mismatches += 1
        elif fast is not None:
            if fast.t != slow.t or fast.triangle_index != slow.triangle_index:
                mismatches += 1
    assert mismatches == 0


def test_trace_tie_breaks_to_smaller_index(rng):
    """Duplicate triangles produce identical t; the smaller global index wins."""
    tri = np.array([[0.0, -1, -1], [0.0, 1, -1], [0.0, 0, 1]])
    soup = np.stack([tri + np.array([1.0, 0, 0]), tri, tri])  # 1 and 2 coincide
    bvh = build_bvh(soup, kind="splat")
    hit = trace_nearest(Ray(origin=(-1.0, 0, 0), direction=(1.0, 0, 0)), bvh)
    assert hit.t == pytest.approx(1.0)
    assert hit.triangle_index == 1


def test_trace_t_max_excludes_far_hits(rng):
    tri = np.array([[0.0, -1, -1], [0.0, 1, -1], [0.0, 0, 1]])
    bvh = build_bvh(tri[None], kind="splat")
    ray = Ray(origin=(2.0, 0, 0), direction=(-1.0, 0, 0))
    assert trace_nearest(ray, bvh, t_max=1.5) is None
    assert trace_nearest(ray, bvh, t_max=2.5).t == pytest.approx(2.0)


def test_trace_empty_bvh_misses():
    bvh = build_bvh(np.zeros((0, 3, 3)), kind="splat")
    assert trace_nearest(Ray(origin=(0, 0, 0), direction=(1, 0, 0)), bvh) is None


def test_retrace_walks_forward(rng):
    """Re-tracing from just past each hit enumerates hits in strict t order."""
    tris = random_triangles(rng, 200, extent=1.0, size=0.5)
    bvh = build_bvh(tris, kind="splat")
    for _ in range(50):
        origin = rng.uniform(-3, -2, 3)
        ray = Ray(origin=origin, direction=np.array([1.0, 1.0, 1.0]) + rng.normal(size=3) * 0.2)
        last_t = 0.0
        for _step in range(64):
            hit = trace_nearest(Ray(origin=origin, direction=ray.direction, t_min=last_t), bvh)
            if hit is None:
                break
            assert hit.t > last_t
            last_t = hit.t


def test_build_bvh_mesh_shares_vertices(rng):
    vertices = rng.uniform(-1, 1, size=(10, 3))
    triangles = np.array([[0, 1, 2], [2, 3, 4], [4, 5, 6], [6, 7, 8]])
    bvh = build_bvh_mesh(vertices, triangles, kind="solid")
    assert isinstance(bvh, Bvh)
    assert bvh.kind == "solid"
    assert bvh.n_triangles == 4
    assert bvh.verts.shape == (10, 3)


def test_watertight_shared_edge_single_nearest(rng):
    """A ray through the shared edge of two triangles reports one nearest hit
    (both intersect at the same t; the tie rule picks the smaller index)."""
    quad_v = np.array([[0.0, -1, -1], [0.0, 1, -1], [0.0, 1, 1], [0.0, -1, 1]])
    tris = np.stack([quad_v[[0, 1, 2]], quad_v[[0, 2, 3]]])
    bvh = build_bvh(tris, kind="solid")
    # the shared edge runs from corner 0 to corner 2; aim through its midpoint
    ray = Ray(origin=(3.0, 0.0, 0.0), direction=(-1.0, 0.0, 0.0))
    hit = trace_nearest(ray, bvh)
    assert hit is not None
    assert hit.t == pytest.approx(3.0)
    assert hit.triangle_index == 0
