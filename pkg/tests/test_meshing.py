"""Octagon proxies: vertex formula, fan layout, polygon round trips,
and mesh-driven splat edits."""

import json
import math

import numpy as np
import pytest

from splatcast.core import ConfidenceLevel, FlatGaussian, quat_normalize, quat_to_matrix
from splatcast.errors import DegenerateEditError, ValidationError
from splatcast.fixtures import random_gaussian, random_scene
from splatcast.meshing import (
    FAN_INDICES,
    N_SIDES,
    EditSpec,
    apply_edit,
    gaussian_to_polygon,
    polygon_to_gaussian,
    polygon_vertices_batch,
)
from splatcast.scene import Scene

LEVEL = ConfidenceLevel(0.99)


def reference_vertices(g, level):
    """Vertex oracle computed from scratch: m + sqrt(q)(s2 cos r2 + s3 sin r3)."""
    rot = quat_to_matrix(g.quaternion)
    r2, r3 = rot[:, 1], rot[:, 2]
    out = np.empty((N_SIDES, 3))
    for i in range(N_SIDES):
        ang = 2.0 * math.pi * i / N_SIDES
        out[i] = g.mean + math.sqrt(level.q) * (
            g.scales[1] * math.cos(ang) * r2 + g.scales[2] * math.sin(ang) * r3
        )
    return out


def test_vertex_formula_against_reference(rng):
    for _ in range(30):
        g = random_gaussian(rng, 1e-6)
        mesh = gaussian_to_polygon(g, LEVEL)
        np.testing.assert_allclose(mesh.vertices, reference_vertices(g, LEVEL), atol=1e-12)


def test_vertex_formula_axis_aligned_example():
    """Hand-checkable case: identity frame, so the octagon lies in x = const."""
    g = FlatGaussian(mean=np.array([1.0, 2.0, 7.0]),
                     quaternion=np.array([1.0, 0.0, 0.0, 0.0]),
                     scales=np.array([1e-6, 2.0, 1.0]),
                     opacity_hat=0.5, color=np.array([1.0, 1.0, 1.0]))
    verts = gaussian_to_polygon(g, LEVEL).vertices
    root_q = math.sqrt(LEVEL.q)
    # identity quaternion: r2 = +y, r3 = +z, flat axis +x
    np.testing.assert_allclose(verts[:, 0], 1.0, atol=1e-15)
    np.testing.assert_allclose(verts[0], [1.0, 2.0 + 2.0 * root_q, 7.0], atol=1e-12)
    np.testing.assert_allclose(verts[2], [1.0, 2.0, 7.0 + root_q], atol=1e-12)
    np.testing.assert_allclose(verts[4], [1.0, 2.0 - 2.0 * root_q, 7.0], atol=1e-12)
    np.testing.assert_allclose(verts[6], [1.0, 2.0, 7.0 - root_q], atol=1e-12)
    # diagonal vertex: both trig factors are sqrt(1/2)
    s = math.sqrt(0.5)
    np.testing.assert_allclose(
        verts[1], [1.0, 2.0 + 2.0 * root_q * s, 7.0 + root_q * s], atol=1e-12
    )


def test_batch_matches_single(rng):
    scene = random_scene(17, seed=3)
    means = np.array([g.mean for g in scene.gaussians])
    rots = np.array([quat_to_matrix(g.quaternion) for g in scene.gaussians])
    s2 = np.array([g.scales[1] for g in scene.gaussians])
    s3 = np.array([g.scales[2] for g in scene.gaussians])
    batch = polygon_vertices_batch(means, rots[:, :, 1], rots[:, :, 2], s2, s3, LEVEL.q)
    assert batch.shape == (17, 8, 3)
    for i, g in enumerate(scene.gaussians):
        np.testing.assert_allclose(batch[i], gaussian_to_polygon(g, LEVEL).vertices, atol=1e-14)


def test_fan_indices_layout():
    assert FAN_INDICES.shape == (6, 3)
    # a fan: every triangle anchored at vertex 0, consecutive rim pairs
    for k, (a, b, c) in enumerate(FAN_INDICES):
        assert a == 0
        assert b == k + 1
        assert c == k + 2


def test_fan_covers_octagon_area(rng):
    """Triangle areas sum to the exact area of the scaled octagon:
    8 * (1/2) * sin(pi/4) * (sqrt(q) s2) * (sqrt(q) s3)."""
    for _ in range(10):
        g = random_gaussian(rng, 1e-6)
        verts = gaussian_to_polygon(g, LEVEL).vertices
        total = 0.0
        for a, b, c in FAN_INDICES:
            total += 0.5 * np.linalg.norm(np.cross(verts[b] - verts[a], verts[c] - verts[a]))
        exact = 4.0 * math.sin(math.pi / 4.0) * LEVEL.q * g.scales[1] * g.scales[2]
        assert total == pytest.approx(exact, rel=1e-12)


def test_round_trip_small(rng):
    for _ in range(50):
        g = random_gaussian(rng, 1e-6)
        mesh = gaussian_to_polygon(g, LEVEL)
        back = polygon_to_gaussian(mesh.vertices, LEVEL, eps_flat=g.scales[0],
                                   opacity_hat=g.opacity_hat, color=g.color)
        np.testing.assert_allclose(back.mean, g.mean, atol=1e-12)
        np.testing.assert_allclose(back.scales, g.scales, rtol=1e-12)
        rot_a, rot_b = g.rotation, back.rotation
        np.testing.assert_allclose(rot_b[:, 1], rot_a[:, 1], atol=1e-12)
        np.testing.assert_allclose(rot_b[:, 2], rot_a[:, 2], atol=1e-12)
        np.testing.assert_allclose(
            np.cross(rot_b[:, 1], rot_b[:, 2]), rot_b[:, 0], atol=1e-12
        )


def test_round_trip_at_other_levels(rng):
    for alpha in (0.5, 0.9, 0.999):
        level = ConfidenceLevel(alpha)
        g = random_gaussian(rng, 1e-7)
        verts = gaussian_to_polygon(g, level).vertices
        back = polygon_to_gaussian(verts, level, eps_flat=1e-7)
        np.testing.assert_allclose(back.mean, g.mean, atol=1e-12)
        np.testing.assert_allclose(back.scales[1:], g.scales[1:], rtol=1e-12)


def test_polygon_to_gaussian_from_scratch_built_octagon():
    """Recover geometry from vertices we lay out by hand, not via the forward
    direction: an axis-aligned ellipse of semi-axes 3 and 1 in the xy plane."""
    level = ConfidenceLevel(0.9)
    root_q = math.sqrt(level.q)
    center = np.array([5.0, -2.0, 0.5])
    r2, r3 = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    ang = 2.0 * np.pi * np.arange(8) / 8.0
    verts = center + (3.0 * np.cos(ang))[:, None] * (root_q * r2) + (
        1.0 * np.sin(ang))[:, None] * (root_q * r3)
    g = polygon_to_gaussian(verts, level, eps_flat=1e-6, opacity_hat=0.7,
                            color=(0.2, 0.3, 0.4))
    np.testing.assert_allclose(g.mean, center, atol=1e-12)
    np.testing.assert_allclose(g.scales, [1e-6, 3.0, 1.0], rtol=1e-12)
    rot = g.rotation
    np.testing.assert_allclose(rot[:, 1], r2, atol=1e-12)
    np.testing.assert_allclose(rot[:, 2], r3, atol=1e-12)
    assert g.opacity_hat == 0.7


def test_polygon_center_is_vertex_midpoint(rng):
    """The recovered mean is the midpoint of opposite rim vertices 2 and 6."""
    g = random_gaussian(rng, 1e-6)
    verts = gaussian_to_polygon(g, LEVEL).vertices
    shifted = verts + np.array([0.1, -0.2, 0.3])
    back = polygon_to_gaussian(shifted, LEVEL, eps_flat=1e-6)
    np.testing.assert_allclose(back.mean, 0.5 * (shifted[2] + shifted[6]), atol=1e-15)


def test_degenerate_polygon_raises(rng):
    g = random_gaussian(rng, 1e-6)
    verts = gaussian_to_polygon(g, LEVEL).vertices
    collapsed = np.repeat(verts[2:3], 8, axis=0)  # all vertices coincide
    with pytest.raises(DegenerateEditError):
        polygon_to_gaussian(collapsed, LEVEL, eps_flat=1e-6, splat_index=5)
    # the error names the offending splat
    try:
        polygon_to_gaussian(collapsed, LEVEL, eps_flat=1e-6, splat_index=5)
    except DegenerateEditError as err:
        assert "splat 5" in str(err)


def test_collinear_polygon_raises(rng):
    """Vertices squashed onto a line leave no second in-plane axis."""
    g = random_gaussian(rng, 1e-6)
    verts = gaussian_to_polygon(g, LEVEL).vertices
    rot = g.rotation
    onto_line = (verts - g.mean) @ np.outer(rot[:, 1], rot[:, 1]) + g.mean
    with pytest.raises(DegenerateEditError):
        polygon_to_gaussian(onto_line, LEVEL, eps_flat=1e-6)


def test_edit_translation(rng):
    scene = random_scene(10, seed=5)
    offset = np.array([0.5, -1.0, 2.0])
    spec = EditSpec(indices=list(range(10)), translate=offset)
    edited = apply_edit(scene, spec, LEVEL)
    for g0, g1 in zip(scene.gaussians, edited.gaussians):
        np.testing.assert_allclose(g1.mean, g0.mean + offset, atol=1e-12)
        np.testing.assert_allclose(g1.scales, g0.scales, rtol=1e-12)
        np.testing.assert_allclose(g1.rotation, g0.rotation, atol=1e-12)


def test_edit_rotation_rotates_frame(rng):
    scene = random_scene(6, seed=6)
    theta = 0.7
    rot_edit = np.array([
        [math.cos(theta), -math.sin(theta), 0.0],
        [math.sin(theta), math.cos(theta), 0.0],
        [0.0, 0.0, 1.0],
    ])
    spec = EditSpec(indices=list(range(6)), linear=rot_edit)
    edited = apply_edit(scene, spec, LEVEL)
    for g0, g1 in zip(scene.gaussians, edited.gaussians):
        np.testing.assert_allclose(g1.mean, rot_edit @ g0.mean, atol=1e-12)
        np.testing.assert_allclose(g1.rotation[:, 1], rot_edit @ g0.rotation[:, 1], atol=1e-12)
        np.testing.assert_allclose(g1.rotation[:, 2], rot_edit @ g0.rotation[:, 2], atol=1e-12)
        np.testing.assert_allclose(g1.scales, g0.scales, rtol=1e-12)


def test_edit_uniform_scale_scales_inplane(rng):
    scene = random_scene(6, seed=7)
    spec = EditSpec(indices=list(range(6)), linear=2.5 * np.eye(3))
    edited = apply_edit(scene, spec, LEVEL)
    for g0, g1 in zip(scene.gaussians, edited.gaussians):
        np.testing.assert_allclose(g1.mean, 2.5 * g0.mean, atol=1e-12)
        np.testing.assert_allclose(g1.scales[1:], 2.5 * g0.scales[1:], rtol=1e-12)
        assert g1.scales[0] == g0.scales[0]  # flat axis stays pinned
        np.testing.assert_allclose(g1.rotation, g0.rotation, atol=1e-12)


def test_edit_anisotropic_stretch_reshapes(rng):
    """A non-uniform stretch along the splat's own r2 doubles s2 only."""
    g = random_gaussian(rng, 1e-6)
    rot = g.rotation
    stretch = np.eye(3) + np.outer(rot[:, 1], rot[:, 1])  # 2x along r2
    scene = Scene([g], [], [], np.zeros(3))
    moved = scene.gaussians[0].mean.copy()
    spec = EditSpec(indices=[0], linear=stretch, translate=-stretch @ moved + moved)
    edited = apply_edit(scene, spec, LEVEL)
    g1 = edited.gaussians[0]
    np.testing.assert_allclose(g1.mean, g.mean, atol=1e-12)
    np.testing.assert_allclose(g1.scales[1], 2.0 * g.scales[1], rtol=1e-9)
    np.testing.assert_allclose(g1.scales[2], g.scales[2], rtol=1e-9)


def test_edit_preserves_untouched_and_appearance(rng):
    scene = random_scene(8, seed=8)
    spec = EditSpec(indices=[2, 5], translate=(1.0, 0.0, 0.0))
    edited = apply_edit(scene, spec, LEVEL)
    for i, (g0, g1) in enumerate(zip(scene.gaussians, edited.gaussians)):
        if i in (2, 5):
            assert not np.allclose(g0.mean, g1.mean)
        else:
            assert np.array_equal(g0.mean, g1.mean)
        assert g1.opacity_hat == g0.opacity_hat
        assert np.array_equal(g1.color, g0.color)


def test_edit_box_selection(rng):
    scene = random_scene(30, seed=9)
    lo, hi = np.array([-0.5, -0.5, -0.5]), np.array([0.5, 0.5, 0.5])
    spec = EditSpec(box=(lo, hi), translate=(0.0, 10.0, 0.0))
    inside = [i for i, g in enumerate(scene.gaussians)
              if np.all(g.mean >= lo) and np.all(g.mean <= hi)]
    assert spec.selected_indices(scene) == inside
    edited = apply_edit(scene, spec, LEVEL)
    for i in inside:
        assert edited.gaussians[i].mean[1] > 5.0


def test_edit_empty_box_is_noop(rng):
    scene = random_scene(5, seed=10)
    spec = EditSpec(box=((100.0, 100.0, 100.0), (101.0, 101.0, 101.0)))
    assert spec.selected_indices(scene) == []
    edited = apply_edit(scene, spec, LEVEL)
    for g0, g1 in zip(scene.gaussians, edited.gaussians):
        assert np.array_equal(g0.mean, g1.mean)


def test_edit_singular_transform_rejected():
    with pytest.raises(ValidationError):
        EditSpec(indices=[0], linear=np.diag([1.0, 1.0, 0.0]))


def test_edit_collapsing_projection_raises(rng):
    """A transform that keeps det but flattens the octagon onto a line
    (after composing with the splat frame) raises a per-splat error."""
    g = FlatGaussian(mean=np.zeros(3), quaternion=np.array([1.0, 0, 0, 0]),
                     scales=np.array([1e-6, 0.3, 0.3]), opacity_hat=0.5,
                     color=np.array([1.0, 1.0, 1.0]))
    scene = Scene([g], [], [], np.zeros(3))
    # identity-frame splat spans y/z; shear y onto nothing while preserving det
    squash = np.array([[1.0, 0.0, 0.0], [0.0, 1e-14, 0.0], [0.0, 0.0, 1e14]])
    with pytest.raises(DegenerateEditError):
        apply_edit(scene, EditSpec(indices=[0], linear=squash), LEVEL)


def test_editspec_selection_validation():
    with pytest.raises(ValidationError):
        EditSpec()  # neither indices nor box
    with pytest.raises(ValidationError):
        EditSpec(indices=[0], box=((0, 0, 0), (1, 1, 1)))  # both
    with pytest.raises(ValidationError):
        EditSpec(indices=[])


def test_editspec_index_out_of_range(rng):
    scene = random_scene(3, seed=0)
    with pytest.raises(ValidationError):
        EditSpec(indices=[3]).selected_indices(scene)


def test_editspec_json_round_trip():
    spec = EditSpec(box=((-1, -1, -1), (1, 1, 1)),
                    linear=np.diag([2.0, 2.0, 2.0]), translate=(0.1, 0.2, 0.3))
    text = spec.to_json()
    back = EditSpec.from_json(text)
    np.testing.assert_array_equal(back.linear, spec.linear)
    np.testing.assert_array_equal(back.translate, spec.translate)
    np.testing.assert_array_equal(back.box[0], spec.box[0])
    np.testing.assert_array_equal(back.box[1], spec.box[1])
    # JSON text itself is valid and carries the expected keys
    data = json.loads(text)
    assert set(data) == {"select", "linear", "translate"}


def test_editspec_json_indices_form():
    back = EditSpec.from_json('{"select": {"indices": [1, 4]}, "translate": [1, 0, 0]}')
    assert back.indices == [1, 4]
    np.testing.assert_array_equal(back.linear, np.eye(3))
