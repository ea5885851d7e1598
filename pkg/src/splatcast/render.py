"""Ray-traced rendering of flat-splat scenes.

prepare_scene packs a Scene into contiguous arrays plus two BVHs (one over
the splat octagon triangles, one over solid mesh triangles); the per-ray and
per-image entry points below drive the compiled kernels with those arrays.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .accel import Bvh, Ray, build_bvh_mesh
from .core import ConfidenceLevel, quat_normalize, quat_to_matrix
from .errors import ValidationError
from .meshing import FAN_INDICES, N_SIDES, polygon_vertices_batch
from .scene import Scene

_MAT_KIND_CODE = {"diffuse": 0, "mirror": 1, "glass": 2}


@dataclass
class RenderConfig:
    """Knobs shared by every tracing entry point.

    advance_eps is relative: the ray restart offset after each accepted hit
    is advance_eps times the scene bounding-box diagonal.
    """

    level: ConfidenceLevel = field(default_factory=lambda: ConfidenceLevel(0.99))
    eps1: float = 1.0 / 255.0
    eps2: float = 1e-4
    max_gaussians_per_ray: int = 1024
    advance_eps: float = 1e-6
    max_bounce_depth: int = 4

    def __post_init__(self):
        self.eps1 = float(self.eps1)
        self.eps2 = float(self.eps2)
        self.advance_eps = float(self.advance_eps)
        self.max_gaussians_per_ray = int(self.max_gaussians_per_ray)
        self.max_bounce_depth = int(self.max_bounce_depth)
        if not (0.0 < self.eps1 < 1.0):
            raise ValidationError("eps1 must lie in (0, 1)")
        if not (0.0 < self.eps2 < 1.0):
            raise ValidationError("eps2 must lie in (0, 1)")
        if self.max_gaussians_per_ray < 1:
            raise ValidationError("max_gaussians_per_ray must be >= 1")
        if self.advance_eps <= 0.0:
            raise ValidationError("advance_eps must be positive")
        if self.max_bounce_depth < 0:
            raise ValidationError("max_bounce_depth must be >= 0")


@dataclass
class RayTraceRecord:
    """Everything one aggregation pass produced for a single ray.

    indices has length max_gaussians_per_ray; a -1 entry terminates the
    list of recorded splat indices (no sentinel appears only when the
    buffer was filled completely). t1_history / t2_history hold the two
    transmittances after each recorded hit, trimmed to n_hits entries.
    """

    color: np.ndarray
    indices: np.ndarray
    hit_ts: np.ndarray
    n_hits: int
    transmittance: float
    t1_history: np.ndarray
    t2_history: np.ndarray


@dataclass
class SplatArrays:
    """Per-splat parameter columns in scene order."""

    means: np.ndarray
    quats: np.ndarray
    r2: np.ndarray
    r3: np.ndarray
    s2: np.ndarray
    s3: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray

    @property
    def count(self):
        return int(self.means.shape[0])


def pack_splats(gaussians):
    """Stack FlatGaussian fields into SplatArrays (quaternions normalized)."""
    n = len(gaussians)
    means = np.empty((n, 3))
    quats = np.empty((n, 4))
    scales = np.empty((n, 3))
    opacity = np.empty(n)
    colors = np.empty((n, 3))
    for i, g in enumerate(gaussians):
        means[i] = g.mean
        quats[i] = g.quaternion
        scales[i] = g.scales
        opacity[i] = g.opacity_hat
        colors[i] = g.color
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    r2 = np.empty((n, 3))
    r3 = np.empty((n, 3))
    for i in range(n):
        rot = quat_to_matrix(quats[i])
        r2[i] = rot[:, 1]
        r3[i] = rot[:, 2]
    return SplatArrays(
        means=means, quats=quats, r2=r2, r3=r3,
        s2=scales[:, 1].copy(), s3=scales[:, 2].copy(),
        opacity=opacity, colors=colors,
    )


def splat_bvh_from_arrays(arrays, level):
    """Octagon-mesh BVH for packed splats; triangle i belongs to splat i // 6."""
    n = arrays.count
    if n == 0:
        return build_bvh_mesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64), kind="splat")
    verts = polygon_vertices_batch(
        arrays.means, arrays.r2, arrays.r3, arrays.s2, arrays.s3, level.q
    ).reshape(-1, 3)
    tris = (FAN_INDICES[None, :, :] + N_SIDES * np.arange(n)[:, None, None]).reshape(-1, 3)
    return build_bvh_mesh(verts, tris.astype(np.int64), kind="splat")


def _pack_solids(solids):
    verts_parts = []
    tris_parts = []
    kinds = []
    albedos = []
    iors = []
    offset = 0
    for mesh in solids:
        wv = mesh.world_vertices()
        verts_parts.append(wv)
        tris_parts.append(mesh.triangles + offset)
        offset += wv.shape[0]
        m = mesh.triangles.shape[0]
        kinds.append(np.full(m, _MAT_KIND_CODE[mesh.material.kind], dtype=np.int64))
        albedos.append(np.tile(mesh.material.albedo, (m, 1)))
        iors.append(np.full(m, mesh.material.ior))
    if verts_parts:
        verts = np.concatenate(verts_parts, axis=0)
        tris = np.concatenate(tris_parts, axis=0).astype(np.int64)
        kind = np.concatenate(kinds)
        albedo = np.concatenate(albedos, axis=0)
        ior = np.concatenate(iors)
    else:
        verts = np.empty((0, 3))
        tris = np.empty((0, 3), dtype=np.int64)
        kind = np.empty(0, dtype=np.int64)
        albedo = np.empty((0, 3))
        ior = np.empty(0)
    return verts, tris, kind, albedo, ior


def scene_diagonal(splat_verts, solid_verts):
    """Bounding-box diagonal over all tracable geometry (1.0 when empty)."""
    parts = [v for v in (splat_verts, solid_verts) if v.shape[0] > 0]
    if not parts:
        return 1.0
    allv = np.concatenate(parts, axis=0)
    diag = float(np.linalg.norm(allv.max(axis=0) - allv.min(axis=0)))
    return diag if diag > 0.0 else 1.0


@dataclass
class PreparedScene:
    """Scene packed for the kernels: splat columns, BVHs, flattened solid
    materials per triangle, light arrays, and the resolved advance offset."""

    scene: Scene
    config: RenderConfig
    splats: SplatArrays
    splat_bvh: Bvh
    solid_bvh: Bvh
    mat_kind: np.ndarray
    mat_albedo: np.ndarray
    mat_ior: np.ndarray
    light_pos: np.ndarray
    light_int: np.ndarray
    background: np.ndarray
    diagonal: float
    advance: float


def prepare_scene(scene, config=None):
    config = config or RenderConfig()
    arrays = pack_splats(scene.gaussians)
    splat_bvh = splat_bvh_from_arrays(arrays, config.level)
    so_verts, so_tris, mat_kind, mat_albedo, mat_ior = _pack_solids(scene.solids)
    solid_bvh = build_bvh_mesh(so_verts, so_tris, kind="solid")
    nl = len(scene.lights)
    light_pos = np.empty((nl, 3))
    light_int = np.empty((nl, 3))
    for i, light in enumerate(scene.lights):
        light_pos[i] = light.position
        light_int[i] = light.intensity
    diag = scene_diagonal(splat_bvh.verts, so_verts)
    return PreparedScene(
        scene=scene,
        config=config,
        splats=arrays,
        splat_bvh=splat_bvh,
        solid_bvh=solid_bvh,
        mat_kind=mat_kind,
        mat_albedo=mat_albedo,
        mat_ior=mat_ior,
        light_pos=light_pos,
        light_int=light_int,
        background=np.asarray(scene.background, dtype=np.float64).reshape(3),
        diagonal=diag,
        advance=config.advance_eps * diag,
    )


def _ensure_prepared(scene, config):
    if isinstance(scene, PreparedScene):
        if config is not None and config is not scene.config:
            return prepare_scene(scene.scene, config)
        return scene
    return prepare_scene(scene, config)


def camera_ray(camera, pixel_x, pixel_y):
    """Primary ray through the center of pixel (pixel_x, pixel_y)."""
    dx, dy, dz = _kernels.camera_ray_dir(
        float(pixel_x), float(pixel_y),
        np.ascontiguousarray(camera.rotation, dtype=np.float64),
        camera.focal_x, camera.focal_y, camera.cx, camera.cy,
    )
    return Ray(origin=camera.position.copy(), direction=np.array([dx, dy, dz]))


def alpha_at_hit(g, point):
    """Splat opacity contribution at a world-space point on its plane."""
    v = np.asarray(point, dtype=np.float64) - g.mean
    rot = g.rotation
    y = float(rot[:, 1] @ v)
    z = float(rot[:, 2] @ v)
    return float(
        g.opacity_hat * math.exp(-0.5 * ((y / g.scales[1]) ** 2 + (z / g.scales[2]) ** 2))
    )


def alpha_peak_oracle(g, ray):
    """Reference opacity: maximum of the full 3D Gaussian density along the ray.

    Whitens the ray with W = diag(1/s) R^T, minimizes ||w0 + t wd||^2 in
    closed form over t >= ray.t_min, and returns opacity_hat * exp(-rho/2).
    """
    w = (1.0 / np.asarray(g.scales, dtype=np.float64))[:, None] * g.rotation.T
    w0 = w @ (ray.origin - g.mean)
    wd = w @ ray.direction
    denom = float(wd @ wd)
    if denom == 0.0:
        t_star = ray.t_min
    else:
        t_star = max(ray.t_min, -float(w0 @ wd) / denom)
    v = w0 + t_star * wd
    return float(g.opacity_hat * math.exp(-0.5 * float(v @ v)))


def aggregate_color(ray, scene, bvh=None, config=None):
    """Composite splat colors front-to-back along one ray (solids ignored).

    Returns a RayTraceRecord holding the accumulated color (background not
    applied), hit bookkeeping with the -1 terminator, and both
    transmittance histories.
    """
    prep = _ensure_prepared(scene, config)
    cfg = prep.config
    bvh = bvh if bvh is not None else prep.splat_bvh
    max_k = cfg.max_gaussians_per_ray
    idx = np.full(max_k, -1, dtype=np.int64)
    ts = np.zeros(max_k)
    t1 = np.zeros(max_k)
    t2 = np.zeros(max_k)
    sp = prep.splats
    o = ray.origin
    d = ray.direction
    cr, cg, cb, t1_final, n_rec = _kernels.aggregate(
        o[0], o[1], o[2], d[0], d[1], d[2], ray.t_min, np.inf,
        bvh.node_min, bvh.node_max, bvh.node_left, bvh.node_right,
        bvh.node_start, bvh.node_count, bvh.order, bvh.verts, bvh.tris,
        sp.means, sp.r2, sp.r3, sp.s2, sp.s3, sp.opacity, sp.colors,
        cfg.eps1, cfg.eps2, prep.advance,
        idx, ts, t1, t2,
    )
    return RayTraceRecord(
        color=np.array([cr, cg, cb]),
        indices=idx,
        hit_ts=ts,
        n_hits=int(n_rec),
        transmittance=float(t1_final),
        t1_history=t1[:n_rec].copy(),
        t2_history=t2[:n_rec].copy(),
    )


def shade_pixel(ray, scene, splat_bvh=None, solid_bvh=None, config=None, depth=0):
    """Linear RGB reaching the ray origin, splats composited over solids.

    depth counts bounces already taken; mirror/glass continuations stop
    once config.max_bounce_depth is reached.
    """
    prep = _ensure_prepared(scene, config)
    cfg = prep.config
    splat_bvh = splat_bvh if splat_bvh is not None else prep.splat_bvh
    solid_bvh = solid_bvh if solid_bvh is not None else prep.solid_bvh
    budget = max(0, cfg.max_bounce_depth - int(depth))
    sp = prep.splats
    max_k = cfg.max_gaussians_per_ray
    scr_idx = np.empty(max_k, dtype=np.int64)
    scr = np.empty((3, max_k))
    o = ray.origin
    d = ray.direction
    r, g, b = _kernels.shade(
        o[0], o[1], o[2], d[0], d[1], d[2], ray.t_min, budget,
        splat_bvh.node_min, splat_bvh.node_max, splat_bvh.node_left, splat_bvh.node_right,
        splat_bvh.node_start, splat_bvh.node_count, splat_bvh.order,
        splat_bvh.verts, splat_bvh.tris,
        sp.means, sp.r2, sp.r3, sp.s2, sp.s3, sp.opacity, sp.colors,
        solid_bvh.node_min, solid_bvh.node_max, solid_bvh.node_left, solid_bvh.node_right,
        solid_bvh.node_start, solid_bvh.node_count, solid_bvh.order,
        solid_bvh.verts, solid_bvh.tris,
        prep.mat_kind, prep.mat_albedo, prep.mat_ior,
        prep.light_pos, prep.light_int,
        prep.background[0], prep.background[1], prep.background[2],
        cfg.eps1, cfg.eps2, prep.advance,
        scr_idx, scr[0], scr[1], scr[2],
    )
    return np.array([r, g, b])


def shadow_transmittance(point, light, scene, config=None):
    """Fraction of a point light that reaches a surface point.

    Solid geometry on the segment blocks completely; each splat crossed
    multiplies by (1 - alpha at the crossing).
    """
    prep = _ensure_prepared(scene, config)
    cfg = prep.config
    p = np.asarray(point, dtype=np.float64).reshape(3)
    lpos = np.asarray(getattr(light, "position", light), dtype=np.float64).reshape(3)
    sp = prep.splats
    sb = prep.splat_bvh
    ob = prep.solid_bvh
    return float(
        _kernels.shadow_factor(
            p[0], p[1], p[2], lpos[0], lpos[1], lpos[2],
            sb.node_min, sb.node_max, sb.node_left, sb.node_right,
            sb.node_start, sb.node_count, sb.order, sb.verts, sb.tris,
            sp.means, sp.r2, sp.r3, sp.s2, sp.s3, sp.opacity,
            ob.node_min, ob.node_max, ob.node_left, ob.node_right,
            ob.node_start, ob.node_count, ob.order, ob.verts, ob.tris,
            prep.advance, cfg.max_gaussians_per_ray,
        )
    )


def render_image(scene, camera, config=None, workers=1):
    """Render the full camera frame to a float64 (H, W, 3) linear image.

    Rows are shaded independently, so the result is bit-identical for any
    worker count.
    """
    prep = _ensure_prepared(scene, config)
    cfg = prep.config
    camera.validate()
    h, w = camera.height, camera.width
    out = np.zeros((h, w, 3))
    sp = prep.splats
    sb = prep.splat_bvh
    ob = prep.solid_bvh
    cam_rot = np.ascontiguousarray(camera.rotation, dtype=np.float64)
    cam_pos = np.ascontiguousarray(camera.position, dtype=np.float64)

    def run(y_lo, y_hi):
        _kernels.render_rows(
            y_lo, y_hi, w, cam_rot, cam_pos,
            camera.focal_x, camera.focal_y, camera.cx, camera.cy,
            cfg.max_bounce_depth,
            sb.node_min, sb.node_max, sb.node_left, sb.node_right,
            sb.node_start, sb.node_count, sb.order, sb.verts, sb.tris,
            sp.means, sp.r2, sp.r3, sp.s2, sp.s3, sp.opacity, sp.colors,
            ob.node_min, ob.node_max, ob.node_left, ob.node_right,
            ob.node_start, ob.node_count, ob.order, ob.verts, ob.tris,
            prep.mat_kind, prep.mat_albedo, prep.mat_ior,
            prep.light_pos, prep.light_int,
            prep.background[0], prep.background[1], prep.background[2],
            cfg.eps1, cfg.eps2, prep.advance, cfg.max_gaussians_per_ray,
            out,
        )

    workers = max(1, int(workers))
    if workers == 1:
        run(0, h)
        return out
    chunk = max(1, -(-h // (workers * 4)))
    spans = [(y, min(y + chunk, h)) for y in range(0, h, chunk)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run, lo, hi) for lo, hi in spans]
        for f in futures:
            f.result()
    return out
