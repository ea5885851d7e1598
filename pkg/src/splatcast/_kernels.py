"""Numba-compiled numeric kernels for tracing, shading, and gradients.

Everything here operates on flat float64/int64 arrays packed by the public
modules. All kernels are pure functions of their inputs (no fastmath, no
shared mutable state), so renders are bit-identical for any worker count.
"""

import math

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True, error_model="numpy")

STACK_DEPTH = 128


@njit(**_JIT)
def ray_tri(ox, oy, oz, dx, dy, dz, ax, ay, az, bx, by, bz, cx, cy, cz, t_min):
    """Moller-Trumbore, two-sided, inclusive barycentric bounds.

    Returns the hit parameter t > t_min, or inf on miss / parallel ray.
    """
    e1x = bx - ax
    e1y = by - ay
    e1z = bz - az
    e2x = cx - ax
    e2y = cy - ay
    e2z = cz - az
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if det == 0.0:
        return np.inf
    inv = 1.0 / det
    tx = ox - ax
    ty = oy - ay
    tz = oz - az
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t <= t_min:
        return np.inf
    return t


@njit(**_JIT)
def _slab(ox, oy, oz, dx, dy, dz, bmin, bmax, t_min):
    """Ray/AABB interval. Returns (hit, entry); conservative at boundaries."""
    near = -np.inf
    far = np.inf
    for ax in range(3):
        if ax == 0:
            o = ox
            d = dx
        elif ax == 1:
            o = oy
            d = dy
        else:
            o = oz
            d = dz
        if -1e-300 < d < 1e-300:
            if o < bmin[ax] or o > bmax[ax]:
                return False, np.inf
        else:
            inv = 1.0 / d
            t1 = (bmin[ax] - o) * inv
            t2 = (bmax[ax] - o) * inv
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > near:
                near = t1
            if t2 < far:
                far = t2
    if far < near or far < t_min:
        return False, np.inf
    if near < t_min:
        near = t_min
    return True, near


@njit(**_JIT)
def bvh_nearest(
    ox, oy, oz, dx, dy, dz, t_min, t_max,
    node_min, node_max, node_left, node_right, node_start, node_count,
    order, verts, tris,
):
    """Nearest triangle hit with t_min < t < t_max over a flattened BVH.

    Ties at identical t go to the smaller global triangle index, so the
    result equals a brute-force scan in index order. Returns (t, index)
    with index == -1 on miss.
    """
    best_t = np.inf
    best_i = np.int64(-1)
    n_nodes = node_min.shape[0]
    if n_nodes == 0:
        return best_t, best_i
    stack = np.empty(STACK_DEPTH, dtype=np.int64)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        cnt = node_count[node]
        if cnt > 0:
            s0 = node_start[node]
            for j in range(s0, s0 + cnt):
                gidx = order[j]
                i0 = tris[gidx, 0]
                i1 = tris[gidx, 1]
                i2 = tris[gidx, 2]
                t = ray_tri(
                    ox, oy, oz, dx, dy, dz,
                    verts[i0, 0], verts[i0, 1], verts[i0, 2],
                    verts[i1, 0], verts[i1, 1], verts[i1, 2],
                    verts[i2, 0], verts[i2, 1], verts[i2, 2],
                    t_min,
                )
                if t < t_max and (t < best_t or (t == best_t and gidx < best_i)):
                    best_t = t
                    best_i = gidx
        else:
            left = node_left[node]
            right = node_right[node]
            hit_l, near_l = _slab(ox, oy, oz, dx, dy, dz, node_min[left], node_max[left], t_min)
            hit_r, near_r = _slab(ox, oy, oz, dx, dy, dz, node_min[right], node_max[right], t_min)
            if hit_l and (near_l > best_t or near_l >= t_max):
                hit_l = False
            if hit_r and (near_r > best_t or near_r >= t_max):
                hit_r = False
            if hit_l and hit_r:
                if near_l <= near_r:  # push far child first so near pops first
                    stack[sp] = right
                    stack[sp + 1] = left
                else:
                    stack[sp] = left
                    stack[sp + 1] = right
                sp += 2
            elif hit_l:
                stack[sp] = left
                sp += 1
            elif hit_r:
                stack[sp] = right
                sp += 1
    if best_i < 0:
        return np.inf, np.int64(-1)
    return best_t, best_i


@njit(**_JIT)
def brute_nearest(ox, oy, oz, dx, dy, dz, t_min, t_max, verts, tris):
    """All-triangles scan sharing ray_tri; the traversal oracle."""
    best_t = np.inf
    best_i = np.int64(-1)
    for gidx in range(tris.shape[0]):
        i0 = tris[gidx, 0]
        i1 = tris[gidx, 1]
        i2 = tris[gidx, 2]
        t = ray_tri(
            ox, oy, oz, dx, dy, dz,
            verts[i0, 0], verts[i0, 1], verts[i0, 2],
            verts[i1, 0], verts[i1, 1], verts[i1, 2],
            verts[i2, 0], verts[i2, 1], verts[i2, 2],
            t_min,
        )
        if t < t_max and t < best_t:
            best_t = t
            best_i = gidx
    if best_i < 0:
        return np.inf, np.int64(-1)
    return best_t, best_i


@njit(**_JIT)
def splat_alpha(px, py, pz, s, means, r2, r3, s2, s3, opacity):
    """Opacity-scaled Gaussian falloff at a world point on splat s's plane."""
    vx = px - means[s, 0]
    vy = py - means[s, 1]
    vz = pz - means[s, 2]
    yy = r2[s, 0] * vx + r2[s, 1] * vy + r2[s, 2] * vz
    zz = r3[s, 0] * vx + r3[s, 1] * vy + r3[s, 2] * vz
    ys = yy / s2[s]
    zs = zz / s3[s]
    return opacity[s] * math.exp(-0.5 * (ys * ys + zs * zs))


@njit(**_JIT)
def collect_hits(
    ox, oy, oz, dx, dy, dz, t_min, t_max,
    node_min, node_max, node_left, node_right, node_start, node_count,
    order, verts, tris,
    hit_t, hit_i,
):
    """Gather every triangle hit with t_min < t < t_max in a single BVH pass.

    Fills hit_t/hit_i (sized for all triangles) and returns the count,
    sorted ascending by (t, global triangle index) so walking the result
    reproduces a repeated nearest-hit search exactly.
    """
    n_nodes = node_min.shape[0]
    n = 0
    if n_nodes == 0:
        return n
    stack = np.empty(STACK_DEPTH, dtype=np.int64)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        cnt = node_count[node]
        if cnt > 0:
            s0 = node_start[node]
            for j in range(s0, s0 + cnt):
                gidx = order[j]
                i0 = tris[gidx, 0]
                i1 = tris[gidx, 1]
                i2 = tris[gidx, 2]
                t = ray_tri(
                    ox, oy, oz, dx, dy, dz,
                    verts[i0, 0], verts[i0, 1], verts[i0, 2],
                    verts[i1, 0], verts[i1, 1], verts[i1, 2],
                    verts[i2, 0], verts[i2, 1], verts[i2, 2],
                    t_min,
                )
                if t < t_max:
                    hit_t[n] = t
                    hit_i[n] = gidx
                    n += 1
        else:
            left = node_left[node]
            right = node_right[node]
            hit_l, near_l = _slab(ox, oy, oz, dx, dy, dz, node_min[left], node_max[left], t_min)
            hit_r, near_r = _slab(ox, oy, oz, dx, dy, dz, node_min[right], node_max[right], t_min)
            if hit_l and near_l < t_max:
                stack[sp] = left
                sp += 1
            if hit_r and near_r < t_max:
                stack[sp] = right
                sp += 1
    # insertion sort on (t, index); hit counts are small in practice
    for a in range(1, n):
        tv = hit_t[a]
        iv = hit_i[a]
        b = a - 1
        while b >= 0 and (hit_t[b] > tv or (hit_t[b] == tv and hit_i[b] > iv)):
            hit_t[b + 1] = hit_t[b]
            hit_i[b + 1] = hit_i[b]
            b -= 1
        hit_t[b + 1] = tv
        hit_i[b + 1] = iv
    return n


@njit(**_JIT)
def aggregate(
    ox, oy, oz, dx, dy, dz, t_start, t_max,
    node_min, node_max, node_left, node_right, node_start, node_count, order, verts, tris,
    means, r2, r3, s2, s3, opacity, colors,
    eps1, eps2, advance,
    out_idx, out_t, out_t1, out_t2,
):
    """Front-to-back color aggregation along one ray (splats only).

    Walks nearest hits, accumulating c*alpha*T1 and attenuating T1; once T1
    drops below eps1 a second transmittance T2 starts attenuating on the
    following hits, and T2 < eps2 terminates. Splat indices and hit
    parameters are recorded into out_idx/out_t with a -1 sentinel after the
    last entry (when there is room). Returns (r, g, b, T1, n_recorded);
    the caller composites the remaining T1 over its background or surface.
    """
    hit_t = np.empty(tris.shape[0], dtype=np.float64)
    hit_i = np.empty(tris.shape[0], dtype=np.int64)
    n_hits = collect_hits(
        ox, oy, oz, dx, dy, dz, t_start, t_max,
        node_min, node_max, node_left, node_right, node_start, node_count,
        order, verts, tris,
        hit_t, hit_i,
    )
    t1 = 1.0
    t2 = 1.0
    cr = 0.0
    cg = 0.0
    cb = 0.0
    second = False
    tmin = t_start
    max_k = out_idx.shape[0]
    n_rec = 0
    stopped = False
    for h in range(n_hits):
        t = hit_t[h]
        if t <= tmin:
            continue  # within the advance window of the previous hit
        if n_rec >= max_k:
            stopped = True
            break
        gidx = hit_i[h]
        k = n_rec
        s = gidx // 6
        out_idx[k] = s
        out_t[k] = t
        a = splat_alpha(ox + t * dx, oy + t * dy, oz + t * dz, s, means, r2, r3, s2, s3, opacity)
        cr += colors[s, 0] * a * t1
        cg += colors[s, 1] * a * t1
        cb += colors[s, 2] * a * t1
        t1 *= 1.0 - a
        if t1 < eps1:
            if not second:
                second = True
            else:
                t2 *= 1.0 - a
        out_t1[k] = t1
        out_t2[k] = t2
        n_rec = k + 1
        if t2 < eps2:
            stopped = True
            break
        tmin = t + advance
    if n_rec < max_k and (not stopped or t2 < eps2):
        out_idx[n_rec] = -1
    return cr, cg, cb, t1, n_rec


@njit(**_JIT)
def shadow_factor(
    px, py, pz, lx, ly, lz,
    sp_min, sp_max, sp_left, sp_right, sp_start, sp_count, sp_order, sp_verts, sp_tris,
    means, r2, r3, s2, s3, opacity,
    so_min, so_max, so_left, so_right, so_start, so_count, so_order, so_verts, so_tris,
    advance, max_k,
):
    """Transmittance of the segment point->light: prod(1 - alpha_i) over
    crossed splats, or 0 if any solid blocks the segment."""
    sx = lx - px
    sy = ly - py
    sz = lz - pz
    dist = math.sqrt(sx * sx + sy * sy + sz * sz)
    if dist < 1e-300:
        return 1.0
    dx = sx / dist
    dy = sy / dist
    dz = sz / dist
    t_hi = dist - advance
    _, blocker = bvh_nearest(
        px, py, pz, dx, dy, dz, advance, t_hi,
        so_min, so_max, so_left, so_right, so_start, so_count, so_order, so_verts, so_tris,
    )
    if blocker >= 0:
        return 0.0
    trans = 1.0
    tmin = advance
    for _ in range(max_k):
        t, gidx = bvh_nearest(
            px, py, pz, dx, dy, dz, tmin, t_hi,
            sp_min, sp_max, sp_left, sp_right, sp_start, sp_count, sp_order, sp_verts, sp_tris,
        )
        if gidx < 0:
            break
        s = gidx // 6
        a = splat_alpha(
            px + t * dx, py + t * dy, pz + t * dz, s, means, r2, r3, s2, s3, opacity
        )
        trans *= 1.0 - a
        if trans <= 0.0:
            return 0.0
        tmin = t + advance
    return trans


@njit(**_JIT)
def shade(
    ox, oy, oz, dx, dy, dz, t_start, budget,
    sp_min, sp_max, sp_left, sp_right, sp_start, sp_count, sp_order, sp_verts, sp_tris,
    means, r2, r3, s2, s3, opacity, colors,
    so_min, so_max, so_left, so_right, so_start, so_count, so_order, so_verts, so_tris,
    mat_kind, mat_albedo, mat_ior,
    light_pos, light_int,
    bg0, bg1, bg2, eps1, eps2, advance,
    scr_idx, scr_t, scr_t1, scr_t2,
):
    """Full shading of one ray: splat compositing interleaved with solid
    surfaces (diffuse with point-light shadows, mirror, glass), following
    at most `budget` secondary continuations. Returns linear RGB.
    """
    out_r = 0.0
    out_g = 0.0
    out_b = 0.0
    th_r = 1.0
    th_g = 1.0
    th_b = 1.0
    tmin = t_start
    bounce = 0
    while True:
        ts, sgidx = bvh_nearest(
            ox, oy, oz, dx, dy, dz, tmin, np.inf,
            so_min, so_max, so_left, so_right, so_start, so_count, so_order, so_verts, so_tris,
        )
        t_cut = ts if sgidx >= 0 else np.inf
        cr, cg, cb, t1, _ = aggregate(
            ox, oy, oz, dx, dy, dz, tmin, t_cut,
            sp_min, sp_max, sp_left, sp_right, sp_start, sp_count, sp_order, sp_verts, sp_tris,
            means, r2, r3, s2, s3, opacity, colors,
            eps1, eps2, advance,
            scr_idx, scr_t, scr_t1, scr_t2,
        )
        out_r += th_r * cr
        out_g += th_g * cg
        out_b += th_b * cb
        th_r *= t1
        th_g *= t1
        th_b *= t1
        if sgidx < 0:
            out_r += th_r * bg0
            out_g += th_g * bg1
            out_b += th_b * bg2
            break
        px = ox + ts * dx
        py = oy + ts * dy
        pz = oz + ts * dz
        i0 = so_tris[sgidx, 0]
        i1 = so_tris[sgidx, 1]
        i2 = so_tris[sgidx, 2]
        e1x = so_verts[i1, 0] - so_verts[i0, 0]
        e1y = so_verts[i1, 1] - so_verts[i0, 1]
        e1z = so_verts[i1, 2] - so_verts[i0, 2]
        e2x = so_verts[i2, 0] - so_verts[i0, 0]
        e2y = so_verts[i2, 1] - so_verts[i0, 1]
        e2z = so_verts[i2, 2] - so_verts[i0, 2]
        ngx = e1y * e2z - e1z * e2y
        ngy = e1z * e2x - e1x * e2z
        ngz = e1x * e2y - e1y * e2x
        nn = math.sqrt(ngx * ngx + ngy * ngy + ngz * ngz)
        ngx /= nn
        ngy /= nn
        ngz /= nn
        d_dot_n = dx * ngx + dy * ngy + dz * ngz
        # normal facing the incoming ray
        if d_dot_n > 0.0:
            nfx = -ngx
            nfy = -ngy
            nfz = -ngz
        else:
            nfx = ngx
            nfy = ngy
            nfz = ngz
        kind = mat_kind[sgidx]
        if kind == 0:  # diffuse: direct point lights with shadow attenuation
            lr = 0.0
            lg = 0.0
            lb = 0.0
            for li in range(light_pos.shape[0]):
                wx = light_pos[li, 0] - px
                wy = light_pos[li, 1] - py
                wz = light_pos[li, 2] - pz
                wd = math.sqrt(wx * wx + wy * wy + wz * wz)
                if wd < 1e-300:
                    continue
                cosi = (wx * nfx + wy * nfy + wz * nfz) / wd
                if cosi <= 0.0:
                    continue
                sh = shadow_factor(
                    px, py, pz,
                    light_pos[li, 0], light_pos[li, 1], light_pos[li, 2],
                    sp_min, sp_max, sp_left, sp_right, sp_start, sp_count,
                    sp_order, sp_verts, sp_tris,
                    means, r2, r3, s2, s3, opacity,
                    so_min, so_max, so_left, so_right, so_start, so_count,
                    so_order, so_verts, so_tris,
                    advance, scr_idx.shape[0],
                )
                if sh <= 0.0:
                    continue
                lr += light_int[li, 0] * cosi * sh
                lg += light_int[li, 1] * cosi * sh
                lb += light_int[li, 2] * cosi * sh
            out_r += th_r * mat_albedo[sgidx, 0] * lr
            out_g += th_g * mat_albedo[sgidx, 1] * lg
            out_b += th_b * mat_albedo[sgidx, 2] * lb
            break
        if bounce >= budget:
            break  # recursion exhausted: surface contributes black
        bounce += 1
        th_r *= mat_albedo[sgidx, 0]
        th_g *= mat_albedo[sgidx, 1]
        th_b *= mat_albedo[sgidx, 2]
        if kind == 1:  # mirror
            dd = 2.0 * (dx * nfx + dy * nfy + dz * nfz)
            dx = dx - dd * nfx
            dy = dy - dd * nfy
            dz = dz - dd * nfz
        else:  # glass: Snell refraction, mirror fallback on total internal reflection
            ior = mat_ior[sgidx]
            if d_dot_n < 0.0:
                eta = 1.0 / ior
            else:
                eta = ior
            cosi = -(dx * nfx + dy * nfy + dz * nfz)
            kref = 1.0 - eta * eta * (1.0 - cosi * cosi)
            if kref < 0.0:
                dd = 2.0 * (dx * nfx + dy * nfy + dz * nfz)
                dx = dx - dd * nfx
                dy = dy - dd * nfy
                dz = dz - dd * nfz
            else:
                kq = eta * cosi - math.sqrt(kref)
                dx = eta * dx + kq * nfx
                dy = eta * dy + kq * nfy
                dz = eta * dz + kq * nfz
        dn = math.sqrt(dx * dx + dy * dy + dz * dz)
        dx /= dn
        dy /= dn
        dz /= dn
        ox = px
        oy = py
        oz = pz
        tmin = advance
    return out_r, out_g, out_b


@njit(**_JIT)
def camera_ray_dir(x, y, cam_rot, fx, fy, cx, cy):
    """Unit world direction through pixel center (x, y); camera looks down -z."""
    u = (x + 0.5 - cx) / fx
    v = (cy - (y + 0.5)) / fy
    wx = cam_rot[0, 0] * u + cam_rot[0, 1] * v - cam_rot[0, 2]
    wy = cam_rot[1, 0] * u + cam_rot[1, 1] * v - cam_rot[1, 2]
    wz = cam_rot[2, 0] * u + cam_rot[2, 1] * v - cam_rot[2, 2]
    n = math.sqrt(wx * wx + wy * wy + wz * wz)
    return wx / n, wy / n, wz / n


@njit(**_JIT)
def render_rows(
    y_lo, y_hi, width, cam_rot, cam_pos, fx, fy, cx, cy, budget,
    sp_min, sp_max, sp_left, sp_right, sp_start, sp_count, sp_order, sp_verts, sp_tris,
    means, r2, r3, s2, s3, opacity, colors,
    so_min, so_max, so_left, so_right, so_start, so_count, so_order, so_verts, so_tris,
    mat_kind, mat_albedo, mat_ior,
    light_pos, light_int,
    bg0, bg1, bg2, eps1, eps2, advance, max_k,
    out,
):
    """Shade all pixels of rows [y_lo, y_hi) into out (disjoint writes)."""
    scr_idx = np.empty(max_k, dtype=np.int64)
    scr_t = np.empty(max_k, dtype=np.float64)
    scr_t1 = np.empty(max_k, dtype=np.float64)
    scr_t2 = np.empty(max_k, dtype=np.float64)
    for y in range(y_lo, y_hi):
        for x in range(width):
            dx, dy, dz = camera_ray_dir(x, y, cam_rot, fx, fy, cx, cy)
            r, g, b = shade(
                cam_pos[0], cam_pos[1], cam_pos[2], dx, dy, dz, 0.0, budget,
                sp_min, sp_max, sp_left, sp_right, sp_start, sp_count, sp_order, sp_verts, sp_tris,
                means, r2, r3, s2, s3, opacity, colors,
                so_min, so_max, so_left, so_right, so_start, so_count, so_order, so_verts, so_tris,
                mat_kind, mat_albedo, mat_ior,
                light_pos, light_int,
                bg0, bg1, bg2, eps1, eps2, advance,
                scr_idx, scr_t, scr_t1, scr_t2,
            )
            out[y, x, 0] = r
            out[y, x, 1] = g
            out[y, x, 2] = b


@njit(**_JIT)
def forward_records_rows(
    y_lo, y_hi, width, cam_rot, cam_pos, fx, fy, cx, cy,
    sp_min, sp_max, sp_left, sp_right, sp_start, sp_count, sp_order, sp_verts, sp_tris,
    means, r2, r3, s2, s3, opacity, colors,
    bg0, bg1, bg2, eps1, eps2, advance,
    out_img, rec_idx, rec_t, rec_n, rays_o, rays_d,
):
    """Splat-only forward pass storing per-pixel hit records for gradients."""
    max_k = rec_idx.shape[1]
    scr_t1 = np.empty(max_k, dtype=np.float64)
    scr_t2 = np.empty(max_k, dtype=np.float64)
    for y in range(y_lo, y_hi):
        for x in range(width):
            pix = y * width + x
            dx, dy, dz = camera_ray_dir(x, y, cam_rot, fx, fy, cx, cy)
            rays_o[pix, 0] = cam_pos[0]
            rays_o[pix, 1] = cam_pos[1]
            rays_o[pix, 2] = cam_pos[2]
            rays_d[pix, 0] = dx
            rays_d[pix, 1] = dy
            rays_d[pix, 2] = dz
            cr, cg, cb, t1, n_rec = aggregate(
                cam_pos[0], cam_pos[1], cam_pos[2], dx, dy, dz, 0.0, np.inf,
                sp_min, sp_max, sp_left, sp_right, sp_start, sp_count, sp_order, sp_verts, sp_tris,
                means, r2, r3, s2, s3, opacity, colors,
                eps1, eps2, advance,
                rec_idx[pix], rec_t[pix], scr_t1, scr_t2,
            )
            rec_n[pix] = n_rec
            out_img[y, x, 0] = cr + t1 * bg0
            out_img[y, x, 1] = cg + t1 * bg1
            out_img[y, x, 2] = cb + t1 * bg2


@njit(**_JIT)
def replay_records(
    rec_idx, rec_t, rec_n, rays_o, rays_d,
    means, r2, r3, s2, s3, opacity, colors,
    bg0, bg1, bg2,
    out_color,
):
    """Re-composite recorded hits under (possibly perturbed) splat params.

    Hit points stay fixed at o + t*d from the records: the fixed-hit
    convention shared with the analytic backward pass.
    """
    n_pix = rec_idx.shape[0]
    for pix in range(n_pix):
        t1 = 1.0
        cr = 0.0
        cg = 0.0
        cb = 0.0
        ox = rays_o[pix, 0]
        oy = rays_o[pix, 1]
        oz = rays_o[pix, 2]
        dx = rays_d[pix, 0]
        dy = rays_d[pix, 1]
        dz = rays_d[pix, 2]
        for j in range(rec_n[pix]):
            s = rec_idx[pix, j]
            t = rec_t[pix, j]
            a = splat_alpha(
                ox + t * dx, oy + t * dy, oz + t * dz, s, means, r2, r3, s2, s3, opacity
            )
            cr += colors[s, 0] * a * t1
            cg += colors[s, 1] * a * t1
            cb += colors[s, 2] * a * t1
            t1 *= 1.0 - a
        out_color[pix, 0] = cr + t1 * bg0
        out_color[pix, 1] = cg + t1 * bg1
        out_color[pix, 2] = cb + t1 * bg2


@njit(**_JIT)
def backward_records(
    rec_idx, rec_t, rec_n, rays_o, rays_d, dL_dC,
    means, r2, r3, s2, s3, opacity, colors, quats,
    bg0, bg1, bg2,
    g_color, g_opacity, g_mean, g_quat, g_ls2, g_ls3,
):
    """Adjoint of the recorded compositing chain, fixed-hit convention.

    Accumulates parameter gradients per splat in a fixed pixel order, so
    the reduction is deterministic. Geometry gradients flow only through
    the Gaussian exponent at the recorded world hit points; quaternion
    gradients are projected onto the unit-sphere tangent at q.
    """
    n_pix = rec_idx.shape[0]
    max_k = rec_idx.shape[1]
    alpha = np.empty(max_k, dtype=np.float64)
    falloff = np.empty(max_k, dtype=np.float64)
    t1pre = np.empty(max_k, dtype=np.float64)
    yyv = np.empty(max_k, dtype=np.float64)
    zzv = np.empty(max_k, dtype=np.float64)
    for pix in range(n_pix):
        n = rec_n[pix]
        glr = dL_dC[pix, 0]
        glg = dL_dC[pix, 1]
        glb = dL_dC[pix, 2]
        if n == 0 or (glr == 0.0 and glg == 0.0 and glb == 0.0):
            continue
        ox = rays_o[pix, 0]
        oy = rays_o[pix, 1]
        oz = rays_o[pix, 2]
        dx = rays_d[pix, 0]
        dy = rays_d[pix, 1]
        dz = rays_d[pix, 2]
        t1 = 1.0
        for j in range(n):
            s = rec_idx[pix, j]
            t = rec_t[pix, j]
            vx = ox + t * dx - means[s, 0]
            vy = oy + t * dy - means[s, 1]
            vz = oz + t * dz - means[s, 2]
            yy = r2[s, 0] * vx + r2[s, 1] * vy + r2[s, 2] * vz
            zz = r3[s, 0] * vx + r3[s, 1] * vy + r3[s, 2] * vz
            ys = yy / s2[s]
            zs = zz / s3[s]
            e = math.exp(-0.5 * (ys * ys + zs * zs))
            yyv[j] = yy
            zzv[j] = zz
            falloff[j] = e
            alpha[j] = opacity[s] * e
            t1pre[j] = t1
            t1 *= 1.0 - alpha[j]
        # suffix composite color seen just after each hit, background included
        sfr = bg0
        sfg = bg1
        sfb = bg2
        for j in range(n - 1, -1, -1):
            s = rec_idx[pix, j]
            t = rec_t[pix, j]
            a = alpha[j]
            t1j = t1pre[j]
            g_color[s, 0] += a * t1j * glr
            g_color[s, 1] += a * t1j * glg
            g_color[s, 2] += a * t1j * glb
            ga = t1j * (
                (colors[s, 0] - sfr) * glr
                + (colors[s, 1] - sfg) * glg
                + (colors[s, 2] - sfb) * glb
            )
            g_opacity[s] += falloff[j] * ga
            grho = -0.5 * a * ga
            yy = yyv[j]
            zz = zzv[j]
            is2 = 1.0 / (s2[s] * s2[s])
            is3 = 1.0 / (s3[s] * s3[s])
            gy = grho * 2.0 * yy * is2
            gz = grho * 2.0 * zz * is3
            g_mean[s, 0] += -(gy * r2[s, 0] + gz * r3[s, 0])
            g_mean[s, 1] += -(gy * r2[s, 1] + gz * r3[s, 1])
            g_mean[s, 2] += -(gy * r2[s, 2] + gz * r3[s, 2])
            g_ls2[s] += grho * (-2.0 * yy * yy * is2)
            g_ls3[s] += grho * (-2.0 * zz * zz * is3)
            qw = quats[s, 0]
            qx = quats[s, 1]
            qy = quats[s, 2]
            qz = quats[s, 3]
            vx = ox + t * dx - means[s, 0]
            vy = oy + t * dy - means[s, 1]
            vz = oz + t * dz - means[s, 2]
            # d(r2)/dq and d(r3)/dq contracted with v = p - m
            gq_w = gy * (-2.0 * qz * vx + 2.0 * qx * vz) + gz * (2.0 * qy * vx - 2.0 * qx * vy)
            gq_x = gy * (2.0 * qy * vx - 4.0 * qx * vy + 2.0 * qw * vz) + gz * (
                2.0 * qz * vx - 2.0 * qw * vy - 4.0 * qx * vz
            )
            gq_y = gy * (2.0 * qx * vx + 2.0 * qz * vz) + gz * (
                2.0 * qw * vx + 2.0 * qz * vy - 4.0 * qy * vz
            )
            gq_z = gy * (-2.0 * qw * vx - 4.0 * qz * vy + 2.0 * qy * vz) + gz * (
                2.0 * qx * vx + 2.0 * qy * vy
            )
            qdot = gq_w * qw + gq_x * qx + gq_y * qy + gq_z * qz
            g_quat[s, 0] += gq_w - qdot * qw
            g_quat[s, 1] += gq_x - qdot * qx
            g_quat[s, 2] += gq_y - qdot * qy
            g_quat[s, 3] += gq_z - qdot * qz
            sfr = colors[s, 0] * a + (1.0 - a) * sfr
            sfg = colors[s, 1] * a + (1.0 - a) * sfg
            sfb = colors[s, 2] * a + (1.0 - a) * sfb
