"""Differentiable fitting of splat parameters to reference images.

The forward model is the same compositing the renderer uses (splats only,
no solids); gradients flow through color, opacity, and the Gaussian
exponent under the fixed-hit convention: recorded world hit points are held
constant while mean, scales, and orientation move. That convention is
shared by the analytic backward pass, the record replay used for finite
differences, and the optimizer.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import FlatGaussian
from .errors import ContractError, FitDivergenceError, ValidationError
from .render import RenderConfig, camera_ray, pack_splats, prepare_scene, splat_bvh_from_arrays
from .scene import Scene

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# metrics

def psnr(image, reference, data_range=1.0):
    """Peak signal-to-noise ratio in dB, capped at 100 for near-exact pairs."""
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10 * data_range * data_range:
        return 100.0
    return 10.0 * math.log10(data_range * data_range / mse)


def _gaussian_taps(sigma=1.5, radius=5):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter2d(img, taps):
    """Separable filtering with symmetric (edge-mirrored) boundaries."""
    r = (len(taps) - 1) // 2
    pad = np.pad(img, ((r, r), (r, r)), mode="symmetric")
    tmp = np.apply_along_axis(lambda m: np.convolve(m, taps, mode="valid"), 0, pad)
    return np.apply_along_axis(lambda m: np.convolve(m, taps, mode="valid"), 1, tmp)


def ssim(image, reference, data_range=1.0, k1=0.01, k2=0.03, sigma=1.5):
    """Mean structural similarity with an 11-tap Gaussian window.

    Population (not sample) local covariances; the map is cropped by the
    window radius before averaging. Multi-channel inputs are averaged over
    channels.
    """
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    radius = 5
    if min(a.shape[0], a.shape[1]) < 2 * radius + 1:
        raise ValidationError("images smaller than the 11x11 ssim window")
    taps = _gaussian_taps(sigma, radius)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x = a[:, :, ch]
        y = b[:, :, ch]
        ux = _filter2d(x, taps)
        uy = _filter2d(y, taps)
        vx = _filter2d(x * x, taps) - ux * ux
        vy = _filter2d(y * y, taps) - uy * uy
        vxy = _filter2d(x * y, taps) - ux * uy
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        vals.append(float(s[radius:-radius, radius:-radius].mean()))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# gradients

@dataclass
class GradientBuffer:
    """Per-splat parameter gradients accumulated over rays.

    Scale gradients are with respect to log s2 / log s3; quaternion
    gradients live in the tangent plane of the unit sphere at q.
    """

    mean: np.ndarray
    quat: np.ndarray
    log_s2: np.ndarray
    log_s3: np.ndarray
    opacity: np.ndarray
    color: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(
            mean=np.zeros((n, 3)), quat=np.zeros((n, 4)),
            log_s2=np.zeros(n), log_s3=np.zeros(n),
            opacity=np.zeros(n), color=np.zeros((n, 3)),
        )

    def clear(self):
        for a in (self.mean, self.quat, self.log_s2, self.log_s3, self.opacity, self.color):
            a[:] = 0.0


def _quat_cols(quats):
    """Second and third rotation columns for an (N, 4) unit quaternion array."""
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    r2 = np.stack([2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)], axis=1)
    r3 = np.stack([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)], axis=1)
    return r2, r3


def backward_ray(record, ray, scene, dL_dC, grads):
    """Accumulate dL/d(params) for one traced ray into grads.

    record must come from aggregate_color on the same scene; dL_dC is the
    3-vector adjoint of the ray's composited color (background included).
    """
    prep = prepare_scene(scene) if isinstance(scene, Scene) else scene
    sp = prep.splats
    n = record.n_hits
    if n > 0 and int(record.indices[:n].max()) >= sp.count:
        raise ContractError("record references splats missing from the scene")
    if grads.mean.shape[0] != sp.count:
        raise ContractError(
            f"gradient buffer sized for {grads.mean.shape[0]} splats, scene has {sp.count}"
        )
    rec_idx = np.ascontiguousarray(record.indices[:max(n, 1)]).reshape(1, -1)
    rec_t = np.ascontiguousarray(record.hit_ts[:max(n, 1)]).reshape(1, -1)
    rec_n = np.array([n], dtype=np.int64)
    rays_o = ray.origin.reshape(1, 3)
    rays_d = ray.direction.reshape(1, 3)
    adj = np.asarray(dL_dC, dtype=np.float64).reshape(1, 3)
    _kernels.backward_records(
        rec_idx, rec_t, rec_n, rays_o, rays_d, adj,
        sp.means, sp.r2, sp.r3, sp.s2, sp.s3, sp.opacity, sp.colors, sp.quats,
        prep.background[0], prep.background[1], prep.background[2],
        grads.color, grads.opacity, grads.mean, grads.quat, grads.log_s2, grads.log_s3,
    )
    return grads


class _Params:
    """Optimization state: per-splat offsets from the initial parameters.

    Storing offsets (rather than transformed absolutes) makes a zero offset
    reproduce the initial packed arrays bit for bit: means and colors add
    +0.0, scales multiply by exp(0) == 1, and the opacity / orientation
    materializers fall back to the frozen initial columns wherever the
    offset is still exactly zero. A scene fit to renders of itself therefore
    sees an exactly-zero gradient and never moves, instead of picking up
    round-off from log/exp and logit/sigmoid round trips that Adam's
    normalized steps would amplify to full learning-rate drift.
    """

    def __init__(self, gaussians):
        arrays = pack_splats(gaussians)
        self.means0 = arrays.means
        self.quats0 = arrays.quats
        self.r2_0 = arrays.r2
        self.r3_0 = arrays.r3
        self.s2_0 = arrays.s2
        self.s3_0 = arrays.s3
        self.op0 = arrays.opacity
        self.colors0 = arrays.colors
        op = np.clip(arrays.opacity, 1e-7, 1.0 - 1e-7)
        self.logit0 = np.log(op / (1.0 - op))
        self.eps_flat = np.array([g.scales[0] for g in gaussians])
        n = arrays.means.shape[0]
        self.d_mean = np.zeros((n, 3))
        self.d_quat = np.zeros((n, 4))
        self.d_log_s2 = np.zeros(n)
        self.d_log_s3 = np.zeros(n)
        self.d_logit = np.zeros(n)
        self.d_color = np.zeros((n, 3))

    @property
    def count(self):
        return self.means0.shape[0]

    @property
    def quats_raw(self):
        """Current un-normalized quaternion rows (initial + offset)."""
        return self.quats0 + self.d_quat

    def snapshot(self):
        """Current packed splat columns (normalized / squashed)."""
        q = self.quats_raw
        qn = q / np.linalg.norm(q, axis=1, keepdims=True)
        r2, r3 = _quat_cols(qn)
        still = ~np.any(self.d_quat != 0.0, axis=1)
        if np.any(still):
            qn[still] = self.quats0[still]
            r2[still] = self.r2_0[still]
            r3[still] = self.r3_0[still]
        opacity = np.where(
            self.d_logit == 0.0, self.op0,
            1.0 / (1.0 + np.exp(-(self.logit0 + self.d_logit))),
        )
        from .render import SplatArrays

        return SplatArrays(
            means=self.means0 + self.d_mean, quats=qn, r2=r2, r3=r3,
            s2=self.s2_0 * np.exp(self.d_log_s2),
            s3=self.s3_0 * np.exp(self.d_log_s3),
            opacity=opacity,
            colors=self.colors0 + self.d_color,
        )

    def to_gaussians(self):
        arrays = self.snapshot()
        out = []
        for i in range(self.count):
            out.append(
                FlatGaussian(
                    mean=arrays.means[i].copy(),
                    quaternion=arrays.quats[i].copy(),
                    scales=np.array([self.eps_flat[i], arrays.s2[i], arrays.s3[i]]),
                    opacity_hat=float(arrays.opacity[i]),
                    color=np.clip(arrays.colors[i], 0.0, 1.0),
                )
            )
        return out


class Adam:
    """Standard Adam update with bias correction, one instance per array."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, param, grad):
        if self.m is None:
            self.m = np.zeros_like(param)
            self.v = np.zeros_like(param)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        param -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class FitConfig:
    """Optimizer settings; geometry rates sit an order of magnitude below
    the appearance rates by default."""

    iterations: int = 500
    lr_color: float = 0.025
    lr_opacity: float = 0.05
    lr_mean: float = 0.002
    lr_scale: float = 0.002
    lr_quat: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    divergence_factor: float = 10.0
    log_every: int = 50

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        for name in ("lr_color", "lr_opacity", "lr_mean", "lr_scale", "lr_quat"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")


@dataclass
class FitResult:
    gaussians: list
    loss_history: np.ndarray
    initial_psnr: float
    final_psnr: float
    iterations: int


def _forward_all(params, cameras, targets, background, config, rec, rays, imgs):
    """Render every camera from the current params, filling records.

    Returns the scalar loss (mean squared error over all pixels/channels).
    """
    arrays = params.snapshot()
    bvh = splat_bvh_from_arrays(arrays, config.level)
    sq_sum = 0.0
    n_elem = 0
    diag = 1.0
    if bvh.verts.shape[0]:
        diag = float(np.linalg.norm(bvh.verts.max(axis=0) - bvh.verts.min(axis=0))) or 1.0
    advance = config.advance_eps * diag
    for ci, cam in enumerate(cameras):
        _kernels.forward_records_rows(
            0, cam.height, cam.width,
            np.ascontiguousarray(cam.rotation), np.ascontiguousarray(cam.position),
            cam.focal_x, cam.focal_y, cam.cx, cam.cy,
            bvh.node_min, bvh.node_max, bvh.node_left, bvh.node_right,
            bvh.node_start, bvh.node_count, bvh.order, bvh.verts, bvh.tris,
            arrays.means, arrays.r2, arrays.r3, arrays.s2, arrays.s3,
            arrays.opacity, arrays.colors,
            background[0], background[1], background[2],
            config.eps1, config.eps2, advance,
            imgs[ci], rec[ci][0], rec[ci][1], rec[ci][2], rays[ci][0], rays[ci][1],
        )
        sq_sum += float(np.sum((imgs[ci] - targets[ci]) ** 2))
        n_elem += imgs[ci].size
    return sq_sum / n_elem, arrays


def fit(scene, target_images, cameras, fit_config=None, render_config=None):
    """Optimize splat parameters so renders match the target images.

    Targets are linear float (H, W, 3) arrays, one per camera. The loss is
    the mean squared error over every pixel and channel; its history (one
    entry per iteration, evaluated before that iteration's update) comes
    back in the result. Optimization aborts with FitDivergenceError when
    the loss exceeds divergence_factor times its starting value (with a
    1e-12 absolute floor, so an already-converged start whose loss is
    dominated by round-off is not misread as divergence).
    """
    targets = target_images
    fit_config = fit_config or FitConfig()
    render_config = render_config or RenderConfig()
    if scene.solids:
        raise ValidationError("fitting supports splat-only scenes")
    if len(cameras) != len(targets):
        raise ValidationError("need exactly one target image per camera")
    if not cameras:
        raise ValidationError("need at least one camera")
    for cam, tgt in zip(cameras, targets):
        cam.validate()
        if tgt.shape != (cam.height, cam.width, 3):
            raise ValidationError(
                f"target shape {tgt.shape} does not match camera {(cam.height, cam.width, 3)}"
            )

    params = _Params(scene.gaussians)
    n = params.count
    if n == 0:
        raise ValidationError("scene has no splats to fit")
    background = np.asarray(scene.background, dtype=np.float64).reshape(3)
    targets = [np.ascontiguousarray(t, dtype=np.float64) for t in targets]

    # per-ray hit capacity: a ray crosses each splat plane at most once
    max_k = min(render_config.max_gaussians_per_ray, n)
    rec = []
    rays = []
    imgs = []
    n_elem = 0
    for cam in cameras:
        p = cam.height * cam.width
        rec.append((
            np.full((p, max_k), -1, dtype=np.int64),
            np.zeros((p, max_k)),
            np.zeros(p, dtype=np.int64),
        ))
        rays.append((np.zeros((p, 3)), np.zeros((p, 3))))
        imgs.append(np.zeros((cam.height, cam.width, 3)))
        n_elem += p * 3

    opts = {
        "mean": Adam(fit_config.lr_mean, fit_config.beta1, fit_config.beta2, fit_config.adam_eps),
        "quat": Adam(fit_config.lr_quat, fit_config.beta1, fit_config.beta2, fit_config.adam_eps),
        "ls2": Adam(fit_config.lr_scale, fit_config.beta1, fit_config.beta2, fit_config.adam_eps),
        "ls3": Adam(fit_config.lr_scale, fit_config.beta1, fit_config.beta2, fit_config.adam_eps),
        "op": Adam(fit_config.lr_opacity, fit_config.beta1, fit_config.beta2, fit_config.adam_eps),
        "color": Adam(fit_config.lr_color, fit_config.beta1, fit_config.beta2, fit_config.adam_eps),
    }
    grads = GradientBuffer.zeros(n)
    history = np.zeros(fit_config.iterations)
    loss0 = None

    for it in range(fit_config.iterations):
        loss, arrays = _forward_all(
            params, cameras, targets, background, render_config, rec, rays, imgs
        )
        history[it] = loss
        if loss0 is None:
            loss0 = loss
        elif loss > fit_config.divergence_factor * max(loss0, 1e-12):
            raise FitDivergenceError(
                f"loss {loss:.3e} exceeded {fit_config.divergence_factor:g} x initial "
                f"{loss0:.3e} at iteration {it}"
            )
        grads.clear()
        for ci, cam in enumerate(cameras):
            adj = (2.0 / n_elem) * (imgs[ci] - targets[ci]).reshape(-1, 3)
            _kernels.backward_records(
                rec[ci][0], rec[ci][1], rec[ci][2], rays[ci][0], rays[ci][1],
                np.ascontiguousarray(adj),
                arrays.means, arrays.r2, arrays.r3, arrays.s2, arrays.s3,
                arrays.opacity, arrays.colors, arrays.quats,
                background[0], background[1], background[2],
                grads.color, grads.opacity, grads.mean, grads.quat,
                grads.log_s2, grads.log_s3,
            )
        op = arrays.opacity
        g_logit = grads.opacity * op * (1.0 - op)
        g_quat_raw = grads.quat / np.linalg.norm(params.quats_raw, axis=1, keepdims=True)
        opts["mean"].step(params.d_mean, grads.mean)
        opts["quat"].step(params.d_quat, g_quat_raw)
        opts["ls2"].step(params.d_log_s2, grads.log_s2)
        opts["ls3"].step(params.d_log_s3, grads.log_s3)
        opts["op"].step(params.d_logit, g_logit)
        opts["color"].step(params.d_color, grads.color)
        if fit_config.log_every and it % fit_config.log_every == 0:
            log.info("iter %d: loss %.6e (psnr %.2f dB)", it, loss, _psnr_of(loss))

    return FitResult(
        gaussians=params.to_gaussians(),
        loss_history=history,
        initial_psnr=_psnr_of(history[0]),
        final_psnr=_psnr_of(history[-1]),
        iterations=fit_config.iterations,
    )


def _psnr_of(mse):
    if mse < 1e-10:
        return 100.0
    return 10.0 * math.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# finite differences

_FD_GROUPS = ("mean", "quat", "log_s2", "log_s3", "opacity", "color")

_FD_SELECTORS = {
    "all": _FD_GROUPS,
    "geometry": ("mean", "quat", "log_s2", "log_s3"),
    "mean": ("mean",),
    "quat": ("quat",),
    "log_s2": ("log_s2",),
    "log_s3": ("log_s3",),
    "opacity": ("opacity",),
    "color": ("color",),
}


def finite_diff_check(scene, camera, config=None, param_selector="all", step=1e-5,
                      targets=None):
    """Max relative error of analytic gradients vs central differences.

    Shoots one ray per pixel of the camera, records hits once, and compares
    the analytic backward pass against central differences of the replayed
    loss (mean over rays of the squared color error against targets, which
    default to constant 0.5 gray). Both sides use the fixed-hit convention,
    so the comparison is smooth even with rays near polygon edges.
    param_selector picks the parameter groups: one of "color", "opacity",
    "mean", "quat", "log_s2", "log_s3", "geometry" (all shape parameters),
    or "all". Relative error is |fd - analytic| / max(|fd|, |analytic|, 1e-8).
    """
    if param_selector not in _FD_SELECTORS:
        raise ValidationError(f"unknown param_selector {param_selector!r}")
    groups = _FD_SELECTORS[param_selector]
    report = finite_diff_report(scene, camera, config=config, step=step, targets=targets,
                                groups=groups)
    return max(report.values())


def finite_diff_report(scene, camera, config=None, step=1e-5, targets=None,
                       groups=_FD_GROUPS):
    """finite_diff_check's engine: per-group max relative errors as a dict.

    camera may also be a list of rays (with targets given per ray).
    """
    from .render import aggregate_color

    prep = prepare_scene(scene, config) if not hasattr(scene, "splats") else scene
    if hasattr(camera, "width"):
        rays = [camera_ray(camera, x, y)
                for y in range(camera.height) for x in range(camera.width)]
    else:
        rays = list(camera)
    if targets is None:
        targets = np.full((len(rays), 3), 0.5)
    sp = prep.splats
    n = sp.count
    targets = np.asarray(targets, dtype=np.float64).reshape(len(rays), 3)

    # record hits once
    max_k = max(1, min(prep.config.max_gaussians_per_ray, n))
    p = len(rays)
    rec_idx = np.full((p, max_k), -1, dtype=np.int64)
    rec_t = np.zeros((p, max_k))
    rec_n = np.zeros(p, dtype=np.int64)
    rays_o = np.zeros((p, 3))
    rays_d = np.zeros((p, 3))
    for i, ray in enumerate(rays):
        r = aggregate_color(ray, prep)
        k = min(r.n_hits, max_k)
        rec_idx[i, :k] = r.indices[:k]
        rec_t[i, :k] = r.hit_ts[:k]
        rec_n[i] = k
        rays_o[i] = ray.origin
        rays_d[i] = ray.direction

    bg = prep.background

    def replay_loss(means, quats, log_s2, log_s3, opacity, colors):
        qn = quats / np.linalg.norm(quats, axis=1, keepdims=True)
        r2, r3 = _quat_cols(qn)
        out = np.zeros((p, 3))
        _kernels.replay_records(
            rec_idx, rec_t, rec_n, rays_o, rays_d,
            means, r2, r3, np.exp(log_s2), np.exp(log_s3), opacity, colors,
            bg[0], bg[1], bg[2], out,
        )
        return float(np.mean(np.sum((out - targets) ** 2, axis=1)))

    base = {
        "mean": sp.means.copy(), "quat": sp.quats.copy(),
        "log_s2": np.log(sp.s2), "log_s3": np.log(sp.s3),
        "opacity": sp.opacity.copy(), "color": sp.colors.copy(),
    }

    # analytic gradients of the same loss
    out0 = np.zeros((p, 3))
    _kernels.replay_records(
        rec_idx, rec_t, rec_n, rays_o, rays_d,
        sp.means, sp.r2, sp.r3, sp.s2, sp.s3, sp.opacity, sp.colors,
        bg[0], bg[1], bg[2], out0,
    )
    adj = (2.0 / p) * (out0 - targets)
    grads = GradientBuffer.zeros(n)
    _kernels.backward_records(
        rec_idx, rec_t, rec_n, rays_o, rays_d, np.ascontiguousarray(adj),
        sp.means, sp.r2, sp.r3, sp.s2, sp.s3, sp.opacity, sp.colors, sp.quats,
        bg[0], bg[1], bg[2],
        grads.color, grads.opacity, grads.mean, grads.quat, grads.log_s2, grads.log_s3,
    )
    analytic = {
        "mean": grads.mean, "quat": grads.quat,
        "log_s2": grads.log_s2, "log_s3": grads.log_s3,
        "opacity": grads.opacity, "color": grads.color,
    }

    report = {}
    for group in groups:
        arr = base[group]
        an = analytic[group]
        worst = 0.0
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            lp = replay_loss(base["mean"], base["quat"], base["log_s2"],
                             base["log_s3"], base["opacity"], base["color"])
            flat[j] = orig - step
            lm = replay_loss(base["mean"], base["quat"], base["log_s2"],
                             base["log_s3"], base["opacity"], base["color"])
            flat[j] = orig
            fd = (lp - lm) / (2.0 * step)
            a = an.reshape(-1)[j]
            rel = abs(fd - a) / max(abs(fd), abs(a), 1e-8)
            worst = max(worst, rel)
        report[group] = worst
    return report
