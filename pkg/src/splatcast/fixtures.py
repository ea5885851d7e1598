"""Deterministic synthetic scenes and cameras.

Everything here is seeded so acceptance runs and the CLI --synthetic flag
need no external data: the same arguments always produce the same scene,
byte for byte.
"""

import math

import numpy as np

from .core import FlatGaussian
from .errors import ValidationError
from .scene import Camera, Scene

DESK_EPS_FLAT = 1e-6


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)):
    """Camera-to-world rotation for a camera at position looking at target.

    The camera looks down its local -z; +y is the image up direction.
    """
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    fn = np.linalg.norm(forward)
    if fn == 0.0:
        raise ValidationError("camera position coincides with the look target")
    forward = forward / fn
    side = np.cross(forward, np.asarray(up, dtype=np.float64))
    sn = np.linalg.norm(side)
    if sn < 1e-12:
        raise ValidationError("look direction is parallel to the up vector")
    side = side / sn
    true_up = np.cross(side, forward)
    return np.stack([side, true_up, -forward], axis=1)


def ring_cameras(n=4, radius=3.2, height=1.1, width=64, pixels_high=64, fov_x=0.7):
    """n cameras evenly spaced on a ring, all looking at the origin."""
    focal = width / (2.0 * math.tan(fov_x / 2.0))
    cams = []
    for i in range(n):
        ang = 2.0 * math.pi * i / n
        pos = np.array([radius * math.cos(ang), height, radius * math.sin(ang)])
        cams.append(
            Camera(rotation=look_at(pos), position=pos,
                   focal_x=focal, focal_y=focal, width=width, height=pixels_high)
        )
    return cams


def ground_truth_scene():
    """The fixed 3-splat scene used as fitting ground truth and render fixture."""
    gaussians = [
        FlatGaussian(
            mean=[0.0, 0.15, 0.0],
            quaternion=_unit([0.9, 0.1, 0.4, 0.0]),
            scales=[DESK_EPS_FLAT, 0.55, 0.40],
            opacity_hat=0.85,
            color=[0.9, 0.15, 0.1],
        ),
        FlatGaussian(
            mean=[-0.35, -0.1, 0.3],
            quaternion=_unit([0.8, -0.3, 0.1, 0.5]),
            scales=[DESK_EPS_FLAT, 0.45, 0.50],
            opacity_hat=0.7,
            color=[0.1, 0.75, 0.2],
        ),
        FlatGaussian(
            mean=[0.4, -0.2, -0.25],
            quaternion=_unit([0.7, 0.5, -0.2, 0.3]),
            scales=[DESK_EPS_FLAT, 0.50, 0.35],
            opacity_hat=0.75,
            color=[0.15, 0.25, 0.9],
        ),
    ]
    return Scene(gaussians=gaussians, solids=[], lights=[], background=[0.0, 0.0, 0.0])


def random_scene(n, seed=0, background=(0.0, 0.0, 0.0)):
    """n seeded random splats in a desk-scale box around the origin."""
    rng = np.random.default_rng(seed)
    gaussians = []
    for _ in range(int(n)):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        gaussians.append(
            FlatGaussian(
                mean=rng.uniform(-0.8, 0.8, size=3),
                quaternion=q,
                scales=[DESK_EPS_FLAT, rng.uniform(0.12, 0.45), rng.uniform(0.12, 0.45)],
                opacity_hat=rng.uniform(0.3, 0.8),
                color=rng.uniform(0.1, 0.9, size=3),
            )
        )
    return Scene(gaussians=gaussians, solids=[], lights=[], background=list(background))


def random_gaussian(rng, eps_flat=DESK_EPS_FLAT):
    """One random flat splat drawn from the given generator."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return FlatGaussian(
        mean=rng.normal(size=3),
        quaternion=q,
        scales=[eps_flat, rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0)],
        opacity_hat=rng.uniform(0.05, 0.95),
        color=rng.uniform(0.0, 1.0, size=3),
    )


def _unit(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)
