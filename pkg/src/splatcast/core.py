"""Core splat types, the chi-square quantile, and covariance helpers.

A flat splat is a 3D Gaussian whose smallest scale is pinned to a tiny
epsilon, so it behaves as a colored semi-transparent elliptical disk.
Everything downstream (meshing, rendering, fitting) builds on the types
defined here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

__all__ = [
    "FlatGaussian",
    "ConfidenceLevel",
    "chi2_quantile",
    "covariance",
    "flatten",
    "gamma_p",
    "quat_to_matrix",
    "matrix_to_quat",
    "quat_normalize",
    "eps_flat_for_points",
]

_GAMMA_ITERS = 500
_GAMMA_EPS = 1e-16


def gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x).

    Series expansion for x < a + 1, continued fraction (modified Lentz)
    otherwise; no external statistics dependency.
    """
    if a <= 0.0:
        raise ValidationError(f"gamma_p requires a > 0, got {a}")
    if x < 0.0:
        raise ValidationError(f"gamma_p requires x >= 0, got {x}")
    if x == 0.0:
        return 0.0
    lg = math.lgamma(a)
    if x < a + 1.0:
        ap = a
        total = 1.0 / a
        term = total
        for _ in range(_GAMMA_ITERS):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * _GAMMA_EPS:
                break
        return total * math.exp(-x + a * math.log(x) - lg)
    # upper tail via continued fraction, then complement
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_ITERS):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        de = d * c
        h *= de
        if abs(de - 1.0) < _GAMMA_EPS:
            break
    q = math.exp(-x + a * math.log(x) - lg) * h
    return 1.0 - q


def chi2_quantile(alpha: float) -> float:
    """Quantile of the chi-square distribution with 3 degrees of freedom.

    Returns Q such that P(3/2, Q/2) == alpha to within 1e-10, found by
    bisection on the regularized lower incomplete gamma.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValidationError(f"confidence alpha must lie in [0, 1), got {alpha}")
    if alpha == 0.0:
        return 0.0
    lo, hi = 0.0, 1.0
    while gamma_p(1.5, hi / 2.0) < alpha:
        hi *= 2.0
        if hi > 1e8:  # alpha < 1 always brackets far earlier
            break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if gamma_p(1.5, mid / 2.0) < alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class ConfidenceLevel:
    """Confidence level alpha with its derived chi-square(3) quantile q.

    The polygon proxy of a splat covers the in-plane confidence ellipse
    of mass alpha; q scales the polygon radius as sqrt(q).
    """

    alpha: float
    q: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "q", chi2_quantile(self.alpha))


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if n < 1e-300:
        raise ValidationError("cannot normalize a zero quaternion")
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix (columns r1, r2, r3) of a unit scalar-first quaternion."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(rot: np.ndarray) -> np.ndarray:
    """Unit scalar-first quaternion of a rotation matrix (Shepperd's method).

    Sign convention: w >= 0 (first nonzero component positive on ties),
    so the result is deterministic.
    """
    m = np.asarray(rot, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    q = quat_normalize(q)
    for comp in q:
        if comp != 0.0:
            if comp < 0.0:
                q = -q
            break
    return q


@dataclass
class FlatGaussian:
    """One flat splat: mean, unit quaternion frame, scales, opacity, color.

    The rotation matrix has columns (r1, r2, r3); r1 is the flattened axis
    with scales[0] pinned to the scene epsilon, and the disk spans r2/r3.
    """

    mean: np.ndarray
    quaternion: np.ndarray  # scalar-first (w, x, y, z), unit norm
    scales: np.ndarray  # (s1, s2, s3) with s1 == eps_flat
    opacity_hat: float
    color: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.quaternion = np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.opacity_hat = float(self.opacity_hat)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    def validate(self, eps_flat: float | None = None) -> None:
        """Raise ValidationError if any type invariant is broken."""
        if abs(np.linalg.norm(self.quaternion) - 1.0) > 1e-9:
            raise ValidationError("quaternion is not unit norm")
        if self.scales[1] <= 0.0 or self.scales[2] <= 0.0:
            raise ValidationError("in-plane scales must be positive")
        if eps_flat is not None and self.scales[0] != eps_flat:
            raise ValidationError("first scale is not pinned to eps_flat")
        rot = self.rotation
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValidationError("rotation frame is not right-handed")
        if np.max(np.abs(np.cross(rot[:, 1], rot[:, 2]) - rot[:, 0])) > 1e-9:
            raise ValidationError("r1 != r2 x r3")
        if not 0.0 <= self.opacity_hat <= 1.0:
            raise ValidationError("opacity_hat outside [0, 1]")


def covariance(g: FlatGaussian) -> np.ndarray:
    """Covariance of a splat: R diag(s1^2, s2^2, s3^2) R^T."""
    rot = g.rotation
    return (rot * g.scales**2) @ rot.T


# Axis permutations moving the flattest axis to slot 0; odd ones need one
# column negated to keep det(R) = +1.
_PERMS = {0: ((0, 1, 2), False), 1: ((1, 0, 2), True), 2: ((2, 0, 1), False)}


def flatten(mean, quaternion, scales3d, opacity, color, eps_flat: float) -> FlatGaussian:
    """Pin the smallest-scale axis of a generic 3D Gaussian to eps_flat.

    The rotation columns are permuted so the smallest-scale eigenvector
    becomes r1 (ties broken by lowest axis index); an odd permutation has
    its last column negated to preserve right-handedness. Idempotent:
    feeding the output back returns it unchanged field-for-field.
    """
    scales3d = np.asarray(scales3d, dtype=np.float64).reshape(3)
    if np.any(scales3d <= 0.0):
        raise ValidationError(f"scales must be positive, got {scales3d}")
    if eps_flat <= 0.0:
        raise ValidationError(f"eps_flat must be positive, got {eps_flat}")
    q = np.asarray(quaternion, dtype=np.float64).reshape(4)
    smallest = int(np.argmin(scales3d))
    if smallest == 0 and scales3d[0] == eps_flat and abs(np.linalg.norm(q) - 1.0) <= 1e-12:
        # already flat in this layout; return bit-identical fields
        return FlatGaussian(mean, q, scales3d, opacity, color)
    perm, odd = _PERMS[smallest]
    rot = quat_to_matrix(quat_normalize(q))[:, perm].copy()
    if odd:
        rot[:, 2] = -rot[:, 2]
    scales = np.array([eps_flat, scales3d[perm[1]], scales3d[perm[2]]])
    return FlatGaussian(mean, matrix_to_quat(rot), scales, opacity, color)


def eps_flat_for_points(points: np.ndarray, rel: float = 1e-6) -> float:
    """Default flattening epsilon: rel x bounding-box diagonal of the points.

    Falls back to rel itself when the points span no volume (or are empty),
    so a degenerate scene still gets a usable positive epsilon.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return rel
    diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    if diag <= 0.0:
        return rel
    return rel * diag
