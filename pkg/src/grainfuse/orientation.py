"""Rotation representations and misorientation math for polycrystal imaging.

Orientations travel through the pipeline as cubochoric coordinates: points in
a cube of side length pi^(2/3) that map onto rotation space with constant
volume ratio, so uniform samples of the cube are uniform rotations and image
channels built from them are bounded. This module provides the conversion
chain cubochoric <-> homochoric ball <-> axis-angle <-> quaternion, plus
symmetry-aware disorientation angles for the point groups used here.

Quaternions are stored (w, x, y, z), unit norm, canonicalized to w >= 0.
All functions are vectorized over leading axes and are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CUBE_HALF_EDGE",
    "BALL_RADIUS",
    "SymmetryGroup",
    "symmetry_group",
    "cu2qu",
    "qu2cu",
    "normalize_cu",
    "denormalize_cu",
    "disorientation",
    "quat_multiply",
    "quat_conjugate",
    "rotate_unit_z",
    "random_quaternions",
]

# Half edge of the cubochoric cube, pi^(2/3) / 2.
CUBE_HALF_EDGE = np.pi ** (2.0 / 3.0) / 2.0

# Radius of the homochoric ball, (3 pi / 4)^(1/3).
BALL_RADIUS = (0.75 * np.pi) ** (1.0 / 3.0)

# Scale factor of the first cube->ball operation, (pi/6)^(1/6).
_M1_SCALE = (np.pi / 6.0) ** (1.0 / 6.0)

_SQRT2 = np.sqrt(2.0)
_BOUND_TOL = 1e-9


def _pyramid_index(v):
    """Index of the pyramid (pair of opposing cube pyramids) containing v.

    0 when |z| is the largest component, 1 for |x|, 2 for |y|, with ties
    resolved in that priority order. The cube <-> ball maps below are defined
    on the z pyramid and extended by this coordinate rotation.
    """
    ax, ay, az = np.abs(v[..., 0]), np.abs(v[..., 1]), np.abs(v[..., 2])
    p = np.where((az >= ax) & (az >= ay), 0, np.where(ax >= ay, 1, 2))
    return p


def _roll_components(v, p, inverse=False):
    """Cyclically rotate the xyz components of each vector by its pyramid index."""
    out = np.empty_like(v)
    for k in range(3):
        sel = p == k
        if np.any(sel):
            shift = k if inverse else -k
            out[sel] = np.roll(v[sel], shift, axis=-1)
    return out


def _cu2ho(cu):
    """Equal-volume map from the cubochoric cube to the homochoric ball."""
    cu = np.asarray(cu, dtype=np.float64)
    if np.any(np.abs(cu) > CUBE_HALF_EDGE + _BOUND_TOL):
        raise ValueError(
            "cubochoric coordinate outside the cube of half edge "
            f"{CUBE_HALF_EDGE:.6f}"
        )
    cu = np.clip(cu, -CUBE_HALF_EDGE, CUBE_HALF_EDGE)

    p = _pyramid_index(cu)
    v = _roll_components(cu, p)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]

    # Scale the cube onto the curved-edge prism.
    x = x * _M1_SCALE
    y = y * _M1_SCALE
    z = z * _M1_SCALE

    # Map square cross sections to circular ones. The formula assumes
    # |x| <= |y|; swap so the major component plays the role of y.
    swap = np.abs(x) > np.abs(y)
    xs = np.where(swap, y, x)
    ys = np.where(swap, x, y)
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = (np.pi / 12.0) * xs / ys
        k = (
            np.sqrt(3.0 / np.pi)
            * 2.0 ** 0.75
            * ys
            / np.sqrt(_SQRT2 - np.cos(theta))
        )
        xc = _SQRT2 * np.sin(theta) * k
        yc = (_SQRT2 * np.cos(theta) - 1.0) * k
    on_axis = ys == 0.0
    xc = np.where(on_axis, 0.0, xc)
    yc = np.where(on_axis, 0.0, yc)
    xb = np.where(swap, yc, xc)
    yb = np.where(swap, xc, yc)

    # Project the prism onto the ball.
    s = xb * xb + yb * yb
    with np.errstate(divide="ignore", invalid="ignore"):
        shrink = np.sqrt(1.0 - np.pi * s / (24.0 * z * z))
        hx = xb * shrink
        hy = yb * shrink
        hz = np.sqrt(6.0 / np.pi) * z - s * np.sqrt(np.pi / 24.0) / z
    origin = z == 0.0
    hx = np.where(origin, 0.0, hx)
    hy = np.where(origin, 0.0, hy)
    hz = np.where(origin, 0.0, hz)

    ho = np.stack([hx, hy, hz], axis=-1)
    return _roll_components(ho, p, inverse=True)


def _ho2cu(ho):
    """Inverse of :func:`_cu2ho`, homochoric ball back to the cube."""
    ho = np.asarray(ho, dtype=np.float64)
    r = np.linalg.norm(ho, axis=-1)
    if np.any(r > BALL_RADIUS + _BOUND_TOL):
        raise ValueError(
            f"homochoric coordinate outside the ball of radius {BALL_RADIUS:.6f}"
        )

    p = _pyramid_index(ho)
    v = _roll_components(ho, p)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]

    # Invert the ball projection.
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.sqrt(2.0 * r / (r + np.abs(z)))
    t = np.where(r == 0.0, 0.0, t)
    xb = x * t
    yb = y * t
    zb = np.where(z < 0.0, -r * np.sqrt(np.pi / 6.0), r * np.sqrt(np.pi / 6.0))

    # Invert the circular -> square cross-section map (again with |x| <= |y|).
    swap = np.abs(xb) > np.abs(yb)
    xs = np.where(swap, yb, xb)
    ys = np.where(swap, xb, yb)
    sq_min = xs * xs
    sq_max = ys * ys
    mag = sq_min + sq_max
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.sqrt((mag + sq_max) * sq_max)
        big = np.sqrt((mag + sq_max) * mag / (mag + sq_max - k))
        base = np.sqrt(np.pi / 3.0) * big / 2.0
        ratio = np.clip((sq_min + k) / (mag * _SQRT2), -1.0, 1.0)
        xq = np.sign(xs) * base * 12.0 * np.arccos(ratio) / np.pi
        yq = np.sign(ys) * base
    degenerate = mag == 0.0
    xq = np.where(degenerate, 0.0, xq)
    yq = np.where(degenerate, 0.0, yq)
    xc = np.where(swap, yq, xq)
    yc = np.where(swap, xq, yq)

    cu = np.stack([xc, yc, zb], axis=-1) / _M1_SCALE
    cu = np.where(r[..., None] == 0.0, 0.0, cu)
    return _roll_components(cu, p, inverse=True)


def _invert_homochoric_radius(r):
    """Solve (3/4 (w - sin w))^(1/3) = r for the rotation angle w.

    Bisection on [0, pi]; the target function w - sin w is monotone so 60
    halvings pin the root far below the 1e-12 requirement.
    """
    r = np.asarray(r, dtype=np.float64)
    target = (4.0 / 3.0) * np.clip(r, 0.0, BALL_RADIUS) ** 3
    lo = np.zeros_like(target)
    hi = np.full_like(target, np.pi)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        below = mid - np.sin(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def _ho2qu(ho):
    """Homochoric coordinate to unit quaternion."""
    ho = np.asarray(ho, dtype=np.float64)
    r = np.linalg.norm(ho, axis=-1)
    omega = _invert_homochoric_radius(r)
    with np.errstate(divide="ignore", invalid="ignore"):
        axis = ho / r[..., None]
    axis = np.where(r[..., None] == 0.0, [0.0, 0.0, 1.0], axis)
    half = 0.5 * omega
    qu = np.concatenate(
        [np.cos(half)[..., None], axis * np.sin(half)[..., None]], axis=-1
    )
    return _canonicalize(qu)


def _qu2ho(qu):
    """Unit quaternion to homochoric coordinate."""
    qu = _canonicalize(np.asarray(qu, dtype=np.float64))
    w = np.clip(qu[..., 0], -1.0, 1.0)
    omega = 2.0 * np.arccos(w)
    s = np.linalg.norm(qu[..., 1:], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        axis = qu[..., 1:] / s[..., None]
    axis = np.where(s[..., None] == 0.0, [0.0, 0.0, 1.0], axis)
    radius = (0.75 * (omega - np.sin(omega))) ** (1.0 / 3.0)
    return axis * radius[..., None]


def _canonicalize(qu):
    """Flip quaternion signs so w >= 0 (both signs encode one rotation)."""
    sign = np.where(qu[..., :1] < 0.0, -1.0, 1.0)
    return qu * sign


def cu2qu(cu) -> np.ndarray:
    """Convert cubochoric coordinates to unit quaternions.

    Parameters
    ----------
    cu : array_like, shape (..., 3)
        Points inside the cubochoric cube (|component| <= pi^(2/3)/2).

    Returns
    -------
    ndarray, shape (..., 4)
        Unit quaternions (w, x, y, z) with w >= 0. The cube center maps to
        the identity rotation and the cube surface to rotations by pi.

    Raises
    ------
    ValueError
        If any coordinate lies outside the cube.
    """
    return _ho2qu(_cu2ho(cu))


def qu2cu(qu) -> np.ndarray:
    """Convert unit quaternions to cubochoric coordinates.

    Inverse of :func:`cu2qu` on the canonical hemisphere (w >= 0). Inputs
    with w < 0 are negated first, which changes nothing about the rotation
    they represent.

    Raises
    ------
    ValueError
        If any input norm deviates from 1 by more than 1e-6.
    """
    qu = np.asarray(qu, dtype=np.float64)
    norms = np.linalg.norm(qu, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("quaternion norm deviates from 1 by more than 1e-6")
    qu = qu / norms[..., None]
    return _ho2cu(_qu2ho(qu))


def normalize_cu(cu) -> np.ndarray:
    """Scale cubochoric coordinates to the unit cube [-1, 1]^3."""
    return np.asarray(cu, dtype=np.float64) / CUBE_HALF_EDGE


def denormalize_cu(v) -> np.ndarray:
    """Inverse of :func:`normalize_cu`: unit cube back to cubochoric."""
    return np.asarray(v, dtype=np.float64) * CUBE_HALF_EDGE


def quat_multiply(qa, qb) -> np.ndarray:
    """Hamilton product of quaternion arrays, broadcasting over leading axes."""
    qa = np.asarray(qa, dtype=np.float64)
    qb = np.asarray(qb, dtype=np.float64)
    wa, va = qa[..., 0], qa[..., 1:]
    wb, vb = qb[..., 0], qb[..., 1:]
    w = wa * wb - np.sum(va * vb, axis=-1)
    v = (
        wa[..., None] * vb
        + wb[..., None] * va
        + np.cross(va, vb)
    )
    return np.concatenate([w[..., None], v], axis=-1)


def quat_conjugate(qu) -> np.ndarray:
    """Quaternion conjugate (w, -x, -y, -z); the inverse for unit inputs."""
    qu = np.asarray(qu, dtype=np.float64)
    return np.concatenate([qu[..., :1], -qu[..., 1:]], axis=-1)


def rotate_unit_z(qu) -> np.ndarray:
    """Image of the +z unit vector under the rotations qu, shape (..., 3)."""
    qu = np.asarray(qu, dtype=np.float64)
    w, x, y, z = qu[..., 0], qu[..., 1], qu[..., 2], qu[..., 3]
    return np.stack(
        [
            2.0 * (x * z + w * y),
            2.0 * (y * z - w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
        axis=-1,
    )


def random_quaternions(n, rng) -> np.ndarray:
    """Draw n rotations uniform over SO(3) by sampling the cubochoric cube.

    The cube -> ball map preserves volume ratios, so uniform cube samples
    are exactly Haar-uniform rotations.
    """
    cu = rng.uniform(-CUBE_HALF_EDGE, CUBE_HALF_EDGE, size=(n, 3))
    return cu2qu(cu)


@dataclass(frozen=True)
class SymmetryGroup:
    """A proper rotational point group given by its quaternion operator table.

    Attributes
    ----------
    name : str
        Canonical group name used in config files and output metadata.
    operators : ndarray, shape (k, 4)
        Unit quaternions closed under composition up to sign, identity first.
    """

    name: str
    operators: np.ndarray

    def __len__(self):
        return len(self.operators)


def _axis_angle_table(entries):
    ops = [np.array([1.0, 0.0, 0.0, 0.0])]
    for axis, angles in entries:
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        for deg in angles:
            half = np.radians(deg) / 2.0
            ops.append(np.concatenate([[np.cos(half)], axis * np.sin(half)]))
    return np.array(ops)


def _cubic_table():
    entries = []
    for axis in ([1, 0, 0], [0, 1, 0], [0, 0, 1]):
        entries.append((axis, (90.0, 180.0, 270.0)))
    for axis in ([1, 1, 1], [1, -1, 1], [-1, 1, 1], [-1, -1, 1]):
        entries.append((axis, (120.0, 240.0)))
    for axis in (
        [1, 1, 0],
        [1, -1, 0],
        [1, 0, 1],
        [-1, 0, 1],
        [0, 1, 1],
        [0, -1, 1],
    ):
        entries.append((axis, (180.0,)))
    return _axis_angle_table(entries)


def _hexagonal_table():
    entries = [([0, 0, 1], (60.0, 120.0, 180.0, 240.0, 300.0))]
    for k in range(6):
        phi = np.radians(30.0 * k)
        entries.append(([np.cos(phi), np.sin(phi), 0.0], (180.0,)))
    return _axis_angle_table(entries)


_GROUPS = {
    "cubic-O": _cubic_table(),
    "hexagonal-D6": _hexagonal_table(),
    "triclinic-identity": np.array([[1.0, 0.0, 0.0, 0.0]]),
}

_GROUP_ALIASES = {
    "cubic": "cubic-O",
    "cubic-o": "cubic-O",
    "hexagonal": "hexagonal-D6",
    "hexagonal-d6": "hexagonal-D6",
    "hex": "hexagonal-D6",
    "identity": "triclinic-identity",
    "triclinic": "triclinic-identity",
}


def symmetry_group(name: str) -> SymmetryGroup:
    """Look up a symmetry group by name.

    Accepts the canonical names cubic-O, hexagonal-D6, triclinic-identity
    as well as the short aliases cubic, hexagonal, identity.
    """
    canonical = _GROUP_ALIASES.get(str(name).lower(), name)
    if canonical not in _GROUPS:
        known = ", ".join(sorted(_GROUPS))
        raise ValueError(f"unknown symmetry group {name!r}; known groups: {known}")
    table = _GROUPS[canonical]
    return SymmetryGroup(name=canonical, operators=table.copy())


def disorientation(q1, q2, sym: SymmetryGroup) -> np.ndarray:
    """Smallest rotation angle between two orientations under symmetry.

    Parameters
    ----------
    q1, q2 : array_like, shape (..., 4)
        Unit quaternions; leading axes broadcast.
    sym : SymmetryGroup
        Operator table; the minimum runs over one-sided products, which for
        these groups equals the two-sided minimum because the w component of
        (s_i m s_j) only depends on the group element s_j s_i.

    Returns
    -------
    ndarray or float
        Disorientation angle in radians, in [0, pi].
    """
    mis = quat_multiply(quat_conjugate(np.asarray(q1, dtype=np.float64)), q2)
    # w component of (mis * s) is the dot product of mis with conj(s); the
    # operator table is closed under conjugation so we can dot with it as is.
    dots = np.abs(mis @ sym.operators.T)
    pick = np.argmax(dots, axis=-1)
    best_ops = sym.operators[pick]
    prod = quat_multiply(mis, quat_conjugate(best_ops))
    # atan2 keeps full precision for tiny angles where arccos(dot) loses it.
    angle = 2.0 * np.arctan2(
        np.linalg.norm(prod[..., 1:], axis=-1), np.abs(prod[..., 0])
    )
    if angle.ndim == 0:
        return float(angle)
    return angle
