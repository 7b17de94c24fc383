"""Rigid transforms of acquisition planes and the anchor-point parameterization.

A plane's pose is a proper rigid motion (R, t) applied to the canonical
axis-aligned plane centered at the origin with normal +z.  The same pose can
be written as three in-plane points (center, bottom-right corner, bottom-left
corner); the two representations round-trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateAnchors, NotARotation

_ORTHO_TOL = 1e-6
_COLLINEAR_AREA_TOL = 1e-9


@dataclass(frozen=True)
class PlaneExtent:
    """In-plane raster geometry: pixels per side and mm per pixel."""

    size_px: int
    res_mm: float

    def __post_init__(self):
        if self.size_px <= 0:
            raise ValueError(f"size_px must be positive, got {self.size_px}")
        if self.res_mm <= 0:
            raise ValueError(f"res_mm must be positive, got {self.res_mm}")

    @property
    def extent_mm(self) -> float:
        return self.size_px * self.res_mm


@dataclass(frozen=True)
class RigidTransform:
    """A proper rigid motion: x -> rotation @ x + translation (mm)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("RigidTransform needs a 3x3 rotation and a 3-vector")

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to one 3-vector or an (n, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 homogeneous matrix, got {m.shape}")
        return RigidTransform(m[:3, :3].copy(), m[:3, 3].copy())


@dataclass(frozen=True)
class AnchorPoints:
    """Plane center and bottom-right / bottom-left corners, in mm."""

    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray

    def __post_init__(self):
        for name in ("p1", "p2", "p3"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))

    def as_array(self) -> np.ndarray:
        return np.stack([self.p1, self.p2, self.p3])

    def as_flat(self) -> np.ndarray:
        return self.as_array().ravel()

    @staticmethod
    def from_flat(v: np.ndarray) -> "AnchorPoints":
        v = np.asarray(v, dtype=float).reshape(3, 3)
        return AnchorPoints(v[0], v[1], v[2])


def canonical_anchors(ext: PlaneExtent) -> np.ndarray:
    """Anchor coordinates of the identity-pose plane, rows (center, BR, BL)."""
    e = ext.extent_mm
    return np.array([
        [0.0, 0.0, 0.0],
        [+e / 2.0, -e / 2.0, 0.0],
        [-e / 2.0, -e / 2.0, 0.0],
    ])


def check_rotation(r: np.ndarray, tol: float = _ORTHO_TOL) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        raise NotARotation(f"expected 3x3 matrix, got shape {r.shape}")
    if not np.allclose(r.T @ r, np.eye(3), atol=tol):
        raise NotARotation("matrix is not orthonormal")
    if np.linalg.det(r) < 0:
        raise NotARotation("matrix has determinant -1 (reflection)")
    return r


def transform_to_anchors(t: RigidTransform, ext: PlaneExtent) -> AnchorPoints:
    pts = t.apply(canonical_anchors(ext))
    return AnchorPoints(pts[0], pts[1], pts[2])


def _triangle_area(pts: np.ndarray) -> float:
    return 0.5 * float(np.linalg.norm(np.cross(pts[1] - pts[0], pts[2] - pts[0])))


def anchors_to_transform(a: AnchorPoints, ext: PlaneExtent) -> RigidTransform:
    """Least-squares rigid fit of the canonical anchors onto ``a``.

    Exact recovery when ``a`` is a rigid image of the canonical anchors;
    otherwise the orthogonal-Procrustes projection onto SE(3), with the
    reflection corrected so the result is a proper rotation.
    """
    obs = a.as_array()
    if _triangle_area(obs) <= _COLLINEAR_AREA_TOL:
        raise DegenerateAnchors("anchor points are collinear")
    can = canonical_anchors(ext)
    can_c = can.mean(axis=0)
    obs_c = obs.mean(axis=0)
    h = (can - can_c).T @ (obs - obs_c)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = obs_c - r @ can_c
    return RigidTransform(r, t)


def compose(t1: RigidTransform, t2: RigidTransform) -> RigidTransform:
    """The motion "apply t2, then t1"."""
    return RigidTransform(t1.rotation @ t2.rotation,
                          t1.rotation @ t2.translation + t1.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def geodesic_distance(r1: np.ndarray, r2: np.ndarray) -> float:
    """Rotation angle (radians) of the relative rotation r1' r2, in [0, pi]."""
    r1 = check_rotation(r1)
    r2 = check_rotation(r2)
    rel = r1.T @ r2
    c = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    if c > 0.9:
        # arccos loses ~sqrt(eps) accuracy near the identity; the antisymmetric
        # part gives sin(theta) and arcsin is well-conditioned there
        s = np.linalg.norm(rel - rel.T) / (2.0 * np.sqrt(2.0))
        return float(np.arcsin(np.clip(s, 0.0, 1.0)))
    return float(np.arccos(c))


def euclidean_distance(a: AnchorPoints, b: AnchorPoints) -> float:
    """Mean per-anchor displacement in mm."""
    return float(np.mean(np.linalg.norm(a.as_array() - b.as_array(), axis=1)))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation on SO(3) from a normalized random quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return quaternion_to_matrix(q)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(1.0 + r[i, i] - r[j, j] - r[k, k]) * 2
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def random_transform(rng: np.random.Generator, trans_range_mm: float = 50.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng),
                          rng.uniform(-trans_range_mm, trans_range_mm, size=3))
