"""Rigid-body pose algebra.

Conventions:
    - Quaternions are stored (w, x, y, z), unit norm, canonical hemisphere w >= 0.
    - ``Pose(t, r)`` maps a point p expressed in the child frame to the parent
      frame via ``R @ p + t``.
    - The 6D rotation encoding is the first two columns of the rotation matrix,
      column-major: (R00, R10, R20, R01, R11, R21).
    - A relative pose is the 9-vector (dt, dr6) of ``inverse(a) @ b``.

Batched ``quat_*`` helpers operate on arrays of shape (..., 4) and are used by
the trajectory code; the ``Pose``/``Rotation`` objects are thin immutable
wrappers for single transforms.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRot6D

ALG_TOL = 1e-9
METRIC_TOL = 1e-12

ROT6D_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
RELATIVE_IDENTITY = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

_POSE_STRUCT = struct.Struct("<7d")


# ---------------------------------------------------------------------------
# batched quaternion helpers
# ---------------------------------------------------------------------------

def quat_canonical(q):
    q = np.asarray(q, dtype=float)
    if q.shape == (4,):
        # single quaternion: skip the axis machinery, it dominates per-pose cost
        w, x, y, z = q.tolist()
        n = math.sqrt(w * w + x * x + y * y + z * z)
        if w < 0.0:
            n = -n
        return np.array([w / n, x / n, y / n, z / n])
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_mul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape == b.shape == (4,):
        aw, ax, ay, az = a.tolist()
        bw, bx, by, bz = b.tolist()
        return np.array([
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ])
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    if q.shape == (4,):
        w, x, y, z = q.tolist()
        n = math.sqrt(w * w + x * x + y * y + z * z)
        w, x, y, z = w / n, x / n, y / n, z / n
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m):
    """Shepperd's method; picks the largest diagonal pivot per matrix."""
    m = np.asarray(m, dtype=float)
    if m.shape == (3, 3):
        return quat_canonical(_matrix_to_quat_single(m.tolist()))
    batch = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    out = np.empty((m.shape[0], 4))
    tr = np.trace(m, axis1=1, axis2=2)
    diag = np.diagonal(m, axis1=1, axis2=2)
    pivots = np.concatenate([tr[:, None], diag], axis=1)
    choice = np.argmax(pivots, axis=1)
    for k, r in enumerate(m):
        c = choice[k]
        if c == 0:
            s = 2.0 * math.sqrt(max(1.0 + tr[k], 0.0))
            out[k] = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif c == 1:
            s = 2.0 * math.sqrt(max(1.0 + r[0, 0] - r[1, 1] - r[2, 2], 0.0))
            out[k] = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif c == 2:
            s = 2.0 * math.sqrt(max(1.0 + r[1, 1] - r[0, 0] - r[2, 2], 0.0))
            out[k] = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2.0 * math.sqrt(max(1.0 + r[2, 2] - r[0, 0] - r[1, 1], 0.0))
            out[k] = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    return quat_canonical(out).reshape(batch + (4,))


def _matrix_to_quat_single(r):
    tr = r[0][0] + r[1][1] + r[2][2]
    pivots = [tr, r[0][0], r[1][1], r[2][2]]
    c = pivots.index(max(pivots))
    if c == 0:
        s = 2.0 * math.sqrt(max(1.0 + tr, 0.0))
        return np.array([0.25 * s, (r[2][1] - r[1][2]) / s, (r[0][2] - r[2][0]) / s, (r[1][0] - r[0][1]) / s])
    if c == 1:
        s = 2.0 * math.sqrt(max(1.0 + r[0][0] - r[1][1] - r[2][2], 0.0))
        return np.array([(r[2][1] - r[1][2]) / s, 0.25 * s, (r[0][1] + r[1][0]) / s, (r[0][2] + r[2][0]) / s])
    if c == 2:
        s = 2.0 * math.sqrt(max(1.0 + r[1][1] - r[0][0] - r[2][2], 0.0))
        return np.array([(r[0][2] - r[2][0]) / s, (r[0][1] + r[1][0]) / s, 0.25 * s, (r[1][2] + r[2][1]) / s])
    s = 2.0 * math.sqrt(max(1.0 + r[2][2] - r[0][0] - r[1][1], 0.0))
    return np.array([(r[1][0] - r[0][1]) / s, (r[0][2] + r[2][0]) / s, (r[1][2] + r[2][1]) / s, 0.25 * s])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle
    return quat_canonical(np.concatenate([[math.cos(half)], math.sin(half) * axis / n]))


def quat_from_rotvec(v):
    v = np.asarray(v, dtype=float)
    angle = float(np.linalg.norm(v))
    if angle < 1e-12:
        # first-order expansion keeps tiny LM steps exact to machine precision
        return quat_canonical(np.concatenate([[1.0], 0.5 * v]))
    return quat_from_axis_angle(v / angle, angle)


def quat_slerp(a, b, u):
    a = quat_canonical(a)
    b = quat_canonical(b)
    d = float(np.dot(a, b))
    if d < 0.0:
        b = -b
        d = -d
    if d > 1.0 - 1e-12:
        q = a + u * (b - a)
    else:
        theta = math.acos(min(d, 1.0))
        s = math.sin(theta)
        q = (math.sin((1.0 - u) * theta) / s) * a + (math.sin(u * theta) / s) * b
    return quat_canonical(q)


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Rotation:
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _frozen(quat_canonical(self.q)))

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, m):
        return cls(matrix_to_quat(m))

    @classmethod
    def from_axis_angle(cls, axis, angle):
        return cls(quat_from_axis_angle(axis, angle))

    @classmethod
    def from_rotvec(cls, v):
        return cls(quat_from_rotvec(v))

    @classmethod
    def about_z(cls, angle):
        return cls.from_axis_angle([0.0, 0.0, 1.0], angle)

    def matrix(self):
        m = self.__dict__.get("_m")
        if m is None:
            m = quat_to_matrix(self.q)
            m.flags.writeable = False
            object.__setattr__(self, "_m", m)
        return m

    def inverse(self):
        return Rotation(quat_conj(self.q))

    def __mul__(self, other):
        return Rotation(quat_mul(self.q, other.q))

    def apply(self, p):
        return np.asarray(p, dtype=float) @ self.matrix().T

    def __repr__(self):
        return f"Rotation(q={np.array2string(self.q, precision=6)})"


@dataclass(frozen=True, eq=False)
class Pose:
    t: np.ndarray
    r: Rotation

    def __post_init__(self):
        object.__setattr__(self, "t", _frozen(np.reshape(self.t, 3)))
        if not isinstance(self.r, Rotation):
            object.__setattr__(self, "r", Rotation(self.r))

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), Rotation.identity())

    @classmethod
    def translation(cls, x, y, z):
        return cls(np.array([x, y, z], dtype=float), Rotation.identity())

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        return cls(m[:3, 3], Rotation.from_matrix(m[:3, :3]))

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=float)
        return cls(a[:3], Rotation(a[3:7]))

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.r.matrix()
        m[:3, 3] = self.t
        return m

    def to_array(self):
        return np.concatenate([self.t, self.r.q])

    def to_bytes(self):
        return _POSE_STRUCT.pack(*self.to_array())

    @classmethod
    def from_bytes(cls, buf):
        return cls.from_array(_POSE_STRUCT.unpack(buf))

    def apply(self, p):
        return self.r.apply(p) + self.t

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        return f"Pose(t={np.array2string(self.t, precision=6)}, q={np.array2string(self.r.q, precision=6)})"


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.t + a.r.apply(b.t), a.r * b.r)


def inverse(p: Pose) -> Pose:
    r_inv = p.r.inverse()
    return Pose(-r_inv.apply(p.t), r_inv)


def to_rot6d(r) -> np.ndarray:
    m = r.matrix() if isinstance(r, Rotation) else np.asarray(r, dtype=float)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def rot6d_to_matrix(v) -> np.ndarray:
    """Gram-Schmidt reconstruction; works on (..., 6) arrays."""
    v = np.asarray(v, dtype=float)
    if v.shape == (6,):
        return _rot6d_to_matrix_single(v)
    a, b = v[..., :3], v[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(na < 1e-8) or np.any(nb < 1e-8):
        raise DegenerateRot6D("rot6d column norm below 1e-8")
    c1 = a / na
    cos = np.sum(c1 * b, axis=-1, keepdims=True) / nb
    if np.any(np.abs(cos) > 1.0 - 1e-8):
        raise DegenerateRot6D("rot6d columns are parallel")
    c2 = b - np.sum(b * c1, axis=-1, keepdims=True) * c1
    c2 = c2 / np.linalg.norm(c2, axis=-1, keepdims=True)
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=-1)


def _rot6d_to_matrix_single(v):
    ax, ay, az, bx, by, bz = v.tolist()
    na = math.sqrt(ax * ax + ay * ay + az * az)
    nb = math.sqrt(bx * bx + by * by + bz * bz)
    if na < 1e-8 or nb < 1e-8:
        raise DegenerateRot6D("rot6d column norm below 1e-8")
    ax, ay, az = ax / na, ay / na, az / na
    d = ax * bx + ay * by + az * bz
    if abs(d / nb) > 1.0 - 1e-8:
        raise DegenerateRot6D("rot6d columns are parallel")
    cx, cy, cz = bx - d * ax, by - d * ay, bz - d * az
    nc = math.sqrt(cx * cx + cy * cy + cz * cz)
    cx, cy, cz = cx / nc, cy / nc, cz / nc
    return np.array([
        [ax, cx, ay * cz - az * cy],
        [ay, cy, az * cx - ax * cz],
        [az, cz, ax * cy - ay * cx],
    ])


def from_rot6d(v) -> Rotation:
    return Rotation.from_matrix(rot6d_to_matrix(v))


def relative(a: Pose, b: Pose) -> np.ndarray:
    d = compose(inverse(a), b)
    return np.concatenate([d.t, to_rot6d(d.r)])


def lift(rel) -> Pose:
    rel = np.asarray(rel, dtype=float)
    return Pose(rel[:3], from_rot6d(rel[3:9]))


def pose_interpolate(a: Pose, b: Pose, u: float) -> Pose:
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"interpolation parameter {u} outside [0, 1]")
    if u == 0.0:
        return a
    if u == 1.0:
        return b
    return Pose((1.0 - u) * a.t + u * b.t, Rotation(quat_slerp(a.r.q, b.r.q, u)))


def geodesic_distance(a: Rotation, b: Rotation) -> float:
    d = quat_mul(quat_conj(a.q), b.q)
    return 2.0 * math.atan2(float(np.linalg.norm(d[1:])), abs(float(d[0])))


def translation_error(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(a.t - b.t))


def random_rotation(rng: np.random.Generator) -> Rotation:
    q = rng.normal(size=4)
    return Rotation(q)


def random_pose(rng: np.random.Generator, scale: float = 1.0) -> Pose:
    return Pose(rng.uniform(-scale, scale, size=3), random_rotation(rng))


# ---------------------------------------------------------------------------
# batched trajectory helpers (arrays of positions (N, 3) and quaternions (N, 4))
# ---------------------------------------------------------------------------

def relative_batch(ta, qa, tb, qb) -> np.ndarray:
    """Vectorized ``relative`` over aligned arrays of poses."""
    ra = quat_to_matrix(qa)
    rb = quat_to_matrix(qb)
    ra_t = np.swapaxes(ra, -1, -2)
    dt = np.einsum("...ij,...j->...i", ra_t, np.asarray(tb) - np.asarray(ta))
    dr = ra_t @ rb
    return np.concatenate([dt, to_rot6d(dr)], axis=-1)
