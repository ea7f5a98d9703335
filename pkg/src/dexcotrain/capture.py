"""Pinhole camera model, marker-cube wrist tracking and synthetic capture.

Wrist tracking is PnP on the corners of square markers glued to the faces of
a small cube on the back of the glove. Corner detection is assumed to have
happened upstream; inputs are (face, corner, pixel) observations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import InsufficientPoints, SolverDiverged
from .pose import Pose, Rotation, compose, inverse, quat_from_rotvec, quat_mul, quat_to_matrix

REJECT_RMS_PX = 3.0
MIN_POINTS = 6

LM_LAMBDA_INIT = 1e-3
LM_MAX_ITERS = 100
LM_STEP_TOL = 1e-10


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, uv):
        uv = np.asarray(uv)
        return (uv[..., 0] >= 0) & (uv[..., 0] < self.width) & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)


@dataclass(frozen=True, eq=False)
class MarkerCube:
    edge: float
    corners: np.ndarray  # (faces, 4, 3) in cube frame
    wrist_offset: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        c = np.array(self.corners, dtype=float)
        if c.ndim != 3 or c.shape[1:] != (4, 3):
            raise ValueError("corners must have shape (faces, 4, 3)")
        half = 0.5 * self.edge
        on_surface = np.isclose(np.max(np.abs(c), axis=-1), half, atol=1e-9)
        if not on_surface.all():
            raise ValueError("marker corners must lie on the cube surface")
        for face in c:
            centered = face - face.mean(axis=0)
            if np.linalg.svd(centered, compute_uv=False)[-1] > 1e-9:
                raise ValueError("face corners are not coplanar")
        c.setflags(write=False)
        object.__setattr__(self, "corners", c)

    @property
    def n_faces(self):
        return self.corners.shape[0]

    def face_normals(self):
        centers = self.corners.mean(axis=1)
        return centers / np.linalg.norm(centers, axis=1, keepdims=True)

    @classmethod
    def standard(cls, edge=0.05, marker=0.04, wrist_offset=None):
        """Markers centred on the five faces not attached to the glove (-z is skipped)."""
        normals = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1)]
        faces = []
        for n in normals:
            n = np.array(n, dtype=float)
            helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.5 else np.array([1.0, 0.0, 0.0])
            u = np.cross(helper, n)
            u /= np.linalg.norm(u)
            v = np.cross(n, u)
            c = 0.5 * edge * n
            s = 0.5 * marker
            faces.append([c - s * u + s * v, c + s * u + s * v, c + s * u - s * v, c - s * u - s * v])
        if wrist_offset is None:
            wrist_offset = default_wrist_offset(edge)
        return cls(edge=edge, corners=np.array(faces), wrist_offset=wrist_offset)


def default_wrist_offset(edge=0.05):
    """Mounting that shows three faces to a camera looking down the wrist's +z axis.

    The cube diagonal (1, 1, 1) is turned to point back at the camera when the
    wrist frame is aligned with the camera frame.
    """
    d = np.ones(3) / math.sqrt(3.0)
    target = np.array([0.0, 0.0, -1.0])
    axis = np.cross(d, target)
    angle = math.acos(float(np.dot(d, target)))
    r_cam_cube = Rotation.from_axis_angle(axis, angle)
    # wrist sits 4 cm behind the cube centre along the camera axis
    cube_in_wrist = Pose(np.array([0.0, 0.0, -0.04]), r_cam_cube)
    return inverse(cube_in_wrist)


@dataclass(frozen=True)
class CornerObservation:
    face_id: int
    corner_id: int
    uv: tuple


@dataclass(frozen=True)
class TrackedFrame:
    timestamp: float
    pose: Optional[Pose]
    reproj_rms: Optional[float]

    def __post_init__(self):
        if (self.pose is None) != (self.reproj_rms is None):
            raise ValueError("reproj_rms is present iff pose is present")
        if self.reproj_rms is not None and self.reproj_rms < 0:
            raise ValueError("reproj_rms must be non-negative")


class PnPResult(NamedTuple):
    pose: Pose
    reproj_rms: float


# ---------------------------------------------------------------------------
# config io
# ---------------------------------------------------------------------------

def camera_from_dict(d):
    return CameraIntrinsics(
        fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
        width=int(d["width"]), height=int(d["height"]),
    )


def cube_from_dict(d):
    return MarkerCube(
        edge=float(d["edge"]),
        corners=np.array(d["corners"], dtype=float),
        wrist_offset=Pose.from_array(d["wrist_offset"]),
    )


def camera_to_dict(cam):
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width, "height": cam.height}


def cube_to_dict(cube):
    return {
        "edge": cube.edge,
        "corners": cube.corners.tolist(),
        "wrist_offset": cube.wrist_offset.to_array().tolist(),
    }


def load_capture_config(path):
    """Load ``{"camera": {...}, "cube": {...}}`` from JSON."""
    d = json.loads(Path(path).read_text())
    return camera_from_dict(d["camera"]), cube_from_dict(d["cube"])


def default_camera():
    return CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0, width=640, height=480)


# ---------------------------------------------------------------------------
# projection and PnP
# ---------------------------------------------------------------------------

def project_points(pose: Pose, pts, cam: CameraIntrinsics) -> np.ndarray:
    """Project points given in the pose's child frame.

    Returns an (N, 2) array; rows for points with camera depth <= 1e-6 are NaN.
    """
    pc = pose.apply(np.atleast_2d(np.asarray(pts, dtype=float)))
    out = np.full((pc.shape[0], 2), np.nan)
    z = pc[:, 2]
    ok = z > 1e-6
    out[ok, 0] = cam.fx * pc[ok, 0] / z[ok] + cam.cx
    out[ok, 1] = cam.fy * pc[ok, 1] / z[ok] + cam.cy
    return out


def _residuals(rmat, t, obj, img, cam):
    pc = obj @ rmat.T + t
    z = pc[:, 2]
    if np.any(z <= 1e-6):
        return None, pc
    proj = np.stack([cam.fx * pc[:, 0] / z + cam.cx, cam.fy * pc[:, 1] / z + cam.cy], axis=1)
    return (proj - img).ravel(), pc


def _dlt(obj, img, cam):
    xn = (img[:, 0] - cam.cx) / cam.fx
    yn = (img[:, 1] - cam.cy) / cam.fy
    # Hartley-style conditioning of the 3D points
    centroid = obj.mean(axis=0)
    scale = math.sqrt(3.0) / max(np.mean(np.linalg.norm(obj - centroid, axis=1)), 1e-12)
    xh = np.hstack([(obj - centroid) * scale, np.ones((len(obj), 1))])
    n = len(obj)
    a = np.zeros((2 * n, 12))
    a[0::2, 0:4] = xh
    a[0::2, 8:12] = -xn[:, None] * xh
    a[1::2, 4:8] = xh
    a[1::2, 8:12] = -yn[:, None] * xh
    _, _, vt = np.linalg.svd(a)
    p = vt[-1].reshape(3, 4)
    cond = np.eye(4)
    cond[:3, :3] *= scale
    cond[:3, 3] = -centroid * scale
    p = p @ cond
    m = p[:, :3]
    if np.linalg.det(m) < 0:
        p = -p
        m = -m
    u, s, vt = np.linalg.svd(m)
    rmat = u @ vt
    t = p[:, 3] / s.mean()
    return rmat, t


def _planar_dlt(obj, img, cam):
    """Pose from the homography of four or more coplanar points."""
    c = obj.mean(axis=0)
    u = obj[1] - obj[0]
    u /= np.linalg.norm(u)
    n = np.cross(u, obj[2] - obj[0])
    n /= np.linalg.norm(n)
    v = np.cross(n, u)
    plane = np.stack([u, v, n], axis=1)
    ab = (obj - c) @ plane[:, :2]
    xn = (img[:, 0] - cam.cx) / cam.fx
    yn = (img[:, 1] - cam.cy) / cam.fy
    m = len(obj)
    a = np.zeros((2 * m, 9))
    ah = np.hstack([ab, np.ones((m, 1))])
    a[0::2, 0:3] = ah
    a[0::2, 6:9] = -xn[:, None] * ah
    a[1::2, 3:6] = ah
    a[1::2, 6:9] = -yn[:, None] * ah
    h = np.linalg.svd(a)[2][-1].reshape(3, 3)
    lam = 2.0 / (np.linalg.norm(h[:, 0]) + np.linalg.norm(h[:, 1]))
    if h[2, 2] * lam < 0:
        lam = -lam
    r1, r2 = lam * h[:, 0], lam * h[:, 1]
    uu, _, vt = np.linalg.svd(np.stack([r1, r2, np.cross(r1, r2)], axis=1))
    r_cam_face = uu @ np.diag([1.0, 1.0, np.linalg.det(uu @ vt)]) @ vt
    t_cam_face = lam * h[:, 2]
    rmat = r_cam_face @ plane.T
    return rmat, t_cam_face - rmat @ c


def _coplanar_groups(obj):
    groups = []
    for k in range(0, len(obj) - 3, 4):
        quad = obj[k:k + 4]
        sv = np.linalg.svd(quad - quad.mean(axis=0), compute_uv=False)
        if sv[1] > 1e-9 and sv[2] <= 1e-9 * max(sv[0], 1.0):
            groups.append(slice(k, k + 4))
    return groups


def _initial_pose(obj, img, cam):
    candidates = []
    try:
        candidates.append(_dlt(obj, img, cam))
    except np.linalg.LinAlgError:
        pass
    for g in _coplanar_groups(obj):
        try:
            candidates.append(_planar_dlt(obj[g], img[g], cam))
        except np.linalg.LinAlgError:
            continue
    best = None
    for rmat, t in candidates:
        q = Rotation.from_matrix(rmat).q
        rmat = quat_to_matrix(q)
        r, pc = _residuals(rmat, t, obj, img, cam)
        if r is None or not np.all(np.isfinite(r)):
            continue
        cost = float(r @ r)
        if best is None or cost < best[0]:
            best = (cost, q, rmat, t, r, pc)
    if best is None:
        raise SolverDiverged("no linear initialisation puts the points in front of the camera")
    return best


def solve_pnp(object_points, image_points, cam: CameraIntrinsics, history: Optional[list] = None) -> PnPResult:
    """Linear initialisation refined by Levenberg-Marquardt on reprojection error.

    The initial pose is the lowest-cost of the full 3D DLT and a planar DLT
    (homography) for every run of four consecutive coplanar points, which is
    how marker corners arrive. If ``history`` is a list, the squared-residual
    sum after initialisation and after every accepted step is appended.
    """
    obj = np.asarray(object_points, dtype=float).reshape(-1, 3)
    img = np.asarray(image_points, dtype=float).reshape(-1, 2)
    if len(obj) != len(img):
        raise ValueError("object and image point counts differ")
    if len(obj) < MIN_POINTS:
        raise InsufficientPoints(f"need >= {MIN_POINTS} correspondences, got {len(obj)}")

    cost, q, rmat, t, r, pc = _initial_pose(obj, img, cam)
    if history is not None:
        history.append(cost)

    lam = LM_LAMBDA_INIT
    accepted = 0
    converged = False
    for _ in range(LM_MAX_ITERS):
        z = pc[:, 2]
        jp = np.zeros((len(obj), 2, 3))
        jp[:, 0, 0] = cam.fx / z
        jp[:, 0, 2] = -cam.fx * pc[:, 0] / z**2
        jp[:, 1, 1] = cam.fy / z
        jp[:, 1, 2] = -cam.fy * pc[:, 1] / z**2
        rp = pc - t
        # d(R p)/d(dtheta) for the left perturbation exp(dtheta) R is -[R p]_x
        skew = np.zeros((len(obj), 3, 3))
        skew[:, 0, 1] = rp[:, 2]
        skew[:, 0, 2] = -rp[:, 1]
        skew[:, 1, 0] = -rp[:, 2]
        skew[:, 1, 2] = rp[:, 0]
        skew[:, 2, 0] = rp[:, 1]
        skew[:, 2, 1] = -rp[:, 0]
        jac = np.concatenate([jp @ skew, jp], axis=2).reshape(-1, 6)
        jtj = jac.T @ jac
        g = jac.T @ r
        delta = np.linalg.solve(jtj + lam * np.eye(6), -g)
        if not np.all(np.isfinite(delta)):
            raise SolverDiverged("non-finite LM step")
        q_new = quat_mul(quat_from_rotvec(delta[:3]), q)
        q_new = q_new / np.linalg.norm(q_new)
        r_new_mat = quat_to_matrix(q_new)
        t_new = t + delta[3:]
        r_new, pc_new = _residuals(r_new_mat, t_new, obj, img, cam)
        new_cost = float(r_new @ r_new) if r_new is not None else math.inf
        if r_new is not None and not math.isfinite(new_cost):
            raise SolverDiverged("non-finite residual")
        if new_cost < cost:
            q, rmat, t, r, pc, cost = q_new, r_new_mat, t_new, r_new, pc_new, new_cost
            lam /= 10.0
            accepted += 1
            if history is not None:
                history.append(cost)
        else:
            lam *= 10.0
        if np.linalg.norm(delta) < LM_STEP_TOL:
            converged = True
            break
    if accepted == 0 and not converged:
        raise SolverDiverged(f"no accepted LM step in {LM_MAX_ITERS} iterations")
    rms = math.sqrt(cost / len(obj))
    return PnPResult(Pose(t, Rotation(q)), rms)


def estimate_wrist_pose(
    obs: Sequence[CornerObservation],
    cube: MarkerCube,
    cam: CameraIntrinsics,
    timestamp: float = 0.0,
    max_rms: float = REJECT_RMS_PX,
) -> TrackedFrame:
    """Camera-frame wrist pose from marker corners; tracking loss gives ``pose=None``."""
    lost = TrackedFrame(timestamp, None, None)
    if len(obs) < MIN_POINTS:
        return lost
    obj = np.array([cube.corners[o.face_id, o.corner_id] for o in obs])
    img = np.array([o.uv for o in obs], dtype=float)
    try:
        cube_pose, rms = solve_pnp(obj, img, cam)
    except (InsufficientPoints, SolverDiverged, np.linalg.LinAlgError):
        return lost
    if not rms <= max_rms:
        return lost
    return TrackedFrame(timestamp, compose(cube_pose, cube.wrist_offset), rms)


def visible_faces(cube_pose: Pose, cube: MarkerCube, min_cos=0.1):
    """Faces whose outward normal points back toward the camera by more than ``min_cos``."""
    rmat = cube_pose.r.matrix()
    normals = cube.face_normals() @ rmat.T
    centers = cube_pose.apply(cube.corners.mean(axis=1))
    to_cam = -centers / np.linalg.norm(centers, axis=1, keepdims=True)
    return np.flatnonzero(np.sum(normals * to_cam, axis=1) > min_cos)


def observe_cube(cube_pose: Pose, cube: MarkerCube, cam: CameraIntrinsics, noise_px=0.0, rng=None):
    """Pixel corners for the visible faces as an array (faces, 4, 2), NaN when unobserved."""
    out = np.full((cube.n_faces, 4, 2), np.nan)
    for f in visible_faces(cube_pose, cube):
        uv = project_points(cube_pose, cube.corners[f], cam)
        if noise_px > 0:
            uv = uv + rng.normal(scale=noise_px, size=uv.shape)
        if np.all(np.isfinite(uv)) and np.all(cam.contains(uv)):
            out[f] = uv
    return out


def corners_to_observations(corners) -> list:
    obs = []
    for f in range(corners.shape[0]):
        for c in range(4):
            uv = corners[f, c]
            if np.all(np.isfinite(uv)):
                obs.append(CornerObservation(f, c, (float(uv[0]), float(uv[1]))))
    return obs


def frame_rng(seed, stream, index):
    """Counter-based generator: independent of the order frames are produced in."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(stream), int(index)])


def pseudo_embedding_fn(seed, dim=128, in_dim=7):
    """Deterministic stand-in for palm-camera features of a pose (two views)."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xE3B])
    w = rng.normal(size=(2, dim, in_dim)) / math.sqrt(in_dim)
    b = rng.normal(size=(2, dim))

    def embed(index, pose):
        x = pose.to_array()
        return np.tanh(w @ x + b)

    return embed


def synth_episode(
    traj: Sequence[Pose],
    cube: MarkerCube,
    cam: CameraIntrinsics,
    noise: float = 0.0,
    dropout: float = 0.0,
    seed: int = 0,
    rate: float = 30.0,
    embodiment=None,
    joints=None,
    hand_model=None,
    embed_fn=None,
    embedding_dim: int = 128,
    episode_id: str = "ep",
):
    """Synthesise a single-hand raw capture from a ground-truth wrist trajectory.

    Human episodes carry marker-corner observations (the wrist pose is left for
    the tracking stage); robot episodes carry the wrist pose directly, as
    proprioception would. Fingertips come from forward kinematics of ``joints``
    (or a smooth procedural joint trajectory when ``joints`` is None).
    """
    from .episode import Embodiment, HandStream, RawEpisode
    from .retarget import forward_kinematics_batch, procedural_joint_trajectory, reference_hand

    if not 0.0 <= dropout < 1.0:
        raise ValueError("dropout must be in [0, 1)")
    embodiment = Embodiment(embodiment or Embodiment.HUMAN)
    n = len(traj)
    model = hand_model or reference_hand()
    if joints is None:
        joints = procedural_joint_trajectory(model, n, seed)
    joints = np.asarray(joints, dtype=float).reshape(n, model.n_joints)
    tips = forward_kinematics_batch(model, joints) if n else np.zeros((0, 5, 3))
    embed = embed_fn or pseudo_embedding_fn(seed, embedding_dim)

    stamps = np.arange(n) / rate
    gt = np.array([p.to_array() for p in traj]).reshape(n, 7)
    emb = np.zeros((n, 2, embedding_dim), dtype=np.float32)
    for i, p in enumerate(traj):
        emb[i] = embed(i, p)

    if embodiment is Embodiment.ROBOT:
        hand = HandStream(
            wrist_t=gt[:, :3].copy(), wrist_q=gt[:, 3:].copy(), tracked=np.ones(n, dtype=bool),
            fingertips=tips, embeddings=emb, corners=None, joints=joints,
        )
    else:
        corners = np.full((n, cube.n_faces, 4, 2), np.nan)
        for i, p in enumerate(traj):
            rng = frame_rng(seed, 1, i)
            hidden = rng.random() < dropout
            if hidden:
                continue
            cube_pose = compose(p, inverse(cube.wrist_offset))
            corners[i] = observe_cube(cube_pose, cube, cam, noise, rng)
        hand = HandStream(
            wrist_t=np.full((n, 3), np.nan), wrist_q=np.full((n, 4), np.nan), tracked=np.zeros(n, dtype=bool),
            fingertips=tips, embeddings=emb, corners=corners, joints=None,
        )
    return RawEpisode(
        embodiment=embodiment, rate=rate, timestamps=stamps, hands=[hand], episode_id=episode_id,
        ground_truth={"wrist": [gt.tolist()], "joints": [joints.tolist()]},
    )
