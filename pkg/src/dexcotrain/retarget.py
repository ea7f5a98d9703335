"""Fingertip retargeting onto a robot hand by damped-least-squares IK.

Each finger is a serial chain rooted at ``base_pose`` in the wrist frame. Joint
k rotates about its local ``axis`` and is followed by a translation of
``links[k]`` along the local +x axis; the fingertip sits at ``tip_offset`` in
the last link frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import JointLimitViolation, NonFiniteTarget
from .pose import Pose

IK_DAMPING = 0.05
IK_FD_STEP = 1e-6
IK_MAX_ITERS = 200
IK_RESIDUAL_TOL = 1e-4
IK_STEP_TOL = 1e-9
IK_MAX_HALVINGS = 8


@dataclass(frozen=True, eq=False)
class Finger:
    name: str
    base_pose: Pose
    axes: np.ndarray  # (k, 3) unit
    lo: np.ndarray
    hi: np.ndarray
    links: np.ndarray  # (k,)
    tip_offset: np.ndarray  # (3,)

    @property
    def n_joints(self):
        return len(self.lo)


class HandModel:
    """A set of fingers with a flat joint vector ordered finger by finger."""

    def __init__(self, fingers):
        self.fingers = list(fingers)
        for f in self.fingers:
            if not (len(f.axes) == len(f.lo) == len(f.hi) == len(f.links)):
                raise ValueError(f"finger {f.name}: inconsistent chain lengths")
            if np.any(f.lo >= f.hi):
                raise ValueError(f"finger {f.name}: joint limits need lo < hi")
        self.lo = np.concatenate([f.lo for f in self.fingers])
        self.hi = np.concatenate([f.hi for f in self.fingers])
        self.n_joints = len(self.lo)
        self.n_tips = len(self.fingers)
        self._pack()

    def _pack(self):
        # padded (fingers, max_k) arrays so FK runs over all fingers at once
        k = max(f.n_joints for f in self.fingers)
        nf = len(self.fingers)
        self._k = k
        self._axes = np.zeros((nf, k, 3))
        self._axes[..., 2] = 1.0
        self._links = np.zeros((nf, k))
        self._index = np.full((nf, k), -1)
        self._base_r = np.stack([f.base_pose.r.matrix() for f in self.fingers])
        self._base_t = np.stack([f.base_pose.t for f in self.fingers])
        self._tip = np.stack([f.tip_offset for f in self.fingers])
        start = 0
        for i, f in enumerate(self.fingers):
            n = f.n_joints
            self._axes[i, :n] = f.axes / np.linalg.norm(f.axes, axis=1, keepdims=True)
            self._links[i, :n] = f.links
            self._index[i, :n] = np.arange(start, start + n)
            start += n

    def mid_range(self):
        return 0.5 * (self.lo + self.hi)

    def clamp(self, q):
        return np.clip(q, self.lo, self.hi)

    def within_limits(self, q, tol=0.0):
        q = np.asarray(q)
        return bool(np.all(q >= self.lo - tol) and np.all(q <= self.hi + tol))

    def to_dict(self):
        return {
            "fingers": [
                {
                    "name": f.name,
                    "base_pose": f.base_pose.to_array().tolist(),
                    "joints": [
                        {"axis": a.tolist(), "lo": float(lo), "hi": float(hi)}
                        for a, lo, hi in zip(f.axes, f.lo, f.hi)
                    ],
                    "links": f.links.tolist(),
                    "tip_offset": f.tip_offset.tolist(),
                }
                for f in self.fingers
            ]
        }

    @classmethod
    def from_dict(cls, d):
        fingers = []
        for i, fd in enumerate(d["fingers"]):
            joints = fd["joints"]
            fingers.append(Finger(
                name=fd.get("name", f"finger{i}"),
                base_pose=Pose.from_array(fd["base_pose"]),
                axes=np.array([j["axis"] for j in joints], dtype=float).reshape(-1, 3),
                lo=np.array([j["lo"] for j in joints], dtype=float),
                hi=np.array([j["hi"] for j in joints], dtype=float),
                links=np.array(fd["links"], dtype=float),
                tip_offset=np.array(fd.get("tip_offset", [0.0, 0.0, 0.0]), dtype=float),
            ))
        return cls(fingers)


def load_hand_model(path) -> HandModel:
    return HandModel.from_dict(json.loads(Path(path).read_text()))


@lru_cache(maxsize=1)
def reference_hand() -> HandModel:
    """Simplified 5-finger, 17-joint hand (thumb 4, index 4, middle/ring/pinky 3)."""
    text = resources.files("dexcotrain.assets").joinpath("reference_hand.json").read_text()
    return HandModel.from_dict(json.loads(text))


def _rodrigues(axes, angles):
    """Rotation matrices for unit ``axes`` (..., 3) and ``angles`` (...)."""
    x, y, z = axes[..., 0], axes[..., 1], axes[..., 2]
    c, s = np.cos(angles), np.sin(angles)
    v = 1.0 - c
    r = np.empty(angles.shape + (3, 3))
    r[..., 0, 0] = c + x * x * v
    r[..., 0, 1] = x * y * v - z * s
    r[..., 0, 2] = x * z * v + y * s
    r[..., 1, 0] = y * x * v + z * s
    r[..., 1, 1] = c + y * y * v
    r[..., 1, 2] = y * z * v - x * s
    r[..., 2, 0] = z * x * v - y * s
    r[..., 2, 1] = z * y * v + x * s
    r[..., 2, 2] = c + z * z * v
    return r


def forward_kinematics_batch(model: HandModel, q) -> np.ndarray:
    """Unchecked FK for a batch of configurations (B, J) -> (B, tips, 3)."""
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    b = q.shape[0]
    qp = np.where(model._index >= 0, q[:, np.maximum(model._index, 0)], 0.0)  # (B, F, K)
    rot = np.broadcast_to(model._base_r, (b,) + model._base_r.shape).copy()
    pos = np.broadcast_to(model._base_t, (b,) + model._base_t.shape).copy()
    joint_r = _rodrigues(np.broadcast_to(model._axes, qp.shape + (3,)), qp)  # (B, F, K, 3, 3)
    for k in range(model._k):
        rot = rot @ joint_r[:, :, k]
        pos = pos + rot[..., :, 0] * model._links[:, k][None, :, None]
    tips = pos + np.einsum("bfij,fj->bfi", rot, model._tip)
    return tips[0] if single else tips


def forward_kinematics(model: HandModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (model.n_joints,):
        raise ValueError(f"expected {model.n_joints} joint angles, got shape {q.shape}")
    if not model.within_limits(q):
        raise JointLimitViolation("joint configuration outside limits")
    return forward_kinematics_batch(model, q)


def _jacobian(model, q, h=IK_FD_STEP):
    j = model.n_joints
    probes = np.concatenate([q + h * np.eye(j), q - h * np.eye(j)])
    tips = forward_kinematics_batch(model, probes).reshape(2 * j, -1)
    return ((tips[:j] - tips[j:]) / (2.0 * h)).T


def _dls_step(model, q, jac, r, damping, eye):
    # joints resting on a limit whose step points outward are dropped from the
    # Jacobian so the remaining joints absorb the error instead of the clamp
    free = np.ones(model.n_joints, dtype=bool)
    for _ in range(model.n_joints):
        jf = jac * free
        dq = jf.T @ np.linalg.solve(jf @ jf.T + damping**2 * eye, r)
        pinned = ((q <= model.lo) & (dq < 0)) | ((q >= model.hi) & (dq > 0))
        if not np.any(pinned & free):
            return dq
        free &= ~pinned
    return dq


class IKResult(NamedTuple):
    q: np.ndarray
    residual: float


def ik_retarget(
    model: HandModel,
    targets,
    q_init,
    damping: float = IK_DAMPING,
    max_iters: int = IK_MAX_ITERS,
    tol: float = IK_RESIDUAL_TOL,
    history: Optional[list] = None,
) -> IKResult:
    """Damped least squares on the summed squared fingertip error.

    The residual is the Euclidean norm of the stacked fingertip error vector
    (metres). Steps that do not reduce it are halved up to a fixed count; if
    none helps, the current (best) configuration is returned.
    """
    targets = np.asarray(targets, dtype=float).reshape(model.n_tips, 3)
    if not np.all(np.isfinite(targets)):
        raise NonFiniteTarget("fingertip targets contain non-finite values")
    q = model.clamp(np.asarray(q_init, dtype=float))
    flat_t = targets.ravel()
    r = flat_t - forward_kinematics_batch(model, q).ravel()
    res = float(np.linalg.norm(r))
    if history is not None:
        history.append(res)
    eye = np.eye(len(r))
    for _ in range(max_iters):
        if res < tol:
            break
        jac = _jacobian(model, q)
        dq = _dls_step(model, q, jac, r, damping, eye)
        if np.linalg.norm(dq) < IK_STEP_TOL:
            break
        step = 1.0
        for _ in range(IK_MAX_HALVINGS):
            q_new = model.clamp(q + step * dq)
            r_new = flat_t - forward_kinematics_batch(model, q_new).ravel()
            res_new = float(np.linalg.norm(r_new))
            if res_new < res:
                break
            step *= 0.5
        else:
            break
        q, r, res = q_new, r_new, res_new
        if history is not None:
            history.append(res)
    return IKResult(q, res)


def retarget_episode(ep, model: HandModel, **ik_kwargs):
    """Per-frame IK on every hand, warm-started from the previous frame's solution.

    Returns a copy of ``ep`` with ``joints`` and ``ik_residuals`` filled in.
    """
    hands = []
    for hand in ep.hands:
        n = len(hand.positions)
        joints = np.zeros((n, model.n_joints))
        residuals = np.zeros(n)
        q = model.mid_range()
        for i in range(n):
            try:
                q, res = ik_retarget(model, hand.fingertips[i], q, **ik_kwargs)
            except NonFiniteTarget as exc:
                raise NonFiniteTarget(f"frame {i}: {exc}", frame=i) from exc
            joints[i] = q
            residuals[i] = res
        hands.append(replace(hand, joints=joints, ik_residuals=residuals))
    return replace(ep, hands=hands, stages=list(ep.stages) + ["retarget"])


def procedural_joint_trajectory(model: HandModel, n: int, seed: int = 0, rate: float = 30.0):
    """Smooth in-limit joint motion: per-joint sinusoids around mid-range."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x4A4E])
    freq = rng.uniform(0.2, 0.8, size=model.n_joints)
    phase = rng.uniform(0, 2 * np.pi, size=model.n_joints)
    t = np.arange(n)[:, None] / rate
    amp = 0.35 * (model.hi - model.lo)
    return model.mid_range() + amp * np.sin(2 * np.pi * freq * t + phase)
