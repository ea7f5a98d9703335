"""Closed-loop 2D reach task used to evaluate trained chunk policies.

The agent is a point in [-1, 1]^2 that must end within ``success_radius`` of
a target. Its wrist sits at (scale*x, scale*y, depth) metres in front of the
capture camera with an identity orientation, so demonstrations can be pushed
through the same capture, processing and dataset code as any other episode.

Image embeddings are a fixed random tanh feature map of (target - position):
the only place the target is visible to a policy. Human demonstrations add a
constant offset to these features, a small stand-in for the visual gap
between a gloved human hand and a robot hand.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .episode import Embodiment, RawEpisode
from .pose import RELATIVE_IDENTITY, Pose, Rotation, relative_batch


@dataclass(frozen=True)
class EnvConfig:
    n_steps: int = 120
    rate: float = 30.0
    gain: float = 0.08
    max_speed: float = 0.05
    scale: float = 0.1
    depth: float = 0.5
    start_box: float = 0.8
    min_distance: float = 0.4
    embedding_dim: int = 32
    embed_seed: int = 1234
    embed_scale_min: float = 1.5
    embed_scale_max: float = 15.0
    human_offset: float = 0.5
    success_radius: float = 0.05


def expert_delta(p, g, cfg: EnvConfig):
    """Proportional step toward the target with a speed cap."""
    d = cfg.gain * (np.asarray(g, dtype=float) - p)
    n = float(np.linalg.norm(d))
    if n > cfg.max_speed:
        d *= cfg.max_speed / n
    return d


def sample_start(rng, cfg: EnvConfig):
    while True:
        p = rng.uniform(-cfg.start_box, cfg.start_box, 2)
        g = rng.uniform(-cfg.start_box, cfg.start_box, 2)
        if np.linalg.norm(g - p) >= cfg.min_distance:
            return p, g


def demo_positions(p0, g, cfg: EnvConfig, n: Optional[int] = None):
    """Positions visited by the expert over ``n`` frames (default: episode length)."""
    n = cfg.n_steps if n is None else n
    out = np.zeros((n, 2))
    p = np.array(p0, dtype=float)
    for i in range(n):
        out[i] = p
        p = np.clip(p + expert_delta(p, g, cfg), -1.0, 1.0)
    return out


def wrist_pose(p, cfg: EnvConfig, dz: float = 0.0) -> Pose:
    return Pose(np.array([cfg.scale * p[0], cfg.scale * p[1], cfg.depth + dz]), Rotation.identity())


def closure_joints(model, positions, g):
    """Hand closes as the target nears: c = clip(1 - d/0.5, 0, 1) mapped into the joint ranges."""
    d = np.linalg.norm(np.asarray(g) - positions, axis=1)
    c = np.clip(1.0 - d / 0.5, 0.0, 1.0)
    return model.lo + (model.hi - model.lo) * (0.25 + 0.5 * c[:, None])


class Embedder:
    """Two-view tanh features of the (target - position) offset.

    Feature k has weight scale log-spaced over [embed_scale_min, embed_scale_max]:
    coarse features locate a distant target, fine ones resolve the last few
    hundredths, much as a close-up image would.
    """

    def __init__(self, cfg: EnvConfig):
        rng = np.random.default_rng([cfg.embed_seed & 0xFFFFFFFF, 0xE4B])
        e = cfg.embedding_dim
        scale = np.geomspace(cfg.embed_scale_min, cfg.embed_scale_max, e)
        self.w = rng.normal(0.0, 1.0, size=(2, e, 2)) * scale[None, :, None]
        self.b = rng.normal(0.0, 0.5, size=(2, e))
        self.offset = cfg.human_offset * rng.normal(size=(2, e))

    def __call__(self, p, g, embodiment=Embodiment.ROBOT):
        f = np.tanh(self.w @ (np.asarray(g) - p) + self.b)
        if Embodiment(embodiment) is Embodiment.HUMAN:
            f = f + self.offset
        return f.astype(np.float32)


DEFECTS = ("occlusion", "jump", "short")


def make_demo_episode(cfg: EnvConfig, seed, embodiment, cube, cam, hand_model, noise_px=0.5, dropout=0.0,
                      episode_id="ep", defect: Optional[str] = None) -> RawEpisode:
    """One expert demonstration as a raw capture.

    ``defect`` injects a known failure for the filter: "occlusion" hides 60% of
    frames, "jump" moves the wrist 0.2 m away from the camera halfway through,
    "short" keeps only 20 frames.
    """
    from .capture import synth_episode

    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xD3])
    p0, g = sample_start(rng, cfg)
    n = 20 if defect == "short" else cfg.n_steps
    pos = demo_positions(p0, g, cfg, n)
    dz = np.zeros(n)
    if defect == "jump":
        dz[n // 2:] = 0.2
    traj = [wrist_pose(p, cfg, z) for p, z in zip(pos, dz)]
    embed = Embedder(cfg)
    emb_by_frame = [embed(p, g, embodiment) for p in pos]
    if defect == "occlusion":
        dropout = 0.6
    elif defect is not None and defect not in DEFECTS:
        raise ValueError(f"unknown defect {defect!r}")
    raw = synth_episode(
        traj, cube, cam, noise=noise_px, dropout=dropout, seed=seed, rate=cfg.rate, embodiment=embodiment,
        joints=closure_joints(hand_model, pos, g), hand_model=hand_model,
        embed_fn=lambda i, pose: emb_by_frame[i], embedding_dim=cfg.embedding_dim, episode_id=episode_id,
    )
    raw.ground_truth["target"] = g.tolist()
    raw.ground_truth["defect"] = defect
    return raw


class ToyReachEnv:
    """Deterministic given ``seed``. Positions stay in [-1, 1]^2."""

    def __init__(self, cfg: EnvConfig, seed: int):
        self.cfg = cfg
        self.seed = int(seed)
        self.embed = Embedder(cfg)
        self.reset()

    def reset(self):
        rng = np.random.default_rng([self.seed & 0xFFFFFFFF, 0xE5A])
        self.p, self.g = sample_start(rng, self.cfg)
        self.history = [self.p.copy()]
        self.t = 0
        return self.p.copy()

    @property
    def done(self):
        return self.t >= self.cfg.n_steps

    def step(self, delta):
        delta = np.asarray(delta, dtype=float)[:2]
        if not np.all(np.isfinite(delta)):
            raise ValueError("non-finite action")
        self.p = np.clip(self.p + delta, -1.0, 1.0)
        self.history.append(self.p.copy())
        self.t += 1
        return self.p.copy()

    def distance(self):
        return float(np.linalg.norm(self.g - self.p))

    def success(self):
        return self.distance() < self.cfg.success_radius

    def state_history(self, horizon: int, step: int):
        """[dp_t, dp_{t-step}, ..., dp_{t-H}] (9 each); identity before the first frame."""
        poses = [wrist_pose(p, self.cfg) for p in self.history[-(horizon + 2):]]
        pos = np.array([p.t for p in poses])
        quats = np.array([p.r.q for p in poses])
        dp = relative_batch(pos[:-1], quats[:-1], pos[1:], quats[1:]) if len(poses) > 1 else np.zeros((0, 9))
        out = []
        for k in range(horizon // step + 1):
            j = len(dp) - 1 - k * step
            out.append(dp[j] if j >= 0 else RELATIVE_IDENTITY)
        return np.concatenate(out)

    def embedding(self):
        return self.embed(self.p, self.g, Embodiment.ROBOT)

    def expert_actions(self, n: int, hand_model):
        """The expert's next ``n`` robot action rows [arm delta (9) | joint targets] from here."""
        pos = demo_positions(self.p, self.g, self.cfg, n + 1)
        poses = [wrist_pose(p, self.cfg) for p in pos]
        t = np.array([p.t for p in poses])
        q = np.array([p.r.q for p in poses])
        arm = relative_batch(t[:-1], q[:-1], t[1:], q[1:])
        return np.concatenate([arm, closure_joints(hand_model, pos[1:], self.g)], axis=1)


def chunk_to_deltas(actions, cfg: EnvConfig):
    """Denormalised action rows -> planar position deltas (first two arm-translation dims)."""
    return np.asarray(actions)[:, :2] / cfg.scale
