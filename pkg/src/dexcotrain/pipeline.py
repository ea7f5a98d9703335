"""Downstream processing of raw captures into training-ready episodes.

Stage order for one episode::

    track -> filter -> interpolate -> clip -> smooth -> retarget

``interpolate`` fills short tracking gaps (and splits at long ones) so that
consecutive poses exist for the action computation the ``clip`` stage needs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .capture import REJECT_RMS_PX, corners_to_observations, estimate_wrist_pose
from .episode import Embodiment, FilterReport, ProcessedEpisode, ProcessedHand, RawEpisode
from .errors import DimensionMismatch, EmbodimentMismatch, EmptyEpisode, TooFewSamples
from .pose import Pose, compose, lift, quat_canonical, quat_slerp, relative_batch

log = logging.getLogger(__name__)

STAGES = ("track", "filter", "interpolate", "clip", "smooth", "retarget")


@dataclass(frozen=True)
class FilterRules:
    min_track_ratio: float = 0.75
    min_frames: int = 30
    jump_max: float = 0.10


@dataclass(frozen=True)
class ProcessConfig:
    rules: FilterRules = field(default_factory=FilterRules)
    max_gap: int = 5
    clip_lo_pct: float = 2.0
    clip_hi_pct: float = 97.0
    smooth_sigma: float = 2.0
    reject_rms: float = REJECT_RMS_PX
    ik: dict = field(default_factory=dict)  # keyword overrides for ik_retarget (damping, max_iters, tol)


# ---------------------------------------------------------------------------
# tracking and filtering
# ---------------------------------------------------------------------------

def track_episode(ep: RawEpisode, cube, cam, reject_rms=REJECT_RMS_PX) -> RawEpisode:
    """Estimate wrist poses from marker corners for every hand that carries them."""
    hands = []
    for h in ep.hands:
        if h.corners is None:
            hands.append(h)
            continue
        n = len(h)
        wt = np.full((n, 3), np.nan)
        wq = np.full((n, 4), np.nan)
        tracked = np.zeros(n, dtype=bool)
        for i in range(n):
            frame = estimate_wrist_pose(corners_to_observations(h.corners[i]), cube, cam, ep.timestamps[i], reject_rms)
            if frame.pose is not None:
                wt[i], wq[i], tracked[i] = frame.pose.t, frame.pose.r.q, True
        hands.append(replace(h, wrist_t=wt, wrist_q=wq, tracked=tracked))
    return replace(ep, hands=hands)


def track_ratio(ep: RawEpisode) -> float:
    if ep.n_frames == 0:
        raise EmptyEpisode(f"episode {ep.episode_id} has no frames")
    return min(float(np.mean(h.tracked)) for h in ep.hands)


def max_jump(ep: RawEpisode) -> float:
    """Largest per-frame translation between consecutive tracked frames, over hands."""
    worst = 0.0
    for h in ep.hands:
        idx = np.flatnonzero(h.tracked)
        if len(idx) < 2:
            continue
        step = np.linalg.norm(np.diff(h.wrist_t[idx], axis=0), axis=1) / np.diff(idx)
        worst = max(worst, float(step.max()))
    return worst


def filter_episode(ep: RawEpisode, rules: FilterRules = FilterRules()) -> FilterReport:
    """Apply every rule in order and record all outcomes; kept iff all pass."""
    ratio = track_ratio(ep) if ep.n_frames else 0.0
    outcomes = {
        "track_ratio": ratio >= rules.min_track_ratio,
        "min_frames": ep.n_frames >= rules.min_frames,
        "jump": max_jump(ep) <= rules.jump_max,
    }
    reasons = [k for k, ok in outcomes.items() if not ok]
    return FilterReport(track_ratio=ratio, kept=not reasons, reasons=reasons, rules=outcomes)


# ---------------------------------------------------------------------------
# gap filling
# ---------------------------------------------------------------------------

def _runs(mask):
    """(start, stop) of maximal runs where ``mask`` is True."""
    padded = np.concatenate([[False], mask, [False]])
    d = np.diff(padded.astype(int))
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def fill_gaps(ep: RawEpisode, max_gap: int = 5) -> list:
    """Interpolate gaps of at most ``max_gap`` frames, split the episode at longer ones.

    A frame counts as missing when any hand is untracked. Leading and trailing
    missing frames are trimmed. Returns the list of gap-free pieces.
    """
    ok = np.all([h.tracked for h in ep.hands], axis=0) if ep.n_frames else np.zeros(0, bool)
    if ok.all():
        return [ep]
    keep = ok.copy()
    for a, b in _runs(~ok):
        if a == 0 or b == ep.n_frames or b - a > max_gap:
            continue
        keep[a:b] = True
    pieces = []
    for k, (a, b) in enumerate(_runs(keep)):
        piece = ep.subset(np.arange(a, b), suffix=f"_s{k}" if len(_runs(keep)) > 1 else "")
        pieces.append(_interpolate_piece(piece))
    return pieces


def _interpolate_piece(ep: RawEpisode) -> RawEpisode:
    hands = []
    for h in ep.hands:
        if h.tracked.all():
            hands.append(h)
            continue
        wt, wq = h.wrist_t.copy(), h.wrist_q.copy()
        for a, b in _runs(~h.tracked):
            pa = Pose(wt[a - 1], wq[a - 1])
            pb = Pose(wt[b], wq[b])
            span = b - a + 1
            for k, i in enumerate(range(a, b), start=1):
                u = k / span
                wt[i] = (1.0 - u) * pa.t + u * pb.t
                wq[i] = quat_slerp(pa.r.q, pb.r.q, u)
        hands.append(replace(h, wrist_t=wt, wrist_q=wq, tracked=np.ones(len(h), dtype=bool)))
    return replace(ep, hands=hands)


# ---------------------------------------------------------------------------
# percentile clipping
# ---------------------------------------------------------------------------

def percentile_sorted(col: np.ndarray, pct: float) -> float:
    """Linear interpolation between order statistics at zero-based rank pct/100*(n-1)."""
    n = len(col)
    rank = pct / 100.0 * (n - 1)
    k = int(math.floor(rank))
    frac = rank - k
    if k + 1 >= n:
        return float(col[n - 1])
    return float(col[k] + frac * (col[k + 1] - col[k]))


def clip_percentiles(values, lo_pct: float = 2.0, hi_pct: float = 97.0):
    """Clamp each column into its [lo_pct, hi_pct] percentile band.

    Returns ``(clipped, bounds)`` with ``bounds`` of shape (dims, 2).
    """
    v = np.asarray(values, dtype=float)
    squeeze = v.ndim == 1
    v = v.reshape(len(v), -1)
    if len(v) < 2:
        raise TooFewSamples("percentile clipping needs at least 2 samples")
    s = np.sort(v, axis=0)
    bounds = np.array([[percentile_sorted(s[:, d], lo_pct), percentile_sorted(s[:, d], hi_pct)] for d in range(v.shape[1])])
    out = np.clip(v, bounds[:, 0], bounds[:, 1])
    return (out[:, 0] if squeeze else out), bounds


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------

def gaussian_kernel(sigma: float, truncate: float = 4.0) -> np.ndarray:
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=float)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def reflect_index(idx, n):
    """Half-sample symmetric extension: (d c b a | a b c d | d c b a)."""
    m = np.mod(idx, 2 * n)
    return np.where(m >= n, 2 * n - 1 - m, m)


def _windows(n, sigma):
    w = gaussian_kernel(sigma)
    r = len(w) // 2
    idx = reflect_index(np.arange(n)[:, None] + np.arange(-r, r + 1)[None, :], n)
    return w, idx


def smooth_positions(positions, sigma: float = 2.0) -> np.ndarray:
    p = np.asarray(positions, dtype=float)
    w, idx = _windows(len(p), sigma)
    return np.einsum("k,nkd->nd", w, p[idx])


def smooth_quats(quats, sigma: float = 2.0) -> np.ndarray:
    """Weighted quaternion mean per frame after aligning window members to the centre hemisphere."""
    q = quat_canonical(quats)
    w, idx = _windows(len(q), sigma)
    win = q[idx]  # (n, k, 4)
    sign = np.where(np.einsum("nkd,nd->nk", win, q) < 0.0, -1.0, 1.0)
    mean = np.einsum("k,nk,nkd->nd", w, sign, win)
    return quat_canonical(mean)


def gaussian_smooth(positions, quats, sigma: float = 2.0):
    """Smooth a pose series; returns ``(positions, quats)`` of the same length."""
    if len(positions) < 1:
        raise TooFewSamples("smoothing needs at least one frame")
    return smooth_positions(positions, sigma), smooth_quats(quats, sigma)


# ---------------------------------------------------------------------------
# relative actions
# ---------------------------------------------------------------------------

def compute_relative_actions(positions, quats=None) -> np.ndarray:
    """Action i is ``relative(pose_i, pose_{i+1})``; accepts arrays or a list of ``Pose``."""
    if quats is None:
        poses = list(positions)
        positions = np.array([p.t for p in poses]).reshape(-1, 3)
        quats = np.array([p.r.q for p in poses]).reshape(-1, 4)
    positions = np.asarray(positions, dtype=float)
    quats = np.asarray(quats, dtype=float)
    if len(positions) < 2:
        raise TooFewSamples("relative actions need at least 2 poses")
    return relative_batch(positions[:-1], quats[:-1], positions[1:], quats[1:])


def integrate_actions(start: Pose, actions):
    """Chain relative actions from ``start``; returns positions (N+1, 3) and quats (N+1, 4)."""
    poses = [start]
    for a in actions:
        poses.append(compose(poses[-1], lift(a)))
    return np.array([p.t for p in poses]), np.array([p.r.q for p in poses])


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NormalizationStats:
    embodiment: Embodiment
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "embodiment", Embodiment(self.embodiment))
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))

    @property
    def dim(self):
        return len(self.lo)

    @property
    def constant(self):
        return ~(self.hi - self.lo > 1e-12)

    def to_dict(self):
        return {"embodiment": self.embodiment.value, "lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(Embodiment(d["embodiment"]), np.array(d["lo"]), np.array(d["hi"]))


def normalize_fit(actions, embodiment, lo_pct: float = 2.0, hi_pct: float = 97.0) -> NormalizationStats:
    a = np.asarray(actions, dtype=float)
    if a.ndim != 2 or len(a) < 2:
        raise TooFewSamples("normalisation fit needs at least 2 samples of shape (n, d)")
    _, bounds = clip_percentiles(a, lo_pct, hi_pct)
    return NormalizationStats(Embodiment(embodiment), bounds[:, 0].copy(), bounds[:, 1].copy())


def _check(x, stats, embodiment):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != stats.dim:
        raise DimensionMismatch(f"data dim {x.shape[-1]} != stats dim {stats.dim}")
    if embodiment is not None and Embodiment(embodiment) is not stats.embodiment:
        raise EmbodimentMismatch(f"{stats.embodiment.value} stats applied to {Embodiment(embodiment).value} data")
    return x


def normalize_apply(x, stats: NormalizationStats, embodiment=None) -> np.ndarray:
    """Clamp to [lo, hi] and map affinely onto [-1, 1]; constant dimensions map to 0."""
    x = _check(x, stats, embodiment)
    const = stats.constant
    span = np.where(const, 1.0, stats.hi - stats.lo)
    y = 2.0 * (np.clip(x, stats.lo, stats.hi) - stats.lo) / span - 1.0
    return np.where(const, 0.0, y)


def denormalize(y, stats: NormalizationStats, embodiment=None) -> np.ndarray:
    y = _check(y, stats, embodiment)
    x = stats.lo + 0.5 * (y + 1.0) * (stats.hi - stats.lo)
    return np.where(stats.constant, stats.lo, x)


# ---------------------------------------------------------------------------
# whole-episode processing
# ---------------------------------------------------------------------------

def _to_processed(piece: RawEpisode, report, stages) -> ProcessedEpisode:
    hands = [
        ProcessedHand(
            positions=h.wrist_t.copy(), quats=quat_canonical(h.wrist_q), fingertips=h.fingertips.copy(),
            embeddings=h.embeddings.copy(), joints=None if h.joints is None else h.joints.copy(),
        )
        for h in piece.hands
    ]
    return ProcessedEpisode(
        embodiment=piece.embodiment, rate=piece.rate, timestamps=piece.timestamps.copy(), hands=hands,
        report=report, episode_id=piece.episode_id, stages=list(stages), ground_truth=piece.ground_truth,
    )


def clip_episode(ep: ProcessedEpisode, lo_pct=2.0, hi_pct=97.0) -> ProcessedEpisode:
    """Clip each hand's relative arm actions per dimension and re-integrate the poses."""
    hands, bounds = [], []
    for h in ep.hands:
        actions = compute_relative_actions(h.positions, h.quats)
        clipped, b = clip_percentiles(actions, lo_pct, hi_pct)
        pos, quat = integrate_actions(h.pose(0), clipped)
        hands.append(replace(h, positions=pos, quats=quat))
        bounds.extend(b.tolist())
    report = replace(ep.report, clip_bounds=bounds)
    return replace(ep, hands=hands, report=report, stages=ep.stages + ["clip"])


def smooth_episode(ep: ProcessedEpisode, sigma=2.0) -> ProcessedEpisode:
    hands = []
    for h in ep.hands:
        pos, quat = gaussian_smooth(h.positions, h.quats, sigma)
        hands.append(replace(h, positions=pos, quats=quat))
    return replace(ep, hands=hands, stages=ep.stages + ["smooth"])


@dataclass
class ProcessOutcome:
    episode_id: str
    reports: list  # FilterReport per piece (and the raw episode when it is rejected up front)
    episodes: list  # kept ProcessedEpisode pieces
    error: Optional[str] = None


def process_episode(raw: RawEpisode, cfg: ProcessConfig, cube, cam, hand_model) -> ProcessOutcome:
    """Run the full stage chain on one raw episode."""
    from .retarget import retarget_episode

    stages = ["track"]
    ep = track_episode(raw, cube, cam, cfg.reject_rms)
    stages.append("filter")
    report = filter_episode(ep, cfg.rules)
    if not report.kept:
        log.info("%s rejected: %s", raw.episode_id, report.reasons)
        return ProcessOutcome(raw.episode_id, [report], [])
    stages.append("interpolate")
    out_reports, out_eps = [], []
    for piece in fill_gaps(ep, cfg.max_gap):
        piece_report = filter_episode(piece, cfg.rules)
        out_reports.append(piece_report)
        if not piece_report.kept:
            continue
        pe = _to_processed(piece, piece_report, stages)
        pe = clip_episode(pe, cfg.clip_lo_pct, cfg.clip_hi_pct)
        pe = smooth_episode(pe, cfg.smooth_sigma)
        if any(h.joints is None for h in pe.hands):
            pe = retarget_episode(pe, hand_model, **cfg.ik)
        else:
            pe = replace(pe, stages=pe.stages + ["retarget"])
        log.info("%s stages: %s", pe.episode_id, " -> ".join(pe.stages))
        out_eps.append(pe)
    return ProcessOutcome(raw.episode_id, out_reports, out_eps)
