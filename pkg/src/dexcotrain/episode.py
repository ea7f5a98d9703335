"""Episode containers and the per-episode directory format.

An episode directory holds::

    manifest.json    embodiment, rate, frame count, schema version, record layout
    frames.bin       little-endian float32 records, one per frame (layout in manifest)
    embeddings.bin   little-endian float32, shape (frames, hands, 2, embedding_dim)

Raw and processed episodes share the layout; ``kind`` in the manifest tells
them apart. Missing values (untracked wrist, unobserved corners, joints on
human data before retargeting) are stored as NaN.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import SchemaMismatch
from .pose import Pose, relative_batch

EPISODE_SCHEMA_VERSION = 1
N_TIPS = 5


class Embodiment(str, Enum):
    HUMAN = "human"
    ROBOT = "robot"


@dataclass
class HandStream:
    wrist_t: np.ndarray  # (N, 3), NaN when untracked
    wrist_q: np.ndarray  # (N, 4)
    tracked: np.ndarray  # (N,) bool
    fingertips: np.ndarray  # (N, 5, 3) in wrist frame
    embeddings: np.ndarray  # (N, 2, E): pinky view, thumb view
    corners: Optional[np.ndarray] = None  # (N, faces, 4, 2) pixels, NaN when unobserved
    joints: Optional[np.ndarray] = None  # (N, J)

    def __len__(self):
        return len(self.tracked)

    def wrist(self, i) -> Optional[Pose]:
        if not self.tracked[i]:
            return None
        return Pose(self.wrist_t[i], self.wrist_q[i])

    def subset(self, idx):
        return HandStream(
            wrist_t=self.wrist_t[idx], wrist_q=self.wrist_q[idx], tracked=self.tracked[idx],
            fingertips=self.fingertips[idx], embeddings=self.embeddings[idx],
            corners=None if self.corners is None else self.corners[idx],
            joints=None if self.joints is None else self.joints[idx],
        )


@dataclass
class RawEpisode:
    embodiment: Embodiment
    rate: float
    timestamps: np.ndarray
    hands: list
    episode_id: str = "ep"
    ground_truth: dict = field(default_factory=dict)

    def __post_init__(self):
        self.embodiment = Embodiment(self.embodiment)
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        for h in self.hands:
            if h.fingertips.shape[1:] != (N_TIPS, 3):
                raise ValueError("fingertips must be 5x3 per hand")

    @property
    def n_frames(self):
        return len(self.timestamps)

    @property
    def bimanual(self):
        return len(self.hands) == 2

    def subset(self, idx, suffix=""):
        return RawEpisode(
            embodiment=self.embodiment, rate=self.rate, timestamps=self.timestamps[idx],
            hands=[h.subset(idx) for h in self.hands], episode_id=self.episode_id + suffix,
            ground_truth=self.ground_truth,
        )


def merge_hands(left: RawEpisode, right: RawEpisode) -> RawEpisode:
    """Combine two single-hand captures of equal length into a bimanual episode (left first)."""
    if left.n_frames != right.n_frames or left.embodiment != right.embodiment:
        raise ValueError("hands must share length and embodiment")
    gt = {k: left.ground_truth.get(k, []) + right.ground_truth.get(k, []) for k in ("wrist", "joints")}
    return RawEpisode(
        embodiment=left.embodiment, rate=left.rate, timestamps=left.timestamps,
        hands=[left.hands[0], right.hands[0]], episode_id=left.episode_id, ground_truth=gt,
    )


@dataclass
class FilterReport:
    track_ratio: float
    kept: bool
    reasons: list
    clip_bounds: Optional[list] = None  # per action dimension [p2, p97]
    rules: dict = field(default_factory=dict)  # rule id -> passed

    def to_dict(self):
        return {
            "track_ratio": self.track_ratio, "kept": self.kept, "reasons": list(self.reasons),
            "clip_bounds": self.clip_bounds, "rules": dict(self.rules),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["track_ratio"], d["kept"], list(d["reasons"]), d.get("clip_bounds"), dict(d.get("rules", {})))


@dataclass
class ProcessedHand:
    positions: np.ndarray  # (N, 3)
    quats: np.ndarray  # (N, 4)
    fingertips: np.ndarray  # (N, 5, 3)
    embeddings: np.ndarray  # (N, 2, E)
    joints: Optional[np.ndarray] = None  # (N, J) joint targets
    ik_residuals: Optional[np.ndarray] = None

    def pose(self, i) -> Pose:
        return Pose(self.positions[i], self.quats[i])

    def arm_actions(self):
        return relative_batch(self.positions[:-1], self.quats[:-1], self.positions[1:], self.quats[1:])


@dataclass
class ProcessedEpisode:
    embodiment: Embodiment
    rate: float
    timestamps: np.ndarray
    hands: list
    report: FilterReport
    episode_id: str = "ep"
    stages: list = field(default_factory=list)
    ground_truth: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return len(self.timestamps)

    @property
    def bimanual(self):
        return len(self.hands) == 2

    @property
    def n_joints(self):
        return self.hands[0].joints.shape[1]

    def actions(self):
        """(N-1, hands * (9 + J)): relative arm delta then absolute joint targets, per hand."""
        parts = []
        for h in self.hands:
            if h.joints is None:
                raise ValueError("episode has not been retargeted")
            parts.append(h.arm_actions())
            parts.append(h.joints[1:])
        return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# directory io
# ---------------------------------------------------------------------------

def _layout(n_hands, n_joints, n_faces, processed):
    fields = [("timestamp", 1)]
    for h in range(n_hands):
        fields += [
            (f"h{h}.tracked", 1), (f"h{h}.wrist_t", 3), (f"h{h}.wrist_q", 4),
            (f"h{h}.fingertips", 15), (f"h{h}.joints", n_joints),
        ]
        if processed:
            fields.append((f"h{h}.ik_residual", 1))
        else:
            fields.append((f"h{h}.corners", n_faces * 8))
    out, offset = [], 0
    for name, count in fields:
        out.append({"name": name, "offset": offset, "count": count})
        offset += count
    return {"stride": offset, "dtype": "<f4", "fields": out}


def _field(records, layout, name):
    for f in layout["fields"]:
        if f["name"] == name:
            return records[:, f["offset"]:f["offset"] + f["count"]]
    raise SchemaMismatch(f"field {name} missing from record layout")


def _write(path, manifest, records, embeddings):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "frames.bin").write_bytes(np.ascontiguousarray(records, dtype="<f4").tobytes())
    (path / "embeddings.bin").write_bytes(np.ascontiguousarray(embeddings, dtype="<f4").tobytes())
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _read(path, kind):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("schema_version") != EPISODE_SCHEMA_VERSION:
        raise SchemaMismatch(f"episode schema {manifest.get('schema_version')} != {EPISODE_SCHEMA_VERSION}")
    if manifest.get("kind") != kind:
        raise SchemaMismatch(f"expected a {kind} episode, found {manifest.get('kind')}")
    layout = manifest["record"]
    n = manifest["n_frames"]
    rec = np.frombuffer((path / "frames.bin").read_bytes(), dtype="<f4").astype(float)
    if rec.size != n * layout["stride"]:
        raise SchemaMismatch("frames.bin size disagrees with manifest")
    rec = rec.reshape(n, layout["stride"])
    emb = np.frombuffer((path / "embeddings.bin").read_bytes(), dtype="<f4")
    emb = emb.reshape(n, manifest["n_hands"], 2, manifest["embedding_dim"])
    return manifest, layout, rec, emb


def save_raw_episode(ep: RawEpisode, path):
    n_joints = max((h.joints.shape[1] for h in ep.hands if h.joints is not None), default=0)
    n_faces = max((h.corners.shape[1] for h in ep.hands if h.corners is not None), default=0)
    layout = _layout(len(ep.hands), n_joints, n_faces, processed=False)
    rec = np.full((ep.n_frames, layout["stride"]), np.nan)
    _field(rec, layout, "timestamp")[:, 0] = ep.timestamps
    for k, h in enumerate(ep.hands):
        _field(rec, layout, f"h{k}.tracked")[:, 0] = h.tracked
        _field(rec, layout, f"h{k}.wrist_t")[:] = h.wrist_t
        _field(rec, layout, f"h{k}.wrist_q")[:] = h.wrist_q
        _field(rec, layout, f"h{k}.fingertips")[:] = h.fingertips.reshape(ep.n_frames, 15)
        if h.joints is not None:
            _field(rec, layout, f"h{k}.joints")[:] = h.joints
        if h.corners is not None:
            _field(rec, layout, f"h{k}.corners")[:] = h.corners.reshape(ep.n_frames, -1)
    emb = np.stack([h.embeddings for h in ep.hands], axis=1)
    manifest = {
        "schema_version": EPISODE_SCHEMA_VERSION, "kind": "raw", "episode_id": ep.episode_id,
        "embodiment": ep.embodiment.value, "rate": ep.rate, "n_frames": ep.n_frames,
        "n_hands": len(ep.hands), "embedding_dim": int(emb.shape[-1]), "n_joints": n_joints,
        "n_faces": n_faces, "has_joints": [h.joints is not None for h in ep.hands],
        "has_corners": [h.corners is not None for h in ep.hands], "record": layout,
        "ground_truth": ep.ground_truth,
    }
    _write(path, manifest, rec, emb)


def load_raw_episode(path) -> RawEpisode:
    m, layout, rec, emb = _read(path, "raw")
    n = m["n_frames"]
    hands = []
    for k in range(m["n_hands"]):
        corners = None
        if m["has_corners"][k]:
            corners = _field(rec, layout, f"h{k}.corners").reshape(n, m["n_faces"], 4, 2).copy()
        joints = _field(rec, layout, f"h{k}.joints").copy() if m["has_joints"][k] else None
        hands.append(HandStream(
            wrist_t=_field(rec, layout, f"h{k}.wrist_t").copy(),
            wrist_q=_field(rec, layout, f"h{k}.wrist_q").copy(),
            tracked=_field(rec, layout, f"h{k}.tracked")[:, 0] > 0.5,
            fingertips=_field(rec, layout, f"h{k}.fingertips").reshape(n, 5, 3).copy(),
            embeddings=emb[:, k].copy(), corners=corners, joints=joints,
        ))
    return RawEpisode(
        embodiment=Embodiment(m["embodiment"]), rate=m["rate"],
        timestamps=_field(rec, layout, "timestamp")[:, 0].copy(), hands=hands,
        episode_id=m["episode_id"], ground_truth=m.get("ground_truth", {}),
    )


def save_processed_episode(ep: ProcessedEpisode, path):
    n_joints = ep.hands[0].joints.shape[1] if ep.hands[0].joints is not None else 0
    layout = _layout(len(ep.hands), n_joints, 0, processed=True)
    rec = np.full((ep.n_frames, layout["stride"]), np.nan)
    _field(rec, layout, "timestamp")[:, 0] = ep.timestamps
    for k, h in enumerate(ep.hands):
        _field(rec, layout, f"h{k}.tracked")[:, 0] = 1.0
        _field(rec, layout, f"h{k}.wrist_t")[:] = h.positions
        _field(rec, layout, f"h{k}.wrist_q")[:] = h.quats
        _field(rec, layout, f"h{k}.fingertips")[:] = h.fingertips.reshape(ep.n_frames, 15)
        if h.joints is not None:
            _field(rec, layout, f"h{k}.joints")[:] = h.joints
        if h.ik_residuals is not None:
            _field(rec, layout, f"h{k}.ik_residual")[:, 0] = h.ik_residuals
    emb = np.stack([h.embeddings for h in ep.hands], axis=1)
    manifest = {
        "schema_version": EPISODE_SCHEMA_VERSION, "kind": "processed", "episode_id": ep.episode_id,
        "embodiment": ep.embodiment.value, "rate": ep.rate, "n_frames": ep.n_frames,
        "n_hands": len(ep.hands), "embedding_dim": int(emb.shape[-1]), "n_joints": n_joints,
        "record": layout, "filter_report": ep.report.to_dict(), "stages": list(ep.stages),
        "ground_truth": ep.ground_truth,
    }
    _write(path, manifest, rec, emb)


def load_processed_episode(path) -> ProcessedEpisode:
    m, layout, rec, emb = _read(path, "processed")
    n = m["n_frames"]
    hands = []
    for k in range(m["n_hands"]):
        joints = _field(rec, layout, f"h{k}.joints").copy() if m["n_joints"] else None
        res = _field(rec, layout, f"h{k}.ik_residual")[:, 0].copy()
        hands.append(ProcessedHand(
            positions=_field(rec, layout, f"h{k}.wrist_t").copy(),
            quats=_field(rec, layout, f"h{k}.wrist_q").copy(),
            fingertips=_field(rec, layout, f"h{k}.fingertips").reshape(n, 5, 3).copy(),
            embeddings=emb[:, k].copy(), joints=joints,
            ik_residuals=None if np.all(np.isnan(res)) else res,
        ))
    return ProcessedEpisode(
        embodiment=Embodiment(m["embodiment"]), rate=m["rate"],
        timestamps=_field(rec, layout, "timestamp")[:, 0].copy(), hands=hands,
        report=FilterReport.from_dict(m["filter_report"]), episode_id=m["episode_id"],
        stages=m.get("stages", []), ground_truth=m.get("ground_truth", {}),
    )
