"""Transitions, on-disk datasets and the fixed-ratio co-training batch sampler.

One transition row is stored as float32 in the order

    [state history | interhand (bimanual only) | embeddings | action chunk]

The first three blocks form the policy condition; the chunk is the
diffusion target. Everything except the embeddings is normalised with the
dataset's own (per-embodiment) statistics.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .episode import Embodiment, ProcessedEpisode
from .errors import (
    CorruptFile,
    DimensionMismatch,
    EmbodimentMismatch,
    EmptyDataset,
    EpisodeTooShort,
    SchemaMismatch,
)
from .pipeline import NormalizationStats, normalize_apply, normalize_fit
from .pose import RELATIVE_IDENTITY, relative_batch

log = logging.getLogger(__name__)

DATASET_SCHEMA_VERSION = 1
CHUNK_SIZE = 48
HORIZON = 3
STEP = 1


@dataclass(frozen=True, eq=False)
class DatasetStats:
    action: NormalizationStats
    state: NormalizationStats

    def to_dict(self):
        return {"action": self.action.to_dict(), "state": self.state.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(NormalizationStats.from_dict(d["action"]), NormalizationStats.from_dict(d["state"]))


def _state_rows(ep: ProcessedEpisode):
    """Per-frame [dp per hand | interhand] with dp_0 the identity, shape (N, 9*hands (+9))."""
    n = ep.n_frames
    parts = []
    for h in ep.hands:
        dp = np.tile(RELATIVE_IDENTITY, (n, 1))
        dp[1:] = h.arm_actions()
        parts.append(dp)
    if ep.bimanual:
        left, right = ep.hands
        parts.append(relative_batch(right.positions, right.quats, left.positions, left.quats))
    return np.concatenate(parts, axis=1)


def _check_embodiment(ep, embodiment):
    if ep.embodiment is not Embodiment(embodiment):
        raise EmbodimentMismatch(f"episode {ep.episode_id} is {ep.embodiment.value}, dataset is {Embodiment(embodiment).value}")


def fit_dataset_stats(episodes, embodiment, lo_pct: float = 2.0, hi_pct: float = 97.0) -> DatasetStats:
    """Action and state bounds over every episode of one embodiment."""
    for ep in episodes:
        _check_embodiment(ep, embodiment)
    actions = np.concatenate([ep.actions() for ep in episodes])
    states = np.concatenate([_state_rows(ep)[1:] for ep in episodes])
    return DatasetStats(normalize_fit(actions, embodiment, lo_pct, hi_pct), normalize_fit(states, embodiment, lo_pct, hi_pct))


class Transitions(NamedTuple):
    state: np.ndarray  # (M, entries * hands * 9)
    interhand: Optional[np.ndarray]  # (M, 9) for bimanual episodes
    embeddings: np.ndarray  # (M, hands * 2 * E)
    chunks: np.ndarray  # (M, n, d)


def build_transitions(ep: ProcessedEpisode, stats: DatasetStats, n: int = CHUNK_SIZE, H: int = HORIZON,
                      step: int = STEP) -> Transitions:
    """One transition per frame i in [0, N-1).

    The chunk holds actions i .. i+n-1, padded by repeating the last action.
    The history holds dp_i, dp_{i-step}, ..., dp_{i-H}, where dp_j is the
    relative pose from frame j-1 to j; entries before the start are identity.
    """
    if H % step:
        raise ValueError(f"horizon {H} must be a multiple of step {step}")
    _check_embodiment(ep, stats.action.embodiment)
    N = ep.n_frames
    if N < H + n + 1:
        raise EpisodeTooShort(f"episode {ep.episode_id}: {N} frames < H + n + 1 = {H + n + 1}")
    actions = normalize_apply(ep.actions(), stats.action)
    m = N - 1
    idx = np.minimum(np.arange(m)[:, None] + np.arange(n)[None, :], m - 1)
    chunks = actions[idx]

    rows = normalize_apply(_state_rows(ep), stats.state)
    ident = normalize_apply(np.tile(RELATIVE_IDENTITY, len(ep.hands) + ep.bimanual), stats.state)
    per_hand = 9 * len(ep.hands)
    entries = []
    for k in range(H // step + 1):
        j = np.arange(m) - k * step
        e = np.where((j >= 0)[:, None], rows[np.maximum(j, 0), :per_hand], ident[:per_hand])
        entries.append(e)
    state = np.concatenate(entries, axis=1)
    interhand = rows[:m, per_hand:] if ep.bimanual else None
    emb = np.concatenate([h.embeddings[:m].reshape(m, -1) for h in ep.hands], axis=1)
    f32 = lambda a: None if a is None else np.ascontiguousarray(a, dtype=np.float32)  # noqa: E731
    return Transitions(f32(state), f32(interhand), f32(emb), f32(chunks))


class Dataset:
    """Immutable float32 transition table for one embodiment."""

    def __init__(self, embodiment, data, layout, stats: DatasetStats, chunk_size, action_dim, horizon, step,
                 n_hands, embedding_dim, episodes):
        self.embodiment = Embodiment(embodiment)
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.data.setflags(write=False)
        self.layout = layout
        self.stats = stats
        self.chunk_size = int(chunk_size)
        self.action_dim = int(action_dim)
        self.horizon = int(horizon)
        self.step = int(step)
        self.n_hands = int(n_hands)
        self.embedding_dim = int(embedding_dim)
        self.episodes = list(episodes)
        chunk = _field(layout, "chunk")
        self.cond_dim = chunk["offset"]

    def __len__(self):
        return len(self.data)

    def condition(self, idx):
        return self.data[idx, :self.cond_dim]

    def chunk(self, idx):
        c = self.data[idx, self.cond_dim:]
        return c.reshape(c.shape[:-1] + (self.chunk_size, self.action_dim))


def _field(layout, name):
    for f in layout["fields"]:
        if f["name"] == name:
            return f
    raise SchemaMismatch(f"layout has no field {name}")


def _make_layout(widths):
    fields, offset = [], 0
    for name, count in widths:
        fields.append({"name": name, "offset": offset, "count": int(count)})
        offset += int(count)
    return {"stride": offset, "dtype": "<f4", "fields": fields}


def build_dataset(episodes, embodiment, n: int = CHUNK_SIZE, H: int = HORIZON, step: int = STEP,
                  stats: Optional[DatasetStats] = None) -> Dataset:
    """Fit per-embodiment stats (unless given) and stack every episode's transitions.

    Episodes shorter than H + n + 1 frames are skipped and listed in the log.
    """
    episodes = list(episodes)
    for ep in episodes:
        _check_embodiment(ep, embodiment)
    usable = [ep for ep in episodes if ep.n_frames >= H + n + 1]
    for ep in episodes:
        if ep.n_frames < H + n + 1:
            log.warning("skipping %s: %d frames < %d", ep.episode_id, ep.n_frames, H + n + 1)
    if not usable:
        raise EmptyDataset(f"no {Embodiment(embodiment).value} episode has at least {H + n + 1} frames")
    hands = {len(ep.hands) for ep in usable}
    if len(hands) != 1:
        raise DimensionMismatch("episodes mix single-hand and bimanual layouts")
    stats = stats or fit_dataset_stats(usable, embodiment)
    rows, meta, start = [], [], 0
    for ep in usable:
        tr = build_transitions(ep, stats, n, H, step)
        parts = [tr.state] + ([tr.interhand] if tr.interhand is not None else []) + [tr.embeddings]
        parts.append(tr.chunks.reshape(len(tr.chunks), -1))
        rows.append(np.concatenate(parts, axis=1))
        meta.append({"episode_id": ep.episode_id, "start": start, "count": len(tr.chunks), "n_frames": ep.n_frames})
        start += len(tr.chunks)
    n_hands = hands.pop()
    emb_dim = usable[0].hands[0].embeddings.shape[-1]
    action_dim = usable[0].actions().shape[1]
    widths = [("state", (H // step + 1) * 9 * n_hands)]
    if n_hands == 2:
        widths.append(("interhand", 9))
    widths += [("embeddings", n_hands * 2 * emb_dim), ("chunk", n * action_dim)]
    return Dataset(embodiment, np.concatenate(rows), _make_layout(widths), stats, n, action_dim, H, step, n_hands,
                   emb_dim, meta)


# ---------------------------------------------------------------------------
# co-training sampler
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    w_r: int
    w_h: int
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.w_r < 0 or self.w_h < 0 or self.w_r + self.w_h <= 0:
            raise ValueError("weights must be non-negative with a positive sum")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def batch_counts(cfg: SamplerConfig):
    """(robot, human) per batch: robot = round-half-up(B * w_r / (w_r + w_h)), in exact integers."""
    total = cfg.w_r + cfg.w_h
    robot = (2 * cfg.batch_size * cfg.w_r + total) // (2 * total)
    return robot, cfg.batch_size - robot


class _EpochStream:
    """Without-replacement draws; a fresh seeded permutation per epoch."""

    def __init__(self, size, seed, tag):
        self.size, self.seed, self.tag = size, seed, tag
        self.epoch, self.pos = 0, 0
        self.perm = self._perm()

    def _perm(self):
        return np.random.default_rng([self.seed & 0xFFFFFFFF, self.tag, self.epoch]).permutation(self.size)

    def take(self, k):
        out = []
        while k > 0:
            if self.pos == self.size:
                self.epoch += 1
                self.pos = 0
                self.perm = self._perm()
            got = self.perm[self.pos:self.pos + k]
            out.append(got)
            self.pos += len(got)
            k -= len(got)
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def state(self):
        return {"epoch": self.epoch, "pos": self.pos}

    def restore(self, s):
        self.epoch, self.pos = s["epoch"], s["pos"]
        self.perm = self._perm()


class Batch(NamedTuple):
    cond: np.ndarray  # (B, cond_dim) float32
    chunk: np.ndarray  # (B, n, d) float32
    is_robot: np.ndarray  # (B,) bool
    index: np.ndarray  # (B,) row in the source dataset


_ROBOT_TAG, _HUMAN_TAG, _ORDER_TAG = 1, 2, 3


class CoTrainSampler:
    """Exact-count robot/human batches. Single owner: not safe for concurrent calls."""

    def __init__(self, d_r: Optional[Dataset], d_h: Optional[Dataset], cfg: SamplerConfig):
        self.cfg = cfg
        self.d_r, self.d_h = d_r, d_h
        self.counts = batch_counts(cfg)
        for ds, count, name in ((d_r, self.counts[0], "robot"), (d_h, self.counts[1], "human")):
            if count > 0 and (ds is None or len(ds) == 0):
                raise EmptyDataset(f"{name} dataset is empty but its batch share is {count}")
        if d_r is not None and d_h is not None:
            if d_r.cond_dim != d_h.cond_dim or (d_r.chunk_size, d_r.action_dim) != (d_h.chunk_size, d_h.action_dim):
                raise DimensionMismatch("robot and human datasets have different layouts")
        ref = d_r if self.counts[0] > 0 else d_h
        self.cond_dim, self.chunk_shape = ref.cond_dim, (ref.chunk_size, ref.action_dim)
        self._r = _EpochStream(len(d_r), cfg.seed, _ROBOT_TAG) if d_r is not None and len(d_r) else None
        self._h = _EpochStream(len(d_h), cfg.seed, _HUMAN_TAG) if d_h is not None and len(d_h) else None
        self.calls = 0

    def sample_batch(self) -> Batch:
        nr, nh = self.counts
        ir = self._r.take(nr) if nr else np.zeros(0, dtype=int)
        ih = self._h.take(nh) if nh else np.zeros(0, dtype=int)
        cond = np.empty((nr + nh, self.cond_dim), dtype=np.float32)
        chunk = np.empty((nr + nh,) + self.chunk_shape, dtype=np.float32)
        if nr:
            cond[:nr], chunk[:nr] = self.d_r.condition(ir), self.d_r.chunk(ir)
        if nh:
            cond[nr:], chunk[nr:] = self.d_h.condition(ih), self.d_h.chunk(ih)
        is_robot = np.arange(nr + nh) < nr
        index = np.concatenate([ir, ih])
        order = np.random.default_rng([self.cfg.seed & 0xFFFFFFFF, _ORDER_TAG, self.calls]).permutation(nr + nh)
        self.calls += 1
        return Batch(cond[order], chunk[order], is_robot[order], index[order])

    def state(self):
        return {
            "calls": self.calls,
            "robot": None if self._r is None else self._r.state(),
            "human": None if self._h is None else self._h.state(),
        }

    def restore(self, s):
        self.calls = s["calls"]
        if self._r is not None:
            self._r.restore(s["robot"])
        if self._h is not None:
            self._h.restore(s["human"])


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_dataset(ds: Dataset, path):
    """manifest.json + transitions.bin (little-endian float32 rows, CRC-32 trailer)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    payload = ds.data.astype("<f4").tobytes()
    crc = zlib.crc32(payload)
    manifest = {
        "schema_version": DATASET_SCHEMA_VERSION, "kind": "dataset", "embodiment": ds.embodiment.value,
        "n_rows": len(ds), "layout": ds.layout, "chunk_size": ds.chunk_size, "action_dim": ds.action_dim,
        "horizon": ds.horizon, "step": ds.step, "n_hands": ds.n_hands, "embedding_dim": ds.embedding_dim,
        "stats": ds.stats.to_dict(), "episodes": ds.episodes, "crc32": crc,
    }
    (path / "transitions.bin").write_bytes(payload + struct.pack("<I", crc))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _validate_layout(m):
    layout = m["layout"]
    widths = {f["name"]: f["count"] for f in layout["fields"]}
    expect = {
        "state": (m["horizon"] // m["step"] + 1) * 9 * m["n_hands"],
        "embeddings": m["n_hands"] * 2 * m["embedding_dim"],
        "chunk": m["chunk_size"] * m["action_dim"],
    }
    if m["n_hands"] == 2:
        expect["interhand"] = 9
    if widths != expect or sum(widths.values()) != layout["stride"] or layout.get("dtype") != "<f4":
        raise SchemaMismatch("record layout disagrees with the declared dimensions")
    offset = 0
    for f in layout["fields"]:
        if f["offset"] != offset:
            raise SchemaMismatch("record layout offsets are not contiguous")
        offset += f["count"]


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        m = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"unreadable manifest: {exc}") from exc
    if m.get("schema_version") != DATASET_SCHEMA_VERSION or m.get("kind") != "dataset":
        raise SchemaMismatch(f"dataset schema {m.get('schema_version')} != {DATASET_SCHEMA_VERSION}")
    _validate_layout(m)
    raw = (path / "transitions.bin").read_bytes()
    stride = m["layout"]["stride"]
    if len(raw) != m["n_rows"] * stride * 4 + 4:
        raise CorruptFile(f"transitions.bin has {len(raw)} bytes, expected {m['n_rows'] * stride * 4 + 4}")
    payload, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc or crc != m.get("crc32", crc):
        raise CorruptFile("checksum mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(m["n_rows"], stride)
    return Dataset(
        m["embodiment"], data, m["layout"], DatasetStats.from_dict(m["stats"]), m["chunk_size"], m["action_dim"],
        m["horizon"], m["step"], m["n_hands"], m["embedding_dim"], m["episodes"],
    )
