"""Diffusion action-chunk generator: noise schedules, the epsilon-prediction
loss, AdamW training and deterministic few-step DDIM sampling.

Timesteps are 1-based: t in 1..T, with ``alpha_bars[t - 1]`` the cumulative
signal fraction at step t. The implicit alpha_bar at t = 0 is 1.

The reference denoiser is a two-hidden-layer SiLU network over
``[flattened noisy chunk | sinusoidal timestep embedding | condition]`` whose
backward pass is written out by hand. Any object with ``predict``, ``vjp``,
``params`` and ``chunk_shape`` can stand in for it.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import CorruptFile, NonFiniteLoss, SchemaMismatch, ShapeMismatch

CHECKPOINT_SCHEMA_VERSION = 1
SAMPLE_CLAMP = 1.1
# channel widths of the full-scale U-Net this network stands in for; stored, never used
UNET_CHANNELS = (256, 512, 1024)


# ---------------------------------------------------------------------------
# schedule and forward process
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    kind: str
    betas: np.ndarray
    alpha_bars: np.ndarray
    eval_steps: int = 16

    def alpha_bar(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep outside [1, {self.T}]")
        return self.alpha_bars[t - 1]


def _cosine_betas(T, s=0.008, max_beta=0.999):
    f = lambda t: np.cos((t / T + s) / (1 + s) * np.pi / 2) ** 2  # noqa: E731
    t = np.arange(1, T + 1, dtype=float)
    return np.minimum(1.0 - f(t) / f(t - 1), max_beta)


def _linear_betas(T, lo=1e-4, hi=0.02):
    # rescaled so that any T spans the same noise range as the 1000-step original
    scale = 1000.0 / T
    return np.minimum(np.linspace(lo * scale, hi * scale, T), 0.999)


def make_schedule(T: int = 100, kind: str = "cosine", eval_steps: int = 16) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    if kind == "cosine":
        betas = _cosine_betas(T)
    elif kind == "linear":
        betas = _linear_betas(T)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bars = np.cumprod(1.0 - betas)
    for a in (betas, alpha_bars):
        a.setflags(write=False)
    return NoiseSchedule(T, kind, betas, alpha_bars, min(eval_steps, T))


def add_noise(a0, t, eps, schedule: NoiseSchedule):
    """a_t = sqrt(ab_t) a0 + sqrt(1 - ab_t) eps; t is a scalar or one step per batch item."""
    a0, eps = np.asarray(a0), np.asarray(eps)
    if a0.shape != eps.shape:
        raise ShapeMismatch(f"noise shape {eps.shape} != chunk shape {a0.shape}")
    ab = schedule.alpha_bar(t)
    if np.ndim(ab):
        ab = ab.reshape(ab.shape + (1,) * (a0.ndim - ab.ndim))
    return np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# denoisers
# ---------------------------------------------------------------------------

def timestep_embedding(t, dim):
    """Sinusoidal features [sin(t w_k) | cos(t w_k)], w_k = 10000^(-k / (dim/2))."""
    half = dim // 2
    w = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = np.asarray(t, dtype=float)[:, None] * w[None, :]
    out = np.concatenate([np.sin(arg), np.cos(arg)], axis=1)
    if dim % 2:
        out = np.concatenate([out, np.zeros((len(out), 1))], axis=1)
    return out


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class MLPDenoiser:
    """eps_hat = W3 silu(W2 silu(W1 [x | temb(t) | cond] + b1) + b2) + b3.

    All weights live in one flat vector; ``predict`` and ``vjp`` take an
    optional replacement vector so the optimiser can own the parameters.

    With ``skip=True`` a timestep-gated identity path is added,
    ``eps_hat += x * ([temb(t) | 1] @ Ws)``, with ``Ws`` (zero at init) stored
    after ``b3``. A 256-wide bottleneck cannot carry a 1248-value noisy chunk,
    and most of the epsilon target at large t is the input itself; the skip
    plays the part of the U-Net's skip connections.
    """

    def __init__(self, x_dim: int, cond_dim: int, width: int = 256, temb_dim: int = 32,
                 chunk_shape: Optional[Tuple[int, ...]] = None, seed: int = 0, dtype=np.float32,
                 skip: bool = False):
        self.x_dim, self.cond_dim, self.width, self.temb_dim = int(x_dim), int(cond_dim), int(width), int(temb_dim)
        self.chunk_shape = tuple(chunk_shape) if chunk_shape is not None else (self.x_dim,)
        if int(np.prod(self.chunk_shape)) != self.x_dim:
            raise ShapeMismatch(f"chunk shape {self.chunk_shape} does not hold {self.x_dim} values")
        self.dtype = np.dtype(dtype)
        d_in = self.x_dim + self.temb_dim + self.cond_dim
        self.skip = bool(skip)
        self._shapes = [(d_in, width), (width,), (width, width), (width,), (width, self.x_dim), (self.x_dim,)]
        if self.skip:
            self._shapes.append((self.temb_dim + 1, self.x_dim))
        self._offsets = np.cumsum([0] + [int(np.prod(s)) for s in self._shapes])
        self.n_params = int(self._offsets[-1])
        rng = np.random.default_rng(seed)
        p = np.zeros(self.n_params)
        for k in (0, 2, 4):
            fan_in = self._shapes[k][0]
            p[self._offsets[k]:self._offsets[k + 1]] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), self._offsets[k + 1] - self._offsets[k])
        self.params = p.astype(self.dtype)

    def config(self):
        return {"x_dim": self.x_dim, "cond_dim": self.cond_dim, "width": self.width, "temb_dim": self.temb_dim,
                "chunk_shape": list(self.chunk_shape), "dtype": self.dtype.str, "skip": self.skip}

    def _unpack(self, params):
        return [params[a:b].reshape(s) for a, b, s in zip(self._offsets[:-1], self._offsets[1:], self._shapes)]

    def _forward(self, x, t, cond, params):
        params = self.params if params is None else np.asarray(params)
        if params.shape != (self.n_params,):
            raise ShapeMismatch(f"expected {self.n_params} parameters, got {params.shape}")
        x = np.asarray(x, dtype=self.dtype)
        b = x.shape[0]
        if x.shape[1:] != self.chunk_shape:
            raise ShapeMismatch(f"chunk shape {x.shape[1:]} != {self.chunk_shape}")
        cond = np.asarray(cond, dtype=self.dtype).reshape(b, -1)
        if cond.shape[1] != self.cond_dim:
            raise ShapeMismatch(f"condition width {cond.shape[1]} != {self.cond_dim}")
        t = np.broadcast_to(np.asarray(t), (b,))
        inp = np.concatenate([x.reshape(b, -1), timestep_embedding(t, self.temb_dim).astype(self.dtype), cond], axis=1)
        w1, b1, w2, b2, w3, b3, *ws = self._unpack(params.astype(self.dtype, copy=False))
        z1 = inp @ w1 + b1
        h1 = z1 * _sigmoid(z1)
        z2 = h1 @ w2 + b2
        h2 = z2 * _sigmoid(z2)
        out = h2 @ w3 + b3
        gate = None
        if self.skip:
            gate = np.concatenate([inp[:, self.x_dim:self.x_dim + self.temb_dim], np.ones((b, 1), self.dtype)], axis=1)
            out = out + inp[:, :self.x_dim] * (gate @ ws[0])
        return out.reshape(x.shape), (inp, z1, h1, z2, h2, w2, w3, gate)

    def predict(self, x, t, cond, params=None):
        return self._forward(x, t, cond, params)[0]

    def vjp(self, x, t, cond, g_out, params=None):
        """Output and d<g_out, eps_hat>/d params as a flat vector."""
        out, (inp, z1, h1, z2, h2, w2, w3, gate) = self._forward(x, t, cond, params)
        g = np.asarray(g_out, dtype=self.dtype).reshape(len(inp), -1)
        gw3 = h2.T @ g
        gb3 = g.sum(axis=0)
        s2 = _sigmoid(z2)
        gz2 = (g @ w3.T) * s2 * (1.0 + z2 * (1.0 - s2))
        gw2 = h1.T @ gz2
        gb2 = gz2.sum(axis=0)
        s1 = _sigmoid(z1)
        gz1 = (gz2 @ w2.T) * s1 * (1.0 + z1 * (1.0 - s1))
        gw1 = inp.T @ gz1
        gb1 = gz1.sum(axis=0)
        parts = [gw1, gb1, gw2, gb2, gw3, gb3]
        if self.skip:
            parts.append(gate.T @ (g * inp[:, :self.x_dim]))
        grad = np.concatenate([a.ravel() for a in parts])
        return out, grad


class PointMassDenoiser:
    """Exact noise predictor when every training chunk equals ``a_star``."""

    def __init__(self, a_star, schedule: NoiseSchedule):
        self.a_star = np.asarray(a_star, dtype=float)
        self.chunk_shape = self.a_star.shape
        self.schedule = schedule
        self.params = np.zeros(0)
        self.n_params = 0

    def predict(self, x, t, cond, params=None):
        x = np.asarray(x, dtype=float)
        ab = self.schedule.alpha_bar(np.broadcast_to(np.asarray(t), (x.shape[0],)))
        ab = ab.reshape((-1,) + (1,) * (x.ndim - 1))
        return (x - np.sqrt(ab) * self.a_star) / np.sqrt(1.0 - ab)

    def vjp(self, x, t, cond, g_out, params=None):
        return self.predict(x, t, cond), np.zeros(0)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def diffusion_loss(denoiser, params, x0, cond, t, eps, schedule: NoiseSchedule):
    """mean_b ||eps_b - eps_hat_b||^2 for fixed t and eps, with its parameter gradient."""
    x0 = np.asarray(x0)
    b = len(x0)
    if b == 0:
        raise ValueError("empty batch")
    xt = add_noise(x0, t, eps, schedule)
    pred = denoiser.predict(xt, t, cond, params)
    resid = np.asarray(eps, dtype=pred.dtype) - pred
    loss = float(np.sum(resid.reshape(b, -1) ** 2, axis=1).mean())
    _, grad = denoiser.vjp(xt, t, cond, (-2.0 / b) * resid, params)
    return loss, grad


def loss_and_grad(denoiser, x0, cond, schedule: NoiseSchedule, rng, params=None):
    """Draw t ~ U{1..T} and eps ~ N(0, I) per item from ``rng`` and evaluate the loss."""
    x0 = np.asarray(x0)
    params = denoiser.params if params is None else params
    t = rng.integers(1, schedule.T + 1, size=len(x0))
    eps = rng.standard_normal(x0.shape).astype(x0.dtype if x0.dtype.kind == "f" else float)
    with np.errstate(over="ignore", invalid="ignore"):  # overflow is reported below as NonFiniteLoss
        loss, grad = diffusion_loss(denoiser, params, x0, cond, t, eps, schedule)
    if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NonFiniteLoss(f"non-finite loss {loss}")
    return loss, grad


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 3e-4
    warmup_steps: int = 2000
    total_steps: int = 5000
    betas: Tuple[float, float] = (0.95, 0.999)
    weight_decay: float = 1e-6
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.total_steps < 1 or self.warmup_steps < 0 or self.base_lr < 0:
            raise ValueError("invalid training schedule")


@dataclass
class TrainState:
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    seed: int = 0


def init_train_state(params, seed: int = 0) -> TrainState:
    p = np.array(params, copy=True)
    return TrainState(p, np.zeros_like(p), np.zeros_like(p), 0, int(seed))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at ``total_steps``."""
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    progress = min(max((step - cfg.warmup_steps) / span, 0.0), 1.0)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_update(state: TrainState, grad, cfg: TrainConfig) -> TrainState:
    """One decoupled-weight-decay Adam step at lr_at(state.step); returns a new state."""
    lr = lr_at(state.step, cfg)
    b1, b2 = cfg.betas
    k = state.step + 1
    g = np.asarray(grad, dtype=state.params.dtype)
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1**k)
    v_hat = v / (1.0 - b2**k)
    p = state.params * (1.0 - lr * cfg.weight_decay)
    p = p - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return replace(state, params=p, m=m, v=v, step=k)


def train_step(state: TrainState, denoiser, x0, cond, schedule: NoiseSchedule, cfg: TrainConfig):
    """Loss and gradient with rng seeded by (seed, step), then one AdamW update."""
    rng = np.random.default_rng([state.seed & 0xFFFFFFFF, state.step])
    loss, grad = loss_and_grad(denoiser, x0, cond, schedule, rng, params=state.params)
    return adamw_update(state, grad, cfg), loss


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly spaced, rounded, strictly increasing subset of 1..T that includes both ends."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    return np.rint(np.linspace(1, T, steps)).astype(int)


def sample_chunk(denoiser, cond, schedule: NoiseSchedule, steps: Optional[int] = None, seed: int = 0,
                 params=None, clamp: float = SAMPLE_CLAMP, noise=None):
    """Deterministic DDIM (eta = 0) from seeded Gaussian noise.

    The predicted clean chunk is clamped to [-clamp, clamp] at every step:
    near t = T, alpha_bar is ~1e-7 and an unclamped reconstruction magnifies
    small noise-prediction errors by orders of magnitude. The last step lands
    on that prediction, so the output obeys the same bound.

    ``cond`` is one condition vector (returns one chunk) or a (B, C) batch.
    ``noise`` replaces the seeded starting sample (shape (B, *chunk_shape)),
    which lets callers give every batch item its own generator.
    """
    steps = schedule.eval_steps if steps is None else steps
    ts = sample_timesteps(schedule.T, steps)[::-1]
    cond = np.asarray(cond)
    single = cond.ndim == 1
    cond = cond[None] if single else cond
    b = len(cond)
    shape = tuple(denoiser.chunk_shape)
    if noise is None:
        x = np.random.default_rng(seed).standard_normal((b, int(np.prod(shape))))
    else:
        x = np.asarray(noise, dtype=float).reshape(b, -1)
        if x.shape[1] != int(np.prod(shape)):
            raise ShapeMismatch(f"noise does not match chunk shape {shape}")
    for i, t in enumerate(ts):
        ab = float(schedule.alpha_bars[t - 1])
        ab_prev = float(schedule.alpha_bars[ts[i + 1] - 1]) if i + 1 < len(ts) else 1.0
        e = np.asarray(denoiser.predict(x.reshape((b,) + shape), np.full(b, t), cond, params), dtype=float)
        e = e.reshape(b, -1)
        x0 = np.clip((x - math.sqrt(1.0 - ab) * e) / math.sqrt(ab), -clamp, clamp)
        x = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * e
    out = np.clip(x.reshape((b,) + shape), -clamp, clamp)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(path, denoiser: MLPDenoiser, state: TrainState, schedule: NoiseSchedule, cfg: TrainConfig,
                    extra=None):
    """manifest.json + params.bin (<f4) + optimizer.bin (m then v, <f4)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n = denoiser.n_params
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": "checkpoint",
        "architecture": {**denoiser.config(), "n_params": n, "unet_channels_reference": list(UNET_CHANNELS)},
        "schedule": {"T": schedule.T, "kind": schedule.kind, "eval_steps": schedule.eval_steps},
        "train": {"step": state.step, "seed": state.seed, "config": asdict(cfg)},
        "extra": extra or {},
    }
    _atomic_write(path / "params.bin", np.asarray(state.params, dtype="<f4").tobytes())
    _atomic_write(path / "optimizer.bin", np.concatenate([state.m, state.v]).astype("<f4").tobytes())
    _atomic_write(path / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())


def load_checkpoint(path):
    """Returns (denoiser, state, schedule, config, extra); training resumes bit-identically."""
    path = Path(path)
    try:
        m = json.loads((path / "manifest.json").read_text())
        params_raw = (path / "params.bin").read_bytes()
        opt_raw = (path / "optimizer.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"unreadable checkpoint: {exc}") from exc
    if m.get("schema_version") != CHECKPOINT_SCHEMA_VERSION or m.get("kind") != "checkpoint":
        raise SchemaMismatch(f"checkpoint schema {m.get('schema_version')} != {CHECKPOINT_SCHEMA_VERSION}")
    arch = dict(m["architecture"])
    n = arch.pop("n_params")
    arch.pop("unet_channels_reference", None)
    if len(params_raw) != 4 * n or len(opt_raw) != 8 * n:
        raise CorruptFile("checkpoint payload size disagrees with the parameter count")
    net = MLPDenoiser(arch["x_dim"], arch["cond_dim"], arch["width"], arch["temb_dim"], tuple(arch["chunk_shape"]),
                      dtype=np.float32, skip=arch.get("skip", False))
    if net.n_params != n:
        raise SchemaMismatch("architecture does not reproduce the stored parameter count")
    params = np.frombuffer(params_raw, dtype="<f4").astype(np.float32)
    opt = np.frombuffer(opt_raw, dtype="<f4").astype(np.float32)
    net.params = params.copy()
    state = TrainState(params, opt[:n].copy(), opt[n:].copy(), m["train"]["step"], m["train"]["seed"])
    sch = m["schedule"]
    schedule = make_schedule(sch["T"], sch["kind"], sch["eval_steps"])
    return net, state, schedule, TrainConfig(**m["train"]["config"]), m["extra"]
