"""Command-line entry point: synth | process | build | sample | train | eval | stats.

Exit codes
    0  success
    1  any other package error
    2  configuration error (bad TOML, unknown key, out-of-range value, bad flags)
    3  empty data (no episode survives processing, no dataset to build or train on)
    4  non-finite training loss
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .capture import CameraIntrinsics, MarkerCube
from .config import load_config
from .dataset import (
    CoTrainSampler,
    DatasetStats,
    SamplerConfig,
    batch_counts,
    build_dataset,
    fit_dataset_stats,
    load_dataset,
    save_dataset,
)
from .diffusion import (
    MLPDenoiser,
    PointMassDenoiser,
    TrainConfig,
    init_train_state,
    load_checkpoint,
    loss_and_grad,
    make_schedule,
    sample_chunk,
    save_checkpoint,
    train_step,
)
from .episode import Embodiment, load_processed_episode, load_raw_episode, save_processed_episode, save_raw_episode
from .errors import ConfigError, DexError, EmptyDataset, EmptyEpisode, NonFiniteLoss
from .pipeline import STAGES, FilterRules, ProcessConfig, denormalize, normalize_apply, process_episode
from .retarget import load_hand_model, reference_hand
from .toyenv import EnvConfig, ToyReachEnv, chunk_to_deltas, make_demo_episode

log = logging.getLogger("dexcotrain")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_EMPTY, EXIT_NONFINITE = 0, 1, 2, 3, 4

_SYNTH_MARKER = "synth.json"
_PROCESS_MARKER = "filter_summary.json"
_TAGS = {Embodiment.ROBOT: 1, Embodiment.HUMAN: 2}


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


class Context:
    def __init__(self, cfg: dict, out: Path, workers: int):
        self.cfg, self.out, self.workers = cfg, Path(out), max(1, int(workers))
        self.seed = int(cfg["seed"])

    def path(self, name) -> Path:
        p = Path(self.cfg["paths"][name])
        return p if p.is_absolute() else self.out / p

    def camera(self):
        return CameraIntrinsics(**self.cfg["capture"]["camera"])

    def cube(self):
        c = self.cfg["capture"]
        return MarkerCube.standard(edge=c["cube_edge"], marker=c["marker_size"])

    def hand_model(self):
        path = self.cfg["capture"]["hand_model"]
        return load_hand_model(path) if path else reference_hand()

    def env_config(self):
        return EnvConfig(**self.cfg["env"])


def _fresh_dir(path: Path, marker: str):
    """Empty a directory this tool wrote before (identified by ``marker``); refuse foreign ones."""
    if path.exists() and any(path.iterdir()):
        if not (path / marker).exists():
            raise ConfigError(f"{path} is not empty and was not written by this command")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(ctx: Context) -> int:
    s = ctx.cfg["synth"]
    raw_dir = ctx.path("raw")
    _fresh_dir(raw_dir, _SYNTH_MARKER)
    defects = {(d["embodiment"], d["index"]): d["kind"] for d in s["defects"]}
    env_cfg, cube, cam, model = ctx.env_config(), ctx.cube(), ctx.camera(), ctx.hand_model()
    records = []
    for emb, count in ((Embodiment.ROBOT, s["n_robot"]), (Embodiment.HUMAN, s["n_human"])):
        for k in range(count):
            ep_id = f"{emb.value}_{k:04d}"
            seed = _seed(ctx.seed, _TAGS[emb], k)
            defect = defects.get((emb.value, k))
            raw = make_demo_episode(env_cfg, seed, emb, cube, cam, model, noise_px=s["noise_px"],
                                    dropout=s["dropout"], episode_id=ep_id, defect=defect)
            save_raw_episode(raw, raw_dir / ep_id)
            records.append({"id": ep_id, "embodiment": emb.value, "seed": seed, "defect": defect,
                            "target": raw.ground_truth["target"]})
    _write_json(raw_dir / _SYNTH_MARKER, {"seed": ctx.seed, "synth": s, "env": ctx.cfg["env"], "episodes": records})
    print(f"synth: robot={s['n_robot']} human={s['n_human']} -> {raw_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# process
# ---------------------------------------------------------------------------

def _process_config(cfg) -> ProcessConfig:
    p = cfg["process"]
    rules = FilterRules(min_track_ratio=p["min_track_ratio"], min_frames=p["min_frames"], jump_max=p["jump_max"])
    return ProcessConfig(
        rules=rules, max_gap=p["max_gap"], clip_lo_pct=p["clip_lo_pct"], clip_hi_pct=p["clip_hi_pct"],
        smooth_sigma=p["smooth_sigma"], reject_rms=p["reject_rms"],
        ik={"damping": p["ik_damping"], "max_iters": p["ik_max_iters"], "tol": p["ik_tol"]},
    )


def _process_one(args):
    """Worker: one raw episode directory -> (episode id, reports, processed pieces, error)."""
    path, cfg = args
    ctx = Context(cfg, Path("."), 1)
    ep_id = Path(path).name
    try:
        raw = load_raw_episode(path)
        out = process_episode(raw, _process_config(cfg), ctx.cube(), ctx.camera(), ctx.hand_model())
        return ep_id, [r.to_dict() for r in out.reports], out.episodes, None
    except DexError as exc:
        return ep_id, [], [], f"{type(exc).__name__}: {exc}"


def cmd_process(ctx: Context) -> int:
    raw_dir, proc_dir = ctx.path("raw"), ctx.path("processed")
    paths = sorted(str(p.parent) for p in raw_dir.glob("*/manifest.json"))
    if not paths:
        raise EmptyDataset(f"no raw episodes under {raw_dir}")
    jobs = [(p, ctx.cfg) for p in paths]
    if ctx.workers > 1:
        with ProcessPoolExecutor(max_workers=ctx.workers) as pool:
            results = list(pool.map(_process_one, jobs))
    else:
        results = [_process_one(j) for j in jobs]
    _fresh_dir(proc_dir, _PROCESS_MARKER)
    summary, kept = {}, 0
    for ep_id, reports, episodes, error in sorted(results, key=lambda r: r[0]):
        pieces = []
        for ep in episodes:
            if list(ep.stages) != list(STAGES):
                raise DexError(f"{ep.episode_id}: stage order {ep.stages} != {list(STAGES)}")
            save_processed_episode(ep, proc_dir / ep.episode_id)
            pieces.append({"id": ep.episode_id, "embodiment": ep.embodiment.value, "n_frames": ep.n_frames,
                           "stages": list(ep.stages)})
        kept += bool(pieces)
        summary[ep_id] = {"reports": reports, "kept": pieces, "error": error}
        log.info("%s: %s", ep_id, "kept" if pieces else (error or [r["reasons"] for r in reports]))
    _write_json(proc_dir / _PROCESS_MARKER, {"stage_order": list(STAGES), "episodes": summary})
    print(f"process: kept {kept}/{len(results)} episodes")
    if kept == 0:
        raise EmptyEpisode("no episode survived processing")
    return EXIT_OK


def _load_processed(ctx: Context):
    proc_dir = ctx.path("processed")
    try:
        summary = json.loads((proc_dir / _PROCESS_MARKER).read_text())
    except OSError as exc:
        raise EmptyDataset(f"no processing summary under {proc_dir}") from exc
    eps = []
    for ep_id in sorted(summary["episodes"]):
        for piece in summary["episodes"][ep_id]["kept"]:
            eps.append(load_processed_episode(proc_dir / piece["id"]))
    return eps


# ---------------------------------------------------------------------------
# build / sample
# ---------------------------------------------------------------------------

def cmd_build(ctx: Context) -> int:
    d = ctx.cfg["dataset"]
    n, H, step = d["chunk_size"], d["horizon"], d["step"]
    eps = _load_processed(ctx)
    ds_dir = ctx.path("datasets")
    built = {}
    for emb in (Embodiment.ROBOT, Embodiment.HUMAN):
        group = [e for e in eps if e.embodiment is emb and e.n_frames >= H + n + 1]
        if not group:
            continue
        stats = fit_dataset_stats(group, emb, d["norm_lo_pct"], d["norm_hi_pct"])
        ds = build_dataset(group, emb, n, H, step, stats=stats)
        target = ds_dir / emb.value
        if target.exists():
            shutil.rmtree(target)
        save_dataset(ds, target)
        built[emb.value] = len(ds)
    if not built:
        raise EmptyDataset("no processed episode is long enough for a transition")
    print("build: " + " ".join(f"{k}={v}" for k, v in built.items()) + " transitions")
    return EXIT_OK


def _open_datasets(ctx: Context, need_robot: bool, need_human: bool):
    out = []
    for emb, needed in ((Embodiment.ROBOT, need_robot), (Embodiment.HUMAN, need_human)):
        path = ctx.path("datasets") / emb.value
        if (path / "manifest.json").exists():
            out.append(load_dataset(path))
        elif needed:
            raise EmptyDataset(f"no {emb.value} dataset under {path.parent}")
        else:
            out.append(None)
    return out


def _sampler(ctx: Context):
    s = ctx.cfg["sampler"]
    cfg = SamplerConfig(s["w_r"], s["w_h"], s["batch_size"], ctx.seed)
    nr, nh = batch_counts(cfg)
    d_r, d_h = _open_datasets(ctx, nr > 0, nh > 0)
    return CoTrainSampler(d_r, d_h, cfg), d_r, d_h


def batch_digest(batch) -> str:
    h = hashlib.sha256()
    for a in (batch.cond, batch.chunk, batch.is_robot, batch.index):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def cmd_sample(ctx: Context) -> int:
    sampler, _, _ = _sampler(ctx)
    batch = sampler.sample_batch()
    n_r = int(batch.is_robot.sum())
    print(f"robot={n_r} human={len(batch.is_robot) - n_r}")
    print(f"digest={batch_digest(batch)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _train_config(t) -> TrainConfig:
    return TrainConfig(base_lr=t["base_lr"], warmup_steps=t["warmup_steps"], total_steps=max(t["steps"], 1),
                       betas=tuple(t["betas"]), weight_decay=t["weight_decay"])


def _eval_batch(ctx: Context, d_r, d_h):
    """Fixed held-out-style batch (same mix as training) for before/after loss measurement."""
    s = ctx.cfg["sampler"]
    nr, nh = batch_counts(SamplerConfig(s["w_r"], s["w_h"], ctx.cfg["train"]["eval_batch"], ctx.seed))
    rng = np.random.default_rng([ctx.seed & 0xFFFFFFFF, 0xEB])
    cond, chunk = [], []
    for ds, k in ((d_r, nr), (d_h, nh)):
        if k and ds is not None and len(ds):
            idx = np.sort(rng.choice(len(ds), size=min(k, len(ds)), replace=False))
            cond.append(ds.condition(idx))
            chunk.append(ds.chunk(idx))
    return np.concatenate(cond), np.concatenate(chunk)


def _eval_loss(net, params, batch, schedule, seed):
    return loss_and_grad(net, batch[1], batch[0], schedule, np.random.default_rng([seed & 0xFFFFFFFF, 0xEB, 1]),
                         params=params)[0]


def _latest_checkpoint(ck_dir: Path):
    found = sorted(ck_dir.glob("step_*/manifest.json"))
    return found[-1].parent if found else None


def cmd_train(ctx: Context) -> int:
    t = ctx.cfg["train"]
    sampler, d_r, d_h = _sampler(ctx)
    ref = d_r if d_r is not None else d_h
    schedule = make_schedule(t["diffusion_steps"], t["schedule"], t["eval_diffusion_steps"])
    tcfg = _train_config(t)
    n, a = ref.chunk_size, ref.action_dim
    net = MLPDenoiser(n * a, ref.cond_dim, t["width"], t["temb_dim"], (n, a), seed=ctx.seed, skip=t["skip"])
    state = init_train_state(net.params, ctx.seed)
    ck_dir = ctx.path("checkpoints")
    meta = {
        "stats": ref.stats.to_dict(), "embodiment": ref.embodiment.value, "horizon": ref.horizon,
        "step": ref.step, "chunk_size": n, "action_dim": a, "sampler_weights": [sampler.cfg.w_r, sampler.cfg.w_h],
    }
    eval_batch = _eval_batch(ctx, d_r, d_h)
    latest = _latest_checkpoint(ck_dir)
    if latest is not None:
        net_l, state_l, _, cfg_l, extra = load_checkpoint(latest)
        if cfg_l != tcfg or extra.get("meta") != meta or net_l.config() != net.config():
            raise ConfigError(f"checkpoint {latest} was trained with a different configuration")
        net, state = net_l, state_l
        sampler.restore(extra["sampler"])
        initial = extra["initial_eval_loss"]
        log.info("resuming from %s (step %d)", latest, state.step)
    else:
        initial = _eval_loss(net, state.params, eval_batch, schedule, ctx.seed)
    losses = []
    try:
        while state.step < t["steps"]:
            batch = sampler.sample_batch()
            state, loss = train_step(state, net, batch.chunk, batch.cond, schedule, tcfg)
            losses.append(loss)
            if state.step % t["checkpoint_every"] == 0 or state.step == t["steps"]:
                extra = {"sampler": sampler.state(), "meta": meta, "initial_eval_loss": initial}
                save_checkpoint(ck_dir / f"step_{state.step:07d}", net, state, schedule, tcfg, extra)
                log.info("step %d loss %.5f", state.step, loss)
    except NonFiniteLoss:
        log.error("non-finite loss at step %d", state.step)
        raise
    final = _eval_loss(net, state.params, eval_batch, schedule, ctx.seed)
    summary = {"steps": state.step, "initial_eval_loss": initial, "final_eval_loss": final,
               "train_losses_every_100": losses[::100], "sampler_weights": meta["sampler_weights"]}
    _write_json(ck_dir / "train_summary.json", summary)
    print(f"train: step={state.step} eval_loss {initial:.4f} -> {final:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def condition_vector(env: ToyReachEnv, stats: DatasetStats, horizon: int, step: int):
    """The dataset's condition row for the env's current frame: [normalised history | embeddings]."""
    hist = env.state_history(horizon, step).reshape(-1, 9)
    state = normalize_apply(hist, stats.state).ravel()
    return np.concatenate([state, env.embedding().ravel()]).astype(np.float32)


def run_eval(ctx: Context):
    """Roll out every evaluation episode; returns the per-episode final distances and successes."""
    e = ctx.cfg["eval"]
    env_cfg = ctx.env_config()
    envs = [ToyReachEnv(env_cfg, _seed(ctx.seed, 0xE7, k)) for k in range(e["episodes"])]
    if e["policy"] == "checkpoint":
        latest = _latest_checkpoint(ctx.path("checkpoints"))
        if latest is None:
            raise EmptyDataset(f"no checkpoint under {ctx.path('checkpoints')}")
        net, state, schedule, _, extra = load_checkpoint(latest)
        meta = extra["meta"]
        stats = DatasetStats.from_dict(meta["stats"])
        params = state.params
    else:
        (d_r,) = _open_datasets(ctx, True, False)[:1]
        meta = {"horizon": d_r.horizon, "step": d_r.step, "chunk_size": d_r.chunk_size, "action_dim": d_r.action_dim}
        stats = d_r.stats
        t = ctx.cfg["train"]
        schedule = make_schedule(t["diffusion_steps"], t["schedule"], t["eval_diffusion_steps"])
        model = ctx.hand_model()
    n, a = meta["chunk_size"], meta["action_dim"]
    horizon = e["exec_horizon"]
    replan = 0
    while not envs[0].done:
        cond = np.stack([condition_vector(env, stats, meta["horizon"], meta["step"]) for env in envs])
        noise = np.stack([np.random.default_rng([ctx.seed & 0xFFFFFFFF, k, replan]).standard_normal((n, a))
                          for k in range(len(envs))])
        if e["policy"] == "checkpoint":
            chunks = sample_chunk(net, cond, schedule, params=params, noise=noise)
        else:
            chunks = []
            for k, env in enumerate(envs):
                target = normalize_apply(env.expert_actions(n, model), stats.action)
                oracle = PointMassDenoiser(target, schedule)
                chunks.append(sample_chunk(oracle, cond[k:k + 1], schedule, noise=noise[k:k + 1])[0])
            chunks = np.stack(chunks)
        for env, chunk in zip(envs, chunks):
            deltas = chunk_to_deltas(denormalize(chunk, stats.action), env_cfg)
            for d in deltas[:horizon]:
                if env.done:
                    break
                env.step(d)
        replan += 1
    return [env.distance() for env in envs], [env.success() for env in envs]


def cmd_eval(ctx: Context) -> int:
    dist, ok = run_eval(ctx)
    result = {"policy": ctx.cfg["eval"]["policy"], "episodes": len(ok), "success": int(sum(ok)),
              "rate": sum(ok) / len(ok), "final_distances": dist, "exec_horizon": ctx.cfg["eval"]["exec_horizon"]}
    ctx.out.mkdir(parents=True, exist_ok=True)
    _write_json(ctx.out / "eval.json", result)
    print(f"eval: success={result['success']}/{result['episodes']} rate={result['rate']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------

def cmd_stats(ctx: Context) -> int:
    report = {}
    synth = ctx.path("raw") / _SYNTH_MARKER
    if synth.exists():
        recs = json.loads(synth.read_text())["episodes"]
        report["raw"] = {emb.value: sum(r["embodiment"] == emb.value for r in recs) for emb in Embodiment}
    proc = ctx.path("processed") / _PROCESS_MARKER
    if proc.exists():
        eps = json.loads(proc.read_text())["episodes"]
        reasons = {}
        for v in eps.values():
            for r in v["reports"]:
                for reason in r["reasons"]:
                    reasons[reason] = reasons.get(reason, 0) + 1
        report["processed"] = {"episodes": len(eps), "kept": sum(bool(v["kept"]) for v in eps.values()),
                               "errors": sum(v["error"] is not None for v in eps.values()), "reasons": reasons}
    for emb in Embodiment:
        m = ctx.path("datasets") / emb.value / "manifest.json"
        if m.exists():
            man = json.loads(m.read_text())
            report.setdefault("datasets", {})[emb.value] = {
                "transitions": man["n_rows"], "episodes": len(man["episodes"]), "stride": man["layout"]["stride"]}
    latest = _latest_checkpoint(ctx.path("checkpoints"))
    if latest is not None:
        report["checkpoint"] = {"path": str(latest), "step": json.loads((latest / "manifest.json").read_text())["train"]["step"]}
    if (ctx.out / "eval.json").exists():
        ev = json.loads((ctx.out / "eval.json").read_text())
        report["eval"] = {k: ev[k] for k in ("policy", "episodes", "success", "rate")}
    print(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth, "process": cmd_process, "build": cmd_build, "sample": cmd_sample,
    "train": cmd_train, "eval": cmd_eval, "stats": cmd_stats,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    p = _Parser(prog="dexcotrain", description="Synthetic human/robot co-training pipeline.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, default=None, help="TOML config file")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--workers", type=int, default=1, help="processes for per-episode work")
    p.add_argument("--out", type=Path, default=Path("out"), help="output root (relative paths resolve here)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        overrides = {} if args.seed is None else {"seed": args.seed}
        cfg = load_config(args.config, overrides)
        ctx = Context(cfg, args.out, args.workers)
        return COMMANDS[args.command](ctx)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EmptyDataset, EmptyEpisode) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except DexError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
