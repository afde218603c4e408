"""Command-line pipeline: data generation, the three training stages,
distillation, evaluation, serving, and deterministic replay.

Every command resolves its config, creates an output directory, writes the
resolved config beside the outputs, and emits line-delimited metrics.
Usage errors (unknown commands, unknown config keys) exit with status 2;
runtime failures exit 1 after writing a structured error record.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .config import RunConfig, dump_config, load_config
from .dataset import (
    FrameRecord,
    ShardEntry,
    build_sample_group,
    AugmentConfig,
    load_corpus,
    write_manifest,
    write_shard,
)
from .diffusion import (
    Trainer,
    ddim_sample,
    epsilon_mse,
    make_schedule,
    sample_timestep_biased,
)
from .distill import (
    DistillConfig,
    DMDState,
    TwoStepSchedule,
    build_regression_pairs,
    distill_loop,
    generator_sample,
)
from .errors import ConfigError, FrameworldError
from .evalmetrics import (
    AnchorCopyBaseline,
    DistilledSynthesizer,
    EvalReport,
    ReferenceCopyBaseline,
    TeacherSynthesizer,
    cross_view_consistency,
    measure_throughput,
    pose_following_error,
    psnr,
)
from .geometry import CameraIntrinsics
from .model import FrameDiT, conditions_from_samples, load_checkpoint, save_checkpoint
from .serve import DistilledFrameGenerator, ServerConfig, SessionManager, make_app, replay
from .synthscene import generate_scene, render_view, sample_trajectory


def make_intrinsics(resolution: int, fov_deg: float) -> CameraIntrinsics:
    f = 0.5 * resolution / math.tan(math.radians(fov_deg) / 2)
    c = (resolution - 1) / 2
    return CameraIntrinsics(fx=f, fy=f, cx=c, cy=c, width=resolution, height=resolution)


def _out_dir(cfg: RunConfig, command: str, out: str | None) -> Path:
    d = Path(out) if out else cfg.resolved_out_root() / cfg.run_name / command
    d.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, d / "resolved_config.yaml")
    return d


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out: str | None, log=print) -> Path:
    d = _out_dir(cfg, "gen-data", out)
    data = cfg.data
    K = make_intrinsics(data.resolution, data.fov_deg)
    entries = []
    aug = AugmentConfig(p_drop=data.p_drop, jitter_sigma=data.jitter_sigma)
    t0 = time.perf_counter()
    for i in range(data.n_sequences):
        seed = data.first_seed + i
        scene = generate_scene(seed)
        rng = np.random.default_rng(seed)
        traj_cfg = data.trajectory(i)
        poses = sample_trajectory(scene, rng, traj_cfg)
        frames = []
        for t_idx, pose in enumerate(poses):
            rgb, depth = render_view(scene, K, pose)
            frames.append(FrameRecord(rgb=rgb, depth=depth, K=K, pose=pose, time_index=t_idx))
        samples = build_sample_group(frames, rng, aug, sequence_id=seed)
        shard = d / f"seq_{seed}.wfds"
        write_shard(samples, shard)
        entries.append(
            ShardEntry(
                path=shard.name,
                n_samples=len(samples),
                sequence_id=seed,
                seed=seed,
                trajectory=asdict(traj_cfg),
            )
        )
        if log and (i + 1) % 25 == 0:
            log(f"gen-data {i + 1}/{data.n_sequences} sequences ({time.perf_counter() - t0:.1f}s)")
    write_manifest(entries, d / "manifest.json")
    if log:
        log(f"wrote {len(entries)} shards to {d}")
    return d


# ---------------------------------------------------------------------------
# train-stage1 (unconditional image prior)
# ---------------------------------------------------------------------------


def cmd_train_stage1(cfg: RunConfig, manifest: str, out: str | None, log=print) -> Path:
    d = _out_dir(cfg, "train-stage1", out)
    corpus = load_corpus(manifest)
    images = [s.x_tgt for s in corpus] + [s.x_ref for s in corpus]
    torch.manual_seed(cfg.seed)
    model = FrameDiT(cfg.model)
    schedule = make_schedule(cfg.model.timesteps)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    metrics_path = d / "metrics.jsonl"
    with open(metrics_path, "w") as sink:
        for step in range(cfg.stage1_steps):
            idx = rng.choice(len(images), size=min(cfg.train.batch_size, len(images)), replace=False)
            batch = np.stack([images[i] for i in idx]).astype(np.float32) / 255.0
            z0 = torch.from_numpy(batch).permute(0, 3, 1, 2) * 2 - 1
            t = torch.from_numpy(
                np.asarray(sample_timestep_biased(rng, cfg.train, schedule.T, size=len(idx)))
            ).long()
            g = torch.Generator().manual_seed(int(rng.integers(0, 2**63 - 1)))
            eps = torch.randn(z0.shape, generator=g)
            loss = epsilon_mse(model, z0, None, t, eps, schedule)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip)
            opt.step()
            if step % cfg.train.log_every == 0:
                rec = {"step": step, "loss": float(loss), "stage": 1}
                sink.write(json.dumps(rec) + "\n")
                if log:
                    log(f"stage1 step {step} loss {float(loss):.4f}")
    save_checkpoint(d / "stage1.pt", model, extra={"stage": 1})
    return d


# ---------------------------------------------------------------------------
# train-stage2 / finetune-synth (conditional)
# ---------------------------------------------------------------------------


def cmd_train_stage2(
    cfg: RunConfig, manifest: str, out: str | None, init: str | None = None, log=print
) -> Path:
    d = _out_dir(cfg, "train-stage2", out)
    corpus = load_corpus(manifest)
    torch.manual_seed(cfg.seed)
    model = FrameDiT(cfg.model)
    if init:
        loaded, _ = load_checkpoint(init)
        if loaded.cfg != cfg.model:
            raise ConfigError("stage1 checkpoint config differs from the run's model config")
        model.load_state_dict(loaded.state_dict())
    trainer = Trainer(model, cfg.train)
    trainer.fit(corpus, metrics_path=d / "metrics.jsonl", log=log)
    trainer.save(d / "stage2.pt", extra={"stage": 2})
    save_checkpoint(d / "stage2_ema.pt", trainer.ema_model(), extra={"stage": 2, "ema": True})
    return d


def cmd_finetune_synth(
    cfg: RunConfig, manifest: str, checkpoint: str, out: str | None, log=print
) -> Path:
    """Continue conditional training on freshly generated synthetic shards.

    The step count is hard-capped: prolonged synthetic-only continuation
    erodes the appearance prior, so the cap is enforced, not advisory.
    """
    if cfg.finetune.steps > cfg.finetune.max_steps_cap:
        raise ConfigError(
            f"finetune steps {cfg.finetune.steps} exceed the cap {cfg.finetune.max_steps_cap}"
        )
    d = _out_dir(cfg, "finetune-synth", out)
    corpus = load_corpus(manifest)
    model, extra = load_checkpoint(checkpoint)
    # Continuation keeps the steady-state anchor policy (no re-warmup).
    tcfg = replace(cfg.train, total_steps=cfg.finetune.steps, n_phase1=0, n_ramp=0)
    trainer = Trainer(model, tcfg)
    if isinstance(extra, dict) and "ema" in extra and isinstance(extra["ema"], dict):
        trainer.ema = {k: v.clone() for k, v in extra["ema"].items()}
    trainer.fit(corpus, steps=cfg.finetune.steps, metrics_path=d / "metrics.jsonl", log=log)
    trainer.save(d / "finetuned.pt", extra={"stage": "finetune"})
    save_checkpoint(d / "finetuned_ema.pt", trainer.ema_model(), extra={"stage": "finetune", "ema": True})
    return d


# ---------------------------------------------------------------------------
# distill
# ---------------------------------------------------------------------------


def run_distillation(
    teacher: FrameDiT,
    corpus,
    dcfg: DistillConfig,
    log=print,
):
    """Distill a teacher checkpoint on a condition corpus; returns the state."""
    conds = []
    for s in corpus:
        _, c = conditions_from_samples([s], teacher.cfg)
        conds.append(c)
    size = teacher.cfg.image_size
    schedule = make_schedule(teacher.cfg.timesteps)
    state = DMDState(teacher, dcfg, schedule=schedule)
    pairs = build_regression_pairs(
        teacher, conds, dcfg.reg_pairs, seed=dcfg.seed, schedule=schedule,
        latent_shape=(3, size, size), teacher_steps=dcfg.teacher_steps,
    )
    result = distill_loop(state, conds, (3, size, size), dcfg, pairs, log=log)
    return state, result


def distilled_vs_teacher_psnr(
    generator: FrameDiT,
    teacher: FrameDiT,
    samples,
    t_mid: int,
    n: int = 16,
    seed: int = 77,
    teacher_steps: int = 50,
) -> float:
    """Mean PSNR of few-step outputs against the teacher's multi-step outputs."""
    schedule = make_schedule(teacher.cfg.timesteps)
    two = TwoStepSchedule(schedule, t_mid)
    size = teacher.cfg.image_size
    from .codec import IdentityCodec

    codec = IdentityCodec()
    vals = []
    for i in range(min(n, len(samples))):
        _, cond = conditions_from_samples([samples[i]], teacher.cfg)
        g = torch.Generator().manual_seed(seed + i)
        init = torch.randn((1, 3, size, size), generator=g)
        bridge = torch.randn((1, 3, size, size), generator=g)
        with torch.no_grad():
            ref = codec.decode(
                ddim_sample(teacher, cond, teacher_steps, schedule, init, return_latent=True)
            )
            out = generator_sample(
                generator, cond, two, init, bridge_noise=bridge, codec=codec, return_latent=False
            )
        vals.append(psnr(out[0].permute(1, 2, 0).numpy(), ref[0].permute(1, 2, 0).numpy()))
    return float(np.mean(vals))


def cmd_distill(
    cfg: RunConfig,
    manifest: str,
    checkpoint: str,
    out: str | None,
    tmid_sweep: list[int] | None = None,
    log=print,
) -> Path:
    d = _out_dir(cfg, "distill", out)
    corpus = load_corpus(manifest)
    teacher, _ = load_checkpoint(checkpoint)
    teacher.eval()
    train_part = corpus[: max(len(corpus) - 24, 1)]
    held_out = corpus[-24:]

    t_mids = tmid_sweep if tmid_sweep is not None else [cfg.distill.t_mid]
    rows = []
    for t_mid in t_mids:
        dcfg = replace(cfg.distill, t_mid=t_mid)
        state, result = run_distillation(teacher, train_part, dcfg, log=log)
        val = distilled_vs_teacher_psnr(state.generator, teacher, held_out, t_mid)
        rows.append({"t_mid": t_mid, "psnr_vs_teacher": val, "aborted": result.aborted})
        ckpt = d / f"distilled_tmid{t_mid}.pt"
        save_checkpoint(ckpt, state.generator, extra={"t_mid": t_mid, "predicts": "x0"})
        if log:
            log(f"t_mid={t_mid}: psnr vs teacher {val:.2f} dB -> {ckpt.name}")
    report = d / "tmid_report.tsv"
    with open(report, "w") as f:
        f.write("t_mid\tpsnr_vs_teacher\taborted\n")
        for r in rows:
            f.write(f"{r['t_mid']}\t{r['psnr_vs_teacher']:.4f}\t{r['aborted']}\n")
    return d


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(
    cfg: RunConfig,
    checkpoint: str,
    out: str | None,
    distilled: str | None = None,
    n_scenes: int = 4,
    log=print,
) -> Path:
    d = _out_dir(cfg, "eval", out)
    teacher, _ = load_checkpoint(checkpoint)
    teacher.eval()
    K = make_intrinsics(cfg.data.resolution, cfg.data.fov_deg)
    metrics: dict[str, float] = {}

    synths = [TeacherSynthesizer(teacher), AnchorCopyBaseline(), ReferenceCopyBaseline()]
    gen = None
    if distilled:
        gen, extra = load_checkpoint(distilled)
        gen.predicts = extra.get("predicts", "x0")
        gen.eval()
        two = TwoStepSchedule(make_schedule(gen.cfg.timesteps), extra.get("t_mid", cfg.distill.t_mid))
        synths.append(DistilledSynthesizer(gen, two))

    per_synth: dict[str, list[float]] = {s.name: [] for s in synths}
    per_synth_holes: dict[str, list[float]] = {s.name: [] for s in synths}
    for i in range(n_scenes):
        seed = cfg.data.first_seed + 10_000 + i  # held-out seeds
        scene = generate_scene(seed)
        rng = np.random.default_rng(seed)
        poses = sample_trajectory(scene, rng, cfg.data.trajectory(i))
        for s in synths:
            rep = pose_following_error(s, scene, K, poses, sequence_id=seed)
            per_synth[s.name].append(rep.mean_psnr)
            if rep.mean_hole_psnr is not None:
                per_synth_holes[s.name].append(rep.mean_hole_psnr)
            if log:
                log(f"scene {seed}: {rep.summary()}")
    for name, vals in per_synth.items():
        metrics[f"psnr/{name}"] = float(np.mean(vals))
    for name, vals in per_synth_holes.items():
        if vals:
            metrics[f"psnr_holes/{name}"] = float(np.mean(vals))

    # Cross-view consistency on ground truth (upper bound reference).
    scene = generate_scene(cfg.data.first_seed + 10_000)
    rng = np.random.default_rng(0)
    poses = sample_trajectory(scene, rng, cfg.data.trajectory(0))
    rgb_a, depth_a = render_view(scene, K, poses[0])
    rgb_b, depth_b = render_view(scene, K, poses[1])
    metrics["consistency/ground_truth"] = cross_view_consistency(
        rgb_a, rgb_b, depth_a, K, poses[0], poses[1], depth_b
    )

    wallclock = None
    if gen is not None:
        mgr_cfg = ServerConfig(resolution=cfg.data.resolution)
        fgen = DistilledFrameGenerator(gen, t_mid=cfg.distill.t_mid)
        manager = SessionManager(fgen, mgr_cfg)
        session = manager.create(seed=1)
        pose = session.controller.pose()
        wallclock = measure_throughput(
            lambda: session.generate_frame(pose), cfg.data.resolution, n_frames=10
        )
        metrics["throughput/fps_2step"] = wallclock.fps

    report = EvalReport(
        metrics=metrics,
        provenance={"checkpoint": str(checkpoint), "distilled": str(distilled or "none"),
                    "scene_seeds": f"{cfg.data.first_seed + 10_000}..+{n_scenes}"},
        wallclock=wallclock,
    )
    (d / "eval_report.json").write_text(report.to_json())
    if log:
        log(report.to_json())
    return d


# ---------------------------------------------------------------------------
# serve / replay
# ---------------------------------------------------------------------------


def build_manager(cfg: RunConfig) -> SessionManager:
    sp = cfg.serve
    if not sp.checkpoint:
        raise ConfigError("serve requires serve.checkpoint pointing at a distilled model")
    gen_model, extra = load_checkpoint(sp.checkpoint)
    gen_model.predicts = extra.get("predicts", "x0")
    gen_model.eval()
    server_cfg = ServerConfig(
        resolution=sp.resolution,
        keyframe_threshold=sp.keyframe_threshold,
        keyframe_capacity=sp.keyframe_capacity,
        max_sessions=sp.max_sessions,
    )
    generator = DistilledFrameGenerator(gen_model, t_mid=extra.get("t_mid", sp.t_mid))
    return SessionManager(generator, server_cfg)


def cmd_serve(cfg: RunConfig, log=print) -> None:
    import uvicorn

    manager = build_manager(cfg)
    static = cfg.serve.static_dir or None
    app = make_app(manager, static_dir=static)
    if log:
        log(f"serving on {cfg.serve.host}:{cfg.serve.port}")
    uvicorn.run(app, host=cfg.serve.host, port=cfg.serve.port, log_level="warning")


def cmd_replay(cfg: RunConfig, script: str, seed: int, out: str | None, log=print) -> Path:
    d = _out_dir(cfg, "replay", out)
    actions = json.loads(Path(script).read_text())
    if not isinstance(actions, list):
        raise ConfigError("replay script must be a JSON list of action objects")
    manager = build_manager(cfg)
    result = replay(manager, seed=seed, actions=actions, out_dir=d)
    if log:
        log(f"replayed {result['n_frames']} frames, digest {result['digest'][:16]}..")
    return d


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frameworld", description=__doc__)
    p.add_argument("--config", help="YAML run config (defaults apply when omitted)")
    p.add_argument("--out", help="output directory override")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate synthetic training shards")

    s1 = sub.add_parser("train-stage1", help="unconditional image-prior pretraining")
    s1.add_argument("--manifest", required=True)

    s2 = sub.add_parser("train-stage2", help="conditional frame-model training")
    s2.add_argument("--manifest", required=True)
    s2.add_argument("--init", help="stage1 checkpoint to initialize from")

    ft = sub.add_parser("finetune-synth", help="capped continuation on fresh synthetic shards")
    ft.add_argument("--manifest", required=True)
    ft.add_argument("--checkpoint", required=True)

    di = sub.add_parser("distill", help="few-step distillation")
    di.add_argument("--manifest", required=True)
    di.add_argument("--checkpoint", required=True)
    di.add_argument("--tmid-sweep", help="comma-separated t_mid values")

    ev = sub.add_parser("eval", help="pose-following, baselines, consistency, throughput")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--distilled")
    ev.add_argument("--n-scenes", type=int, default=4)

    sub.add_parser("serve", help="run the interactive frame server")

    rp = sub.add_parser("replay", help="replay a recorded action script deterministically")
    rp.add_argument("--script", required=True)
    rp.add_argument("--seed", type=int, default=0)
    return p


def run_command(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(args.config)
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.out)
        elif args.command == "train-stage1":
            cmd_train_stage1(cfg, args.manifest, args.out)
        elif args.command == "train-stage2":
            cmd_train_stage2(cfg, args.manifest, args.out, init=args.init)
        elif args.command == "finetune-synth":
            cmd_finetune_synth(cfg, args.manifest, args.checkpoint, args.out)
        elif args.command == "distill":
            sweep = None
            if args.tmid_sweep:
                sweep = [int(x) for x in args.tmid_sweep.split(",")]
            cmd_distill(cfg, args.manifest, args.checkpoint, args.out, tmid_sweep=sweep)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.out, distilled=args.distilled, n_scenes=args.n_scenes)
        elif args.command == "serve":
            cmd_serve(cfg)
        elif args.command == "replay":
            cmd_replay(cfg, args.script, args.seed, args.out)
        else:  # pragma: no cover - argparse guards this
            parser.error(f"unknown command {args.command}")
        return 0
    except ConfigError as e:
        print(json.dumps({"error": "config", "msg": str(e)}), file=sys.stderr)
        return 2
    except FrameworldError as e:
        print(json.dumps({"error": type(e).__name__, "msg": str(e)}), file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - structured record for any failure
        print(json.dumps({"error": type(e).__name__, "msg": str(e)}), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
