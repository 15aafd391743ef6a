"""Command line interface: ``pidimt {gen-scenarios,train,sample,eval,check}``.

Every configuration key can be overridden with ``--key=value`` or
``--section.key=value``; ``DIMT_SEED`` sets the master seed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .backbone import ConfigError
from .checkpoint import LoadError
from .config import RunConfig, desk_config, load_config
from .model import scene_limits
from .scenarios import KINDS, load_scenarios, save_scenarios, scenario_pool
from .scene import EgoFrame, SceneError, collate, load_scene

log = logging.getLogger("pidimt")


def _overrides(extra: list[str]) -> dict[str, str]:
    out, i = {}, 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--"):
            raise ConfigError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            i += 1
            value = extra[i]
        else:
            raise ConfigError(f"{key}: missing value (use --{key}=VALUE)")
        out[key] = value
        i += 1
    return out


def _config(args, extra: list[str]) -> RunConfig:
    return load_config(args.config, _overrides(extra), desk_config() if args.desk else None)


def _sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, help="solver steps (default 10)")
    p.add_argument("--temperature", type=float, help="initial latent scale (default 0.5)")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["clean_signal", "scaled_noise"],
                   help="network output parameterisation (default: from checkpoint)")
    p.add_argument("--phnn", choices=["on", "off"])
    p.add_argument("--ph-steps", type=int)
    p.add_argument("--ph-anchor", type=int)
    p.add_argument("--ph-dt", type=float)
    p.add_argument("--ph-impulse", choices=["dt_scaled", "literal"])
    p.add_argument("--ph-per-step", choices=["on", "off"])


def _apply_sampler_flags(cfg: RunConfig, args) -> None:
    s = cfg.sample
    for name in ("steps", "temperature", "seed", "ph_steps", "ph_anchor", "ph_dt", "ph_impulse"):
        v = getattr(args, name)
        if v is not None:
            setattr(s, name, v)
    if args.phnn is not None:
        s.phnn = args.phnn == "on"
    if args.ph_per_step is not None:
        s.ph_per_step = args.ph_per_step == "on"
    if s.steps < 1:
        raise ConfigError("steps: must be >= 1")


# ------------------------------------------------------------------ commands


def cmd_gen_scenarios(args, cfg: RunConfig) -> int:
    n = args.n or cfg.train.n_scenarios
    seed = cfg.train.seed if args.seed is None else args.seed
    kinds = tuple(args.kinds.split(",")) if args.kinds else cfg.train.kinds
    pool = scenario_pool(n, seed, kinds, scene_limits(cfg.model), cfg.model.future)
    save_scenarios(pool, args.out)
    print(f"wrote {len(pool)} scenarios to {args.out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .training import train
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.mode is not None:
        cfg.train.mode = args.mode
    cfg.validate()
    scenarios = load_scenarios(args.scenarios) if args.scenarios else None
    trainer = train(cfg, args.out_dir, args.resume, scenarios)
    first, last = trainer.denoise_losses[:1], trainer.denoise_losses[-1:]
    summary = {"steps": trainer.step, "final_checkpoint": str(Path(args.out_dir) / "final.ckpt"),
               "first_denoise_loss": first[0] if first else None, "last_denoise_loss": last[0] if last else None}
    print(json.dumps(summary))
    return 0


def _load_scenes(args):
    if args.scene:
        return [load_scene(p) for p in args.scene]
    scenarios = load_scenarios(args.scenarios)
    if args.index:
        scenarios = [scenarios[i] for i in args.index]
    return [s.scene for s in scenarios]


def cmd_sample(args, cfg: RunConfig) -> int:
    from .planner import sample
    from .training import load_model
    model, run_cfg = load_model(args.checkpoint)
    _apply_sampler_flags(cfg, args)
    mode = args.mode or run_cfg.train.mode
    scenes = _load_scenes(args)
    batch, slots = collate(scenes, model.limits)
    traj = sample(model, batch, cfg.sample, mode).double().numpy()
    out = []
    for b, (scene, picked) in enumerate(zip(scenes, slots)):
        f = scene.ego.frames[-1]
        frame = EgoFrame(f[0], f[1], f[2], f[3])
        agents = [{"agent": "ego", "trajectory": traj[b, 0]}]
        agents += [{"agent": int(i), "trajectory": traj[b, 1 + k]} for k, i in enumerate(picked)]
        for a in agents:
            if args.frame == "world":
                a["trajectory"] = frame.states_to_world(a["trajectory"])
            a["trajectory"] = a["trajectory"].tolist()
        out.append({"frame": args.frame, "agents": agents})
    text = json.dumps({"mode": mode, "sample": asdict(cfg.sample), "scenes": out})
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(out)} sampled scene(s) to {args.out}")
    else:
        print(text)
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    from .evaluation import evaluate
    from .training import load_model
    _apply_sampler_flags(cfg, args)
    model, run_cfg = load_model(args.checkpoint, cfg.model if args.strict else None)
    if args.scenarios:
        scenarios = load_scenarios(args.scenarios)
    else:
        scenarios = scenario_pool(args.n, cfg.train.seed if args.pool_seed is None else args.pool_seed,
                                  tuple(args.kinds.split(",")) if args.kinds else KINDS,
                                  model.limits, model.cfg.future)
    report = evaluate(model, scenarios, cfg.sample, args.mode or run_cfg.train.mode)
    report.metadata["checkpoint"] = str(args.checkpoint)
    if args.report:
        report.to_json(args.report)
    if args.csv:
        report.to_csv(args.csv)
    print(report.to_text())
    return 0 if report.anchor_violations == 0 else 1


def cmd_check(args, cfg: RunConfig) -> int:
    from .checks import run_checks
    failed = 0
    for name, ok, detail, secs in run_checks(args.only or None):
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:<24} {detail}  ({secs:.2f}s)")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", help="plain-text key = value configuration file")
    common.add_argument("--desk", action="store_true", help="start from the reduced single-core configuration")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pidimt", allow_abbrev=False, description="Train, sample and evaluate the diffusion planner.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenarios", parents=[common], allow_abbrev=False, help="write a synthetic scenario pool as JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--kinds", help=f"comma separated subset of {','.join(KINDS)}")
    p.set_defaults(func=cmd_gen_scenarios)

    p = sub.add_parser("train", parents=[common], allow_abbrev=False, help="train on a scenario pool")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume")
    p.add_argument("--scenarios", help="scenario JSON (default: generate from the config)")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["clean_signal", "scaled_noise"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common], allow_abbrev=False, help="sample trajectories for scenes")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenarios")
    src.add_argument("--scene", nargs="+")
    p.add_argument("--index", type=int, nargs="*")
    p.add_argument("--frame", choices=["world", "ego"], default="world")
    p.add_argument("--out")
    _sampler_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", parents=[common], allow_abbrev=False, help="evaluate a checkpoint on a scenario set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenarios")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--pool-seed", type=int)
    p.add_argument("--kinds")
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--csv", help="optional per-scenario CSV")
    p.add_argument("--strict", action="store_true", help="require the config's model section to match")
    _sampler_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", parents=[common], allow_abbrev=False, help="run the invariant suite")
    p.add_argument("--only", nargs="*")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args, extra)
        return args.func(args, cfg)
    except (ConfigError, LoadError, SceneError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
