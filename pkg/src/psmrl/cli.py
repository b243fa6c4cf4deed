"""Command-line entry point: ``psmrl <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data / integrity
error (bad or mismatched files), 3 failure while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from .envs import ConfigError, EnvConfig, IntegrityError, ScriptedPolicy, generate_demos, load_demos, save_demos
from .kinematics import KinematicsError, ToolPose, forward_kinematics, get_tool, ik_numeric, ik_suction
from .learner import ActorPolicy, TrainerConfig, evaluate, read_metrics, train
from .neural import CheckpointError, load_checkpoint
from .rollout import bench, write_bench_table

log = logging.getLogger("psmrl")

RUN_KEYS = ("env", "trainer", "demos", "out", "seed")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("every entry must be >= 1")
    return values


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


def load_run_config(path) -> dict:
    """Read a YAML run file with sections ``env`` / ``trainer`` and keys demos, out, seed."""
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found")
    except yaml.YAMLError as exc:
        raise UsageError(f"config file {path}: {exc}")
    if not isinstance(data, dict):
        raise UsageError(f"config file {path}: expected a mapping at top level")
    unknown = set(data) - set(RUN_KEYS)
    if unknown:
        raise UsageError(f"config file {path}: unknown keys {sorted(unknown)}")
    for section in ("env", "trainer"):
        if not isinstance(data.get(section, {}), dict):
            raise UsageError(f"config file {path}: '{section}' must be a mapping")
    return data


def resolve_run(args) -> dict:
    """Merge file values with command-line flags (flags win) into concrete configs."""
    raw = load_run_config(getattr(args, "config", None))
    env = dict(raw.get("env", {}))
    trainer = dict(raw.get("trainer", {}))
    seed = raw.get("seed")
    if args.seed is not None:
        seed = args.seed
    if args.env is not None:
        env["kind"] = args.env
    if seed is not None:
        env["seed"] = int(seed)
        trainer["seed"] = int(seed)
    for flag, key in (
        ("epochs", "n_epochs"),
        ("hidden", "hidden"),
        ("bc_weight", "bc_weight"),
        ("action_l2", "action_l2"),
        ("n_envs", "n_envs"),
        ("target_success", "target_success"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            trainer[key] = value
    if getattr(args, "q_filter", False):
        trainer["q_filter"] = True
    env_cfg = EnvConfig.from_dict(env)
    trainer_cfg = TrainerConfig.from_dict(trainer)
    demos = args.demos if getattr(args, "demos", None) is not None else raw.get("demos")
    out = args.out if getattr(args, "out", None) is not None else raw.get("out")
    return {
        "env": env_cfg,
        "trainer": trainer_cfg,
        "demos": str(demos) if demos is not None else None,
        "out": str(out) if out is not None else f"runs/{env_cfg.kind}",
        "seed": trainer_cfg.seed,
    }


def dump_run(run: dict) -> str:
    data = {
        "env": run["env"].to_dict(),
        "trainer": run["trainer"].to_dict(),
        "demos": run["demos"],
        "out": run["out"],
        "seed": run["seed"],
    }
    return yaml.safe_dump(data, sort_keys=True)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_demo_gen(args) -> int:
    env_cfg = EnvConfig(kind=args.env, seed=args.seed)
    episodes, stats = generate_demos(env_cfg, args.count)
    try:
        save_demos(args.out, episodes, env_cfg)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}")
    print(f"wrote {len(episodes)} {env_cfg.kind} demos to {args.out}")
    print(f"attempts {stats['attempts']} rejected {stats['rejected']}")
    return 0


def cmd_train(args) -> int:
    run = resolve_run(args)
    env_cfg, cfg = run["env"], run["trainer"]
    demos = None
    if run["demos"] is not None:
        path = Path(run["demos"])
        if not path.exists():
            raise DataError(f"demo file {path} not found (behavioral cloning needs it)")
        demos, demo_env = load_demos(path)
        if demo_env.kind != env_cfg.kind or demo_env.horizon != env_cfg.horizon:
            raise DataError(f"demo file is for {demo_env.kind}/T={demo_env.horizon}, run is {env_cfg.kind}/T={env_cfg.horizon}")
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_run(run))

    def report(m):
        print(f"epoch {m.epoch:4d}  success {m.success_rate:.3f}  critic {m.critic_loss:.4f}  actor {m.actor_loss:.4f}  bc {m.bc_loss:.4f}")

    result = train(env_cfg, cfg, demos=demos, out_dir=out, resume=args.resume, on_epoch=report)
    print(f"best success {result.best_success:.3f} at epoch {result.best_epoch}; outputs in {out}")
    if args.plot:
        write_svg_plot([out / "metrics.csv"], out / "success.svg", [env_cfg.kind + (" + BC" if demos else "")])
    return 0


def cmd_eval(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise DataError(f"checkpoint {args.checkpoint} not found")
    env_cfg = EnvConfig.from_dict(ckpt.env_config)
    if args.env is not None and args.env != env_cfg.kind:
        requested = EnvConfig(kind=args.env)
        raise DataError(
            f"checkpoint was trained on {env_cfg.kind} (state dim {env_cfg.state_dim}), "
            f"not {requested.kind} (state dim {requested.state_dim})"
        )
    if ckpt.actor.layer_sizes[0] != env_cfg.state_dim or ckpt.actor.layer_sizes[-1] != env_cfg.action_dim:
        raise DataError(f"actor sizes {ckpt.actor.layer_sizes} do not fit {env_cfg.kind}")
    seed = args.seed if args.seed is not None else env_cfg.seed + 10_000
    success = evaluate(ActorPolicy(ckpt.actor), env_cfg, args.episodes, args.max_steps, seed=seed)
    record = {
        "checkpoint": str(args.checkpoint),
        "env": env_cfg.kind,
        "episodes": args.episodes,
        "max_steps": args.max_steps or env_cfg.horizon,
        "seed": seed,
        "success_rate": success,
    }
    out = Path(args.out) if args.out else Path(str(args.checkpoint) + ".eval.json")
    out.write_text(json.dumps(record, indent=2) + "\n")
    print(f"success {success:.3f} over {args.episodes} episodes of {record['max_steps']} steps")
    return 0


def cmd_bench(args) -> int:
    env_cfg = EnvConfig(kind=args.env, seed=args.seed)
    reports = bench(env_cfg, args.n, lambda: ScriptedPolicy(env_cfg), episodes=args.episodes, seed=args.seed, backend=args.backend)
    write_bench_table(reports, args.out)
    print(f"{'n_envs':>6} {'s/round':>10} {'episodes':>9} {'steps/s':>12}")
    for rep in reports:
        print(f"{rep.n_envs:>6} {rep.seconds_per_round:>10.4f} {rep.episodes:>9} {rep.steps_per_second:>12.1f}")
    print(f"table written to {args.out}")
    return 0


def write_svg_plot(metric_paths, out_path, labels=None, width=640, height=400) -> None:
    """Success rate vs epoch, one polyline per metrics file; data repeated in comments."""
    series = []
    for i, path in enumerate(metric_paths):
        try:
            rows = read_metrics(path)
        except FileNotFoundError:
            raise DataError(f"metrics file {path} not found")
        except ValueError as exc:
            raise DataError(str(exc))
        if not rows:
            raise DataError(f"{path}: no epochs recorded")
        label = labels[i] if labels and i < len(labels) else Path(path).parent.name or Path(path).stem
        series.append((label, [m.epoch for m in rows], [m.success_rate for m in rows]))

    left, right, top, bottom = 60, 20, 20, 50
    pw, ph = width - left - right, height - top - bottom
    max_epoch = max(max(e) for _, e, _ in series) or 1
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]

    def sx(e):
        return left + pw * e / max_epoch

    def sy(v):
        return top + ph * (1.0 - v)

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        "<!-- data: label,epoch,success_rate",
    ]
    for label, epochs, values in series:
        lines += [f"{label},{e},{v!r}" for e, v in zip(epochs, values)]
    lines.append("-->")
    lines.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>')
    for k in range(6):
        v = k / 5
        lines.append(f'<text x="{left - 8}" y="{sy(v) + 4:.1f}" font-size="11" text-anchor="end">{v:.1f}</text>')
        lines.append(f'<line x1="{left}" y1="{sy(v):.1f}" x2="{left + pw}" y2="{sy(v):.1f}" stroke="#ddd"/>')
    for k in range(6):
        e = max_epoch * k / 5
        lines.append(f'<text x="{sx(e):.1f}" y="{top + ph + 16}" font-size="11" text-anchor="middle">{e:.0f}</text>')
    lines.append(f'<text x="{left + pw / 2}" y="{height - 10}" font-size="12" text-anchor="middle">epoch</text>')
    lines.append(
        f'<text x="14" y="{top + ph / 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {top + ph / 2})">success rate</text>'
    )
    for i, (label, epochs, values) in enumerate(series):
        color = colors[i % len(colors)]
        pts = " ".join(f"{sx(e):.1f},{sy(v):.1f}" for e, v in zip(epochs, values))
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"><title>{label}</title></polyline>')
        ly = top + 16 + 16 * i
        lines.append(f'<line x1="{left + 10}" y1="{ly - 4}" x2="{left + 30}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        lines.append(f'<text x="{left + 36}" y="{ly}" font-size="11">{label}</text>')
    lines.append("</svg>")
    Path(out_path).write_text("\n".join(lines) + "\n")


def cmd_plot(args) -> int:
    labels = args.labels.split(",") if args.labels else None
    write_svg_plot(args.metrics, args.out, labels)
    print(f"wrote {args.out}")
    return 0


def cmd_tools(args) -> int:
    tool = get_tool(args.tool)
    if args.tools_cmd == "fk":
        pose = forward_kinematics(tool, args.q, check_limits=not args.no_limits)
        print("position  " + " ".join(f"{v:.9f}" for v in pose.position))
        print("direction " + " ".join(f"{v:.9f}" for v in pose.direction))
        return 0
    pose = ToolPose(args.pose[:3], args.pose[3:])
    if args.numeric or tool.n_joints != 5:
        res = ik_numeric(tool, pose, restarts=20)
        if not res.converged:
            print(f"did not converge: residual {res.residual:.3e} after {res.iterations} iterations", file=sys.stderr)
            return 3
        q = res.q
    else:
        q = ik_suction(pose, tool)
    print("q " + " ".join(f"{v:.9f}" for v in q))
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="psmrl", description="Kinematic da Vinci PSM reach/pick environments and DDPG+HER training.")
    p.add_argument("--version", action="version", version=f"psmrl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    d = sub.add_parser("demo-gen", help="generate scripted demonstrations")
    d.add_argument("--env", choices=("reach", "pick"), default="pick")
    d.add_argument("--count", type=_positive_int, default=100)
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_demo_gen)

    t = sub.add_parser("train", help="train DDPG+HER (+BC with --demos)")
    t.add_argument("--config", help="YAML run file (sections env, trainer; keys demos, out, seed)")
    t.add_argument("--env", choices=("reach", "pick"))
    t.add_argument("--epochs", type=_positive_int)
    t.add_argument("--demos", help="demo file; enables the behavioral-cloning term")
    t.add_argument("--out", help="run directory (default runs/<env>)")
    t.add_argument("--seed", type=int)
    t.add_argument("--hidden", type=_int_list, help="hidden layer widths, e.g. 64,64,64")
    t.add_argument("--bc-weight", type=float)
    t.add_argument("--action-l2", type=float)
    t.add_argument("--n-envs", type=_positive_int)
    t.add_argument("--q-filter", action="store_true")
    t.add_argument("--target-success", type=float, help="stop once evaluation reaches this success rate")
    t.add_argument("--resume", action="store_true", help="continue from the run directory's resume state")
    t.add_argument("--plot", action="store_true", help="also write success.svg")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint without exploration noise")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=_positive_int, default=50)
    e.add_argument("--max-steps", type=_positive_int)
    e.add_argument("--env", choices=("reach", "pick"), help="refuse to run unless the checkpoint matches")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", help="result record (default <checkpoint>.eval.json)")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time one rollout round for several instance counts")
    b.add_argument("--env", choices=("reach", "pick"), default="reach")
    b.add_argument("--n", type=_int_list, default=[1, 2, 4, 6, 8])
    b.add_argument("--episodes", type=_positive_int, default=20, help="rounds per instance count")
    b.add_argument("--backend", choices=("vector", "process"), default="vector")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="bench.csv")
    b.set_defaults(func=cmd_bench)

    pl = sub.add_parser("plot", help="success-rate curves as SVG")
    pl.add_argument("metrics", nargs="+")
    pl.add_argument("--out", required=True)
    pl.add_argument("--labels", help="comma-separated series labels")
    pl.set_defaults(func=cmd_plot)

    tl = sub.add_parser("tools", help="forward / inverse kinematics queries")
    tsub = tl.add_subparsers(dest="tools_cmd", parser_class=_Parser)
    tsub.required = True
    fk = tsub.add_parser("fk")
    fk.add_argument("--tool", default="suction")
    fk.add_argument("--q", type=float, nargs="+", required=True)
    fk.add_argument("--no-limits", action="store_true")
    ik = tsub.add_parser("ik")
    ik.add_argument("--tool", default="suction")
    ik.add_argument("--pose", type=float, nargs=6, required=True, metavar=("PX", "PY", "PZ", "DX", "DY", "DZ"))
    ik.add_argument("--numeric", action="store_true", help="use damped least squares")
    tl.set_defaults(func=cmd_tools)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"psmrl: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, IntegrityError, CheckpointError) as exc:
        print(f"psmrl: data error: {exc}", file=sys.stderr)
        return 2
    except (KinematicsError, ValueError, KeyError) as exc:
        print(f"psmrl: error: {exc}", file=sys.stderr)
        return 1 if args.command == "tools" else 3
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"psmrl: failed: {exc!r}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
