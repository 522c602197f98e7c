"""Command line entry points: ``roomnav {map,train,navigate,eval}``.

Artifacts live in the output directory::

    world.json            world spec actually used
    episodes/map_NNN.rnep mapping tours
    graph.rngr            room graph
    map.json              room / edge / transit-frame counts
    model.rnmd            trained RoomNet
    train.json            loss curve and held-out accuracy
    trajectory.jsonl      per-step navigation log
    navigate.json         navigation summary
    eval.json             per-perturbation-level aggregate

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, RunConfig
from .frames import frame_from_bytes
from .roomnet import classify_frame, load_model, save_model
from .runner import (TrialSpec, build_run_world, frame_accuracy, holdout_episode, make_goal_image,
                     make_system, map_stage, random_pose, run_navigation, run_trial, train_stage)
from .simulator import World, load_episode, save_episode, save_world_spec
from .topo_graph import GoalNotRecognized, load_graph, resolve_goal_room, save_graph

log = logging.getLogger("roomnav")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; usage errors here are exit code 1
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _levels(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad perturbation list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration (JSON)")
    common.add_argument("--seed", type=_u64, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")

    p = _Parser(prog="roomnav", description="Localization-free topological navigation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("map", parents=[common], help="record mapping tours and build the room graph")
    sub.add_parser("train", parents=[common], help="train RoomNet")

    nav = sub.add_parser("navigate", parents=[common], help="run one navigation episode")
    nav.add_argument("--start-room", type=int)
    nav.add_argument("--goal-room", type=int)
    nav.add_argument("--goal-image", type=Path, help="goal frame file; default renders one")
    nav.add_argument("--perturb", type=float, help="p = q applied to the world after training")

    ev = sub.add_parser("eval", parents=[common], help="seeded trials over perturbation levels")
    ev.add_argument("--trials", type=int)
    ev.add_argument("--perturb", type=_levels, help="comma separated levels, e.g. 0,0.1,0.3")
    ev.add_argument("--start-room", type=int)
    ev.add_argument("--goal-room", type=int)
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    top: dict = {}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.out is not None:
        top["out"] = str(args.out)
    nav = {}
    for name in ("start_room", "goal_room", "trials"):
        val = getattr(args, name, None)
        if val is not None:
            nav[name] = val
    perturb = getattr(args, "perturb", None)
    if perturb is not None:
        nav["perturb"] = [perturb] if isinstance(perturb, float) else perturb
    if nav:
        top["nav"] = nav
    cfg = cfg.replace(**top) if top else cfg
    cfg.world_spec()  # room ids checked against the world before anything runs
    return cfg


# -- commands ------------------------------------------------------------------

def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_world(cfg: RunConfig) -> World:
    try:
        return build_run_world(cfg)
    except (OSError, ValueError) as e:
        raise RuntimeFailure(str(e)) from None


def _episode_paths(out: Path) -> list[Path]:
    return sorted((out / "episodes").glob("map_*.rnep"))


def cmd_map(cfg: RunConfig) -> dict:
    world = _load_world(cfg)
    out = _out(cfg)
    try:
        episodes, graph = map_stage(cfg, world)
    except ValueError as e:
        raise RuntimeFailure(str(e)) from None
    save_world_spec(out / "world.json", world.spec)
    ep_dir = out / "episodes"
    ep_dir.mkdir(exist_ok=True)
    for old in _episode_paths(out):
        old.unlink()
    for i, ep in enumerate(episodes):
        save_episode(ep_dir / f"map_{i:03d}.rnep", ep)
    save_graph(out / "graph.rngr", graph)
    report = {
        "rooms": graph.room_count,
        "edges": [list(e) for e in graph.edges()],
        "transit_frames": {f"{a}->{b}": len(f) for (a, b), f in sorted(graph.transitions.items())},
        "room_keyframes": {str(r): len(graph.room_frames[r]) for r in graph.rooms},
        "episodes": len(episodes),
        "frames": sum(len(e) for e in episodes),
    }
    _write_json(out / "map.json", report)
    return report


def cmd_train(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    paths = _episode_paths(out)
    if not paths:
        raise RuntimeFailure(f"missing episodes in {out / 'episodes'}; run `roomnav map` first")
    world = _load_world(cfg)
    episodes = [load_episode(p) for p in paths]
    if any(ep.world_hash != world.hash() for ep in episodes):
        raise RuntimeFailure("episodes were recorded in a different world")
    try:
        result = train_stage(cfg, world, episodes)
    except ValueError as e:
        raise RuntimeFailure(str(e)) from None
    save_model(out / "model.rnmd", result.model)
    acc = frame_accuracy(result.model, holdout_episode(cfg, world), cfg.queue)
    report = {
        "epochs": cfg.train.epochs,
        "loss_curve": [round(float(x), 8) for x in result.loss_curve],
        "holdout_accuracy": round(acc, 6),
    }
    _write_json(out / "train.json", report)
    return report


def _load_system(cfg: RunConfig, perturb_level: float):
    out = Path(cfg.out)
    for name in ("graph.rngr", "model.rnmd"):
        if not (out / name).exists():
            raise RuntimeFailure(f"missing {out / name}; run `roomnav map` and `roomnav train` first")
    try:
        world = build_run_world(cfg, perturb_level)
    except (OSError, ValueError) as e:
        raise RuntimeFailure(str(e)) from None
    graph = load_graph(out / "graph.rngr")
    model = load_model(out / "model.rnmd")
    if graph.room_count != world.room_count or model.room_count != world.room_count:
        raise RuntimeFailure("graph or model does not match the configured world")
    return make_system(cfg, world, model, graph)


def cmd_navigate(cfg: RunConfig, goal_image: Path | None = None) -> dict:
    level = cfg.nav.perturb[0]
    system = _load_system(cfg, level)
    out = _out(cfg)
    seed = cfg.trial_seed(0)
    rng = np.random.default_rng([seed, 7])
    start = random_pose(system.world, cfg.nav.start_room, rng)
    if goal_image is None:
        goal, _ = make_goal_image(system.world, cfg.nav.goal_room, rng, stream=10_000 + seed)
    else:
        try:
            goal = frame_from_bytes(goal_image.read_bytes())
        except (OSError, ValueError) as e:
            raise RuntimeFailure(f"cannot read goal image: {e}") from None
    prior = classify_frame(system.model, goal, cfg.queue).probs[:system.world.room_count]
    try:
        goal_room = resolve_goal_room(system.graph, goal, cfg.policy.m_s0, cfg.match, prior)
    except GoalNotRecognized as e:
        raise RuntimeFailure(str(e)) from None
    with open(out / "trajectory.jsonl", "w") as fh:
        result = run_navigation(system, start, goal, goal_room, stream=seed,
                                max_steps=cfg.nav.max_steps, trajectory=fh)
    summary = result.summary()
    summary["followed_plan"] = result.followed_plan
    summary["start_room"] = cfg.nav.start_room
    summary["perturb"] = level
    _write_json(out / "navigate.json", summary)
    return summary


def cmd_eval(cfg: RunConfig) -> dict:
    levels = []
    for level in cfg.nav.perturb:
        system = _load_system(cfg, level)
        results = [
            run_trial(system, TrialSpec(cfg.trial_seed(i), cfg.nav.start_room, cfg.nav.goal_room),
                      max_steps=cfg.nav.max_steps)
            for i in range(cfg.nav.trials)
        ]
        n = len(results)
        levels.append({
            "perturb": level,
            "trials": n,
            "successes": sum(r.success for r in results),
            "success_rate": sum(r.success for r in results) / n,
            "followed_plan_rate": sum(r.success and r.followed_plan for r in results) / n,
            "mean_steps": float(np.mean([r.steps for r in results])),
            "mean_replans": float(np.mean([r.replans for r in results])),
        })
        log.info("p=%.2f success %d/%d", level, levels[-1]["successes"], n)
    ordered = sorted(levels, key=lambda d: d["perturb"])
    rates = [d["success_rate"] for d in ordered]
    report = {
        "start_room": cfg.nav.start_room,
        "goal_room": cfg.nav.goal_room,
        "levels": levels,
        "non_increasing": all(a >= b for a, b in zip(rates, rates[1:])),
    }
    _write_json(_out(cfg) / "eval.json", report)
    return report


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "trials", None) is not None and args.trials < 1:
            raise UsageError("--trials must be >= 1")
        cfg = resolve_config(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "map":
            report = cmd_map(cfg)
        elif args.command == "train":
            report = cmd_train(cfg)
        elif args.command == "navigate":
            report = cmd_navigate(cfg, args.goal_image)
        else:
            report = cmd_eval(cfg)
    except RuntimeFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(report, sort_keys=True))
    if args.command == "navigate" and not report["success"]:
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
