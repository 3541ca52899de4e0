"""Command-line entry points: dataset generation, training, evaluation,
serving, and schedule inspection."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import world
from .diffusion import GuidanceConfig, build_schedule, schedule_csv
from .model import CanvasModel, ModelConfig
from .trainer import TrainConfig, train_stages
from .world import WorldConfig


def _load_json(path) -> dict:
    with open(path) as f:
        return json.load(f)


def cmd_data(args) -> int:
    cfg = WorldConfig(grid_size=args.grid, num_classes=args.classes, k_max=args.kmax,
                      resolution=args.resolution)
    episodes = world.generate_episodes(args.episodes, cfg, args.seed)
    world.save_episodes(episodes, args.out)
    print(f"wrote {len(episodes)} episodes to {args.out}")
    return 0


def _configs_from_file(path) -> tuple[ModelConfig, TrainConfig]:
    raw = _load_json(path) if path else {}
    world_cfg = WorldConfig(**raw.get("world", {}))
    guidance = GuidanceConfig(**raw.get("guidance", {}))
    model_raw = dict(raw.get("model", {}))
    model_cfg = ModelConfig(world=world_cfg, guidance=guidance, **model_raw)
    train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    return model_cfg, train_cfg


def cmd_train(args) -> int:
    model_cfg, train_cfg = _configs_from_file(args.config)
    if args.init:
        model = CanvasModel.load(args.init)
    else:
        model = CanvasModel(model_cfg, seed=train_cfg.seed)
    train_eps = world.load_episodes(args.data)
    val_eps = world.load_episodes(args.val_data) if args.val_data else train_eps[: max(1, len(train_eps) // 10)]
    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]
    os.makedirs(args.out, exist_ok=True)
    train_stages(model, stages, train_eps, val_eps, train_cfg, out_dir=args.out,
                 log_path=os.path.join(args.out, "training_log.csv"))
    print(f"checkpoints in {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .evaluator import rollout_eval
    from .learning import set_deterministic

    set_deterministic(True)
    model = CanvasModel.load(args.checkpoint)
    episodes = world.load_episodes(args.episodes)
    report = rollout_eval(model, episodes, iterative=args.iterative == "true",
                          seed=args.seed, fingerprint=model.config_fingerprint())
    payload = report.to_json()
    if args.out:
        with open(args.out, "w") as f:
            f.write(payload)
    print(payload)
    return 0


def cmd_serve(args) -> int:
    from .service import run_server

    checkpoint = args.checkpoint or os.environ.get("CANVASDIFF_CHECKPOINT")
    if not checkpoint:
        print("no checkpoint given (flag --checkpoint or CANVASDIFF_CHECKPOINT)", file=sys.stderr)
        return 2
    port = args.port or int(os.environ.get("CANVASDIFF_PORT", "8000"))
    run_server(checkpoint, port=port, persist_dir=args.persist, host=args.host)
    return 0


def cmd_schedule(args) -> int:
    csv_text = schedule_csv(build_schedule(args.T))
    if args.out:
        with open(args.out, "w") as f:
            f.write(csv_text)
    else:
        sys.stdout.write(csv_text)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="canvasdiff")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data", help="generate an episode dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--kmax", type=int, default=3)
    p.add_argument("--resolution", type=int, default=16)
    p.set_defaults(fn=cmd_data)

    p = sub.add_parser("train", help="run training stages")
    p.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    p.add_argument("--config", default=None, help="JSON with world/model/guidance/train sections")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--init", default=None, help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="roll out a checkpoint over episodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--iterative", choices=["true", "false"], default="true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("serve", help="start the inference service")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--persist", default=None)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("schedule", help="inspect the noise schedule")
    sub2 = p.add_subparsers(dest="schedule_command", required=True)
    pd = sub2.add_parser("dump")
    pd.add_argument("--T", type=int, required=True)
    pd.add_argument("--out", default=None)
    pd.set_defaults(fn=cmd_schedule)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
