"""Train stage 3 on top of a stage-2 checkpoint and measure the effect of
similarity guidance on rollout quality."""

import argparse
import time

from canvasdiff import world
from canvasdiff.diffusion import GuidanceConfig
from canvasdiff.evaluator import rollout_eval
from canvasdiff.model import CanvasModel
from canvasdiff.trainer import TrainConfig, disassemble, run_stage
from canvasdiff.world import WorldConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--episodes", type=int, default=2000)
    ap.add_argument("--eval-episodes", type=int, default=40)
    ap.add_argument("--lr", type=float, default=2e-4)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    wcfg = WorldConfig(grid_size=4, num_classes=6, k_max=3, resolution=16)
    model = CanvasModel.load(args.checkpoint)
    model.stages_done |= {1, 2}
    train_eps = world.generate_episodes(args.episodes, wcfg, seed=1000)
    val_eps = world.generate_episodes(200, wcfg, seed=91000)
    test_eps = world.generate_episodes(args.eval_episodes, wcfg, seed=95000)
    train_ds = disassemble(train_eps, model)
    val_ds = disassemble(val_eps, model)
    cfg = TrainConfig(lr=args.lr, batch_size=32, val_period=10,
                      stage_epochs={3: args.epochs})
    t0 = time.time()
    run_stage(model, 3, train_ds, val_ds, cfg)
    print(f"stage3 done in {time.time()-t0:.0f}s", flush=True)
    if args.out:
        model.save(args.out)

    for psi in (0.0, 2.0):
        g = GuidanceConfig(phi=3.0, psi=psi, inference_steps=50)
        r = rollout_eval(model, test_eps, iterative=True, guidance=g, seed=7)
        print(f"psi={psi}: F1={r.f1:.4f} P={r.precision:.4f} R={r.recall:.4f} "
              f"RSIM={r.rsim:.4f}", flush=True)


if __name__ == "__main__":
    main()
