"""Calibration run for the end-to-end toy benchmark: trains stages 1+2 on the
default desk configuration and tracks rollout quality as training progresses.
"""

import argparse
import time

import torch

from canvasdiff import world
from canvasdiff.diffusion import GuidanceConfig
from canvasdiff.evaluator import rollout_eval
from canvasdiff.model import CanvasModel, ModelConfig
from canvasdiff.trainer import TrainConfig, disassemble, run_stage
from canvasdiff.world import WorldConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lr", type=float, default=2e-4)
    ap.add_argument("--stage1-epochs", type=int, default=24)
    ap.add_argument("--stage2-epochs", type=int, default=40)
    ap.add_argument("--eval-every", type=int, default=5)
    ap.add_argument("--train-episodes", type=int, default=2000)
    ap.add_argument("--eval-episodes", type=int, default=40)
    ap.add_argument("--out", default="/tmp/e2e_calib")
    args = ap.parse_args()

    wcfg = WorldConfig(grid_size=4, num_classes=6, k_max=3, resolution=16)
    mcfg = ModelConfig(world=wcfg, T=1000,
                       guidance=GuidanceConfig(phi=3.0, psi=0.0, inference_steps=50))
    model = CanvasModel(mcfg, seed=0)

    train_eps = world.generate_episodes(args.train_episodes, wcfg, seed=1000)
    val_eps = world.generate_episodes(200, wcfg, seed=91000)
    test_eps = world.generate_episodes(args.eval_episodes, wcfg, seed=95000)

    t0 = time.time()
    train_ds = disassemble(train_eps, model)
    val_ds = disassemble(val_eps, model)
    print(f"dataset: {len(train_ds)} turns  ({time.time()-t0:.1f}s)", flush=True)

    cfg = TrainConfig(lr=args.lr, batch_size=32, val_period=10,
                      stage_epochs={1: args.stage1_epochs, 2: args.stage2_epochs, 3: 10})

    t0 = time.time()
    run_stage(model, 1, train_ds, val_ds, cfg)
    print(f"stage1 done in {time.time()-t0:.0f}s", flush=True)

    def evaluate(tag):
        te = time.time()
        rep = rollout_eval(model, test_eps, iterative=True, seed=7)
        print(f"[{tag}] iterative F1={rep.f1:.3f} P={rep.precision:.3f} R={rep.recall:.3f} "
              f"RSIM={rep.rsim:.3f}  (eval {time.time()-te:.0f}s, "
              f"elapsed {time.time()-start:.0f}s)", flush=True)

    start = time.time()

    def cb(epoch, train_loss):
        print(f"stage2 epoch {epoch}: loss={train_loss:.4f} "
              f"({(time.time()-start)/epoch:.0f}s/epoch)", flush=True)
        if epoch % args.eval_every == 0:
            evaluate(f"epoch {epoch}")
            model.save(f"{args.out}/stage2_e{epoch}")

    run_stage(model, 2, train_ds, val_ds, cfg, epoch_callback=cb)
    model.save(f"{args.out}/final")
    evaluate("final")


if __name__ == "__main__":
    main()
