"""Probe: does a higher condition-drop rate during training make strong
classifier-free guidance (phi=3) reliable on the desk benchmark?"""

import argparse
import time

from canvasdiff import world
from canvasdiff.diffusion import GuidanceConfig
from canvasdiff.evaluator import rollout_eval
from canvasdiff.model import CanvasModel, ModelConfig
from canvasdiff.trainer import TrainConfig, disassemble, run_stage
from canvasdiff.world import WorldConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lam", type=float, required=True)
    ap.add_argument("--episodes", type=int, default=1000)
    ap.add_argument("--stage1-epochs", type=int, default=12)
    ap.add_argument("--stage2-epochs", type=int, default=16)
    ap.add_argument("--lr", type=float, default=2e-4)
    ap.add_argument("--eval-every", type=int, default=8)
    args = ap.parse_args()

    wcfg = WorldConfig(grid_size=4, num_classes=6, k_max=3, resolution=16)
    model = CanvasModel(ModelConfig(world=wcfg, T=1000), seed=0)
    train_eps = world.generate_episodes(args.episodes, wcfg, seed=1000)
    val_eps = world.generate_episodes(100, wcfg, seed=91000)
    test_eps = world.generate_episodes(20, wcfg, seed=95000)
    train_ds = disassemble(train_eps, model)
    val_ds = disassemble(val_eps, model)
    cfg = TrainConfig(lr=args.lr, lam=args.lam, batch_size=32, val_period=50,
                      stage_epochs={1: args.stage1_epochs, 2: args.stage2_epochs})
    t0 = time.time()
    run_stage(model, 1, train_ds, val_ds, cfg)
    print(f"[lam={args.lam}] stage1 done {time.time()-t0:.0f}s", flush=True)

    def cb(epoch, loss):
        if epoch % args.eval_every == 0 or epoch == args.stage2_epochs:
            for phi in (1.0, 3.0):
                g = GuidanceConfig(phi=phi, psi=0.0, inference_steps=50)
                r = rollout_eval(model, test_eps, iterative=True, guidance=g, seed=3)
                print(f"[lam={args.lam}] epoch {epoch} phi={phi}: F1={r.f1:.3f} "
                      f"RSIM={r.rsim:.3f} ({time.time()-t0:.0f}s)", flush=True)

    run_stage(model, 2, train_ds, val_ds, cfg, epoch_callback=cb)


if __name__ == "__main__":
    main()
