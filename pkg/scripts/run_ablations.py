"""Train and evaluate every ablation row of the desk benchmark, reporting the
directional comparison against the full model.

Each row retrains from scratch with its configuration delta, so a full pass
costs several training runs; use --rows to select a subset and --scale to
shrink the budget while exploring.
"""

import argparse
import json
import time
from dataclasses import replace

from canvasdiff import world
from canvasdiff.diffusion import GuidanceConfig
from canvasdiff.evaluator import ABLATIONS, ablation_suite, rollout_eval
from canvasdiff.model import CanvasModel, ModelConfig
from canvasdiff.trainer import TrainConfig, disassemble, run_stage
from canvasdiff.world import WorldConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", nargs="*", default=list(ABLATIONS))
    ap.add_argument("--train-episodes", type=int, default=2000)
    ap.add_argument("--test-episodes", type=int, default=200)
    ap.add_argument("--stage1-epochs", type=int, default=24)
    ap.add_argument("--stage2-epochs", type=int, default=30)
    ap.add_argument("--stage3-epochs", type=int, default=10)
    ap.add_argument("--lr", type=float, default=2e-4)
    ap.add_argument("--out", default="ablation_report.json")
    args = ap.parse_args()

    wcfg = WorldConfig(grid_size=4, num_classes=6, k_max=3, resolution=16)
    base_guidance = GuidanceConfig(phi=3.0, psi=2.0, inference_steps=50)
    train_eps = world.generate_episodes(args.train_episodes, wcfg, seed=1000)
    val_eps = world.generate_episodes(200, wcfg, seed=91000)
    test_eps = world.generate_episodes(args.test_episodes, wcfg, seed=95000)

    def run_row(name, spec):
        t0 = time.time()
        eta = spec.eta if spec.eta is not None else 1.0
        guidance = replace(base_guidance, **spec.guidance)
        mcfg = ModelConfig(world=wcfg, T=1000, eta=eta, guidance=guidance)
        model = CanvasModel(mcfg, seed=0)
        epochs = {1: args.stage1_epochs, 2: args.stage2_epochs, 3: args.stage3_epochs}
        tcfg = TrainConfig(lr=args.lr, batch_size=32, val_period=10,
                           stage_epochs=epochs, **spec.train)
        train_ds = disassemble(train_eps, model)
        val_ds = disassemble(val_eps, model)
        for stage in spec.stages:
            run_stage(model, stage, train_ds, val_ds, tcfg)
        report = rollout_eval(model, test_eps, iterative=spec.iterative,
                              guidance=guidance, seed=7, fingerprint=name)
        print(f"{name}: F1={report.f1:.4f} RSIM={report.rsim:.4f} "
              f"({(time.time() - t0) / 60:.0f} min)", flush=True)
        return report

    reports = ablation_suite(run_row, names=args.rows)
    with open(args.out, "w") as f:
        json.dump({name: json.loads(rep.to_json()) for name, rep in reports.items()}, f, indent=1)

    if "full" in reports:
        full = reports["full"]
        print("\ndirectional summary vs full model:")
        for name, rep in reports.items():
            if name in ("full", "non_iterative"):
                continue
            direction = "lower" if rep.f1 < full.f1 else "NOT lower"
            print(f"  {name}: F1 {rep.f1:.4f} vs {full.f1:.4f} -> {direction}")
        if "non_iterative" in reports:
            rep = reports["non_iterative"]
            direction = "higher" if rep.f1 > full.f1 and rep.rsim > full.rsim else "NOT higher"
            print(f"  non_iterative: F1 {rep.f1:.4f} RSIM {rep.rsim:.4f} -> {direction}")


if __name__ == "__main__":
    main()
