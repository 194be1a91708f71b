"""Train once, retrain the selected plan across target rates, print the cost table.

    python3 scripts/cost_sweep.py --seed 0 --target-rates 1 0.8 0.55 0.4 --out runs/sweep
"""
import argparse
from pathlib import Path

from hiergate import config as C
from hiergate.pipeline import Experiment


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target-rates", type=float, nargs="+", default=[1.0, 0.8, 0.55, 0.4])
    p.add_argument("--out", type=Path, default=Path("runs/sweep"))
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()

    base = C.load(args.config) if args.config else C.ExperimentConfig()
    cfg = base.replace(seed=args.seed, target_rates=args.target_rates, output_dir=str(args.out))
    summary = Experiment(cfg, args.out, args.workers).run("none")
    rates = {v["name"]: v["eval_gate_rates"] for v in summary["variants"]}
    gated = cfg.backbone.gated_blocks
    print(f"{'variant':<14}{'t':>6}{'params':>9}{'exp. FLOPs':>13}{'val delta':>11}  eval gate rates")
    for row in sorted(summary["cost"], key=lambda r: (not r["variant"].startswith("full"), -r["target_rate"])):
        g = " ".join(f"{rates[row['variant']][l]:.2f}" for l in gated)
        print(f"{row['variant']:<14}{row['target_rate']:>6.2f}{row['params']:>9d}{row['expected_flops']:>13.0f}"
              f"{row['delta']:>11.3f}  {g}")
    print(f"\nartifacts in {args.out} (cost.csv, plotdata.csv, gate_rates.csv)")


if __name__ == "__main__":
    main()
