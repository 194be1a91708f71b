"""Run the three pipeline modes over several seeds and tabulate validation deltas.

    python3 scripts/ablation_study.py --seeds 0 1 2 3 4 --out runs/ablation
"""
import argparse
import json
from pathlib import Path

import numpy as np

from hiergate import config as C
from hiergate.pipeline import Experiment


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--modes", nargs="+", default=list(C.ABLATIONS), choices=C.ABLATIONS)
    p.add_argument("--out", type=Path, default=Path("runs/ablation"))
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()

    base = C.load(args.config) if args.config else C.ExperimentConfig()
    headline = {"none": "full", "task_only": "task_only", "instance_only": "instance_only"}
    deltas: dict[str, list[float]] = {}
    for seed in args.seeds:
        shared_ref = args.out / f"seed{seed}" / "reference.csv"
        for mode in args.modes:
            out = args.out / f"seed{seed}" / mode
            cfg = base.replace(seed=seed, ablation=mode, output_dir=str(out))
            exp = Experiment(cfg, out, args.workers)
            # single-task references depend only on the seed: train them once
            if shared_ref.exists():
                exp.path("reference.csv").write_bytes(shared_ref.read_bytes())
            summary = exp.run()
            if not shared_ref.exists():
                shared_ref.write_bytes((out / "reference.csv").read_bytes())
            if mode == args.modes[0]:
                deltas.setdefault("hard_sharing", []).append(summary["delta"]["hard_sharing"])
            deltas.setdefault(headline[mode], []).append(summary["delta"][headline[mode]])
            print(f"seed {seed} {mode}: {json.dumps(summary['delta'])}", flush=True)

    print(f"\n{'variant':<16}{'median':>10}{'mean':>10}  per-seed")
    for name, vals in deltas.items():
        print(f"{name:<16}{np.median(vals):>10.3f}{np.mean(vals):>10.3f}  " + " ".join(f"{v:.2f}" for v in vals))


if __name__ == "__main__":
    main()
