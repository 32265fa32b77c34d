"""Fine-tuning sweep on pseudo-real curves from a perturbed simulator.

The surrogate constants are shifted to open a systematic sim-to-real gap;
the sweep fine-tunes on nested subsets of growing size and reports the
median held-out MSE against the unadapted checkpoint.

    python scripts/finetune_sweep.py runs/tiny/checkpoint.npz --out runs/sweep
"""
import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from eodbench.cli import cmd_plot
from eodbench.dataset import DatasetManifest, generate_records
from eodbench.profiles import ProfileSamplerConfig
from eodbench.simulator import SimConfig
from eodbench.training import CheckpointBundle, TrainConfig, curve_mse, fine_tune_sweep

PSEUDO_REAL = replace(SimConfig(), v_cutoff=3.2, u0=3.37, a_lin=0.60, r_lag=0.08, d_diff=3e-3)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("checkpoint", type=Path)
    ap.add_argument("--out", type=Path, default=Path("runs/sweep"))
    ap.add_argument("--sizes", type=int, nargs="+", default=[5, 10, 20, 40])
    ap.add_argument("--epochs", type=int, default=300)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    bundle = CheckpointBundle.load(args.checkpoint)
    sampler = ProfileSamplerConfig(i_min=1.99, i_max=2.01, n_transitions_max=0, horizon_max=6000.0)
    pool = generate_records(DatasetManifest("pseudo-real", master_seed=9, count=max(args.sizes) + 40,
                                            sampler=sampler, sim=PSEUDO_REAL))
    tune, held = pool[:max(args.sizes)], pool[max(args.sizes):]
    cfg = TrainConfig(lr=1e-4, dtype=bundle.train_cfg.dtype if bundle.train_cfg else "float64",
                      max_epochs=args.epochs, patience_epochs=50, v_cutoff=3.2)
    results = fine_tune_sweep(bundle, tune, held, args.sizes, cfg)
    base = float(np.median(curve_mse(bundle.model(), held)))
    report = {"kind": "sweep", "baseline_median_mse": base,
              "sweep": [{"size": r["size"], "median_mse": r["median_mse"]} for r in results]}
    (args.out / "sweep.json").write_text(json.dumps(report, indent=1) + "\n")
    cmd_plot(args.out / "sweep.json", args.out / "sweep.svg")
    print(json.dumps(report, indent=1))


if __name__ == "__main__":
    main()
