"""MC-dropout prediction bands for one test curve.

    python scripts/mc_bands.py runs/tiny/checkpoint.npz --out runs/tiny/mc.tsv
"""
import argparse
from pathlib import Path

import numpy as np

from eodbench.cli import cmd_plot
from eodbench.dataset import DatasetManifest, generate_records
from eodbench.evaluation import mc_predict, record_context
from eodbench.profiles import ProfileSamplerConfig
from eodbench.training import CheckpointBundle


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("checkpoint", type=Path)
    ap.add_argument("--out", type=Path, default=Path("runs/mc.tsv"))
    ap.add_argument("--passes", type=int, default=50)
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()

    bundle = CheckpointBundle.load(args.checkpoint)
    model = bundle.model()
    rec = generate_records(DatasetManifest("mc", master_seed=args.seed, count=1,
                                           sampler=ProfileSamplerConfig(horizon_max=6000.0)))[0]
    x = rec.current_samples()
    mean, std = mc_predict(model, record_context(rec, bundle.model_cfg.context_len), x, n_passes=args.passes)
    t = np.arange(len(x)) * rec.sampling_period
    args.out.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(args.out, np.column_stack([t, rec.voltage, mean, mean - 2 * std, mean + 2 * std]), delimiter="\t",
               header="t_s\ttruth\tmean\tlower_2sd\tupper_2sd", comments="", fmt="%.8g")
    cmd_plot(args.out, args.out.with_suffix(".svg"))


if __name__ == "__main__":
    main()
