"""RTE and RMSE by profile complexity for a trained checkpoint.

Builds interpolation and extrapolation test sets bucketed by transition
count and reports median and 5-95% bands per bucket, the layout of the
complexity-vs-error figure.

    python scripts/rte_by_transitions.py runs/tiny/checkpoint.npz --out runs/tiny/buckets
"""
import argparse
from pathlib import Path

from eodbench.cli import cmd_plot
from eodbench.dataset import DatasetManifest, make_test_sets
from eodbench.evaluation import RteConfig, evaluate_suite
from eodbench.profiles import ProfileSamplerConfig
from eodbench.training import CheckpointBundle

BUCKETS = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9), (10, 11)]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("checkpoint", type=Path)
    ap.add_argument("--out", type=Path, default=Path("runs/buckets"))
    ap.add_argument("--per-bucket", type=int, default=20)
    ap.add_argument("--horizon", type=float, default=6000.0)
    args = ap.parse_args()

    bundle = CheckpointBundle.load(args.checkpoint)
    model = bundle.model()
    base = DatasetManifest("buckets", master_seed=303, count=args.per_bucket * len(BUCKETS),
                           sampler=ProfileSamplerConfig(horizon_max=args.horizon))
    cfg = RteConfig(context_len=bundle.model_cfg.context_len)
    report = None
    for regime in ("interpolation", "extrapolation"):
        records, _ = make_test_sets(base, regime, BUCKETS)
        part = evaluate_suite(model, records, cfg, regime=regime, buckets=BUCKETS)
        report = part if report is None else report.merge(part)
    report.save(args.out)
    cmd_plot(args.out / "report.json", args.out / "rte_by_transitions.svg")
    print(report.table())


if __name__ == "__main__":
    main()
