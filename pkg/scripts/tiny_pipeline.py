"""Generate, train, evaluate and probe the tiny Dynaformer end to end.

Mirrors acceptance criterion 5 and writes every artifact under --out:
datasets, checkpoint, run record, evaluation report, probe report and SVGs.

    python scripts/tiny_pipeline.py --out runs/tiny --steps 6000
"""
import argparse
import json
import logging
from pathlib import Path

from eodbench.cli import cmd_plot
from eodbench.dataset import DatasetManifest, generate_records, save_dataset, split_records
from eodbench.evaluation import RteConfig, evaluate_suite, latent_probe
from eodbench.models import preset
from eodbench.profiles import ProfileSamplerConfig
from eodbench.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/tiny"))
    ap.add_argument("--count", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=6000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--dtype", default="float32")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)

    sampler = ProfileSamplerConfig(n_transitions_max=0, horizon_max=4000.0)
    train_m = DatasetManifest("tiny-train", master_seed=1, count=args.count, sampler=sampler)
    test_m = DatasetManifest("tiny-test", master_seed=101, count=100, sampler=sampler)
    records, test = generate_records(train_m), generate_records(test_m)
    save_dataset(records, train_m, out / "train")
    save_dataset(test, test_m, out / "test")

    cfg = TrainConfig(lr=1e-3, lr_min=1e-5, lr_schedule="cosine", dtype=args.dtype, max_steps=args.steps,
                      max_epochs=100_000, patience_epochs=100_000, seed=args.seed)
    tr, va = split_records(records, train_m)
    bundle, run = train("dynaformer", tr, va, preset("tiny"), cfg)
    bundle.save(out / "checkpoint.npz")
    run.save(out / "run.json")

    model = bundle.model()
    report = evaluate_suite(model, test, RteConfig(context_len=bundle.model_cfg.context_len))
    report.save(out / "eval")
    probe_m = DatasetManifest("tiny-probe", master_seed=201, count=200,
                              sampler=ProfileSamplerConfig(i_min=0.99, i_max=1.01, n_transitions_max=0,
                                                           horizon_max=4000.0))
    probe = latent_probe(model, generate_records(probe_m))
    (out / "probe.json").write_text(json.dumps({"kind": "probe", **probe.to_json()}, indent=1) + "\n")

    cmd_plot(out / "run.json", out / "loss.svg")
    cmd_plot(out / "probe.json", out / "probe.svg")
    print(report.table())
    print(json.dumps(probe.correlations, indent=1))


if __name__ == "__main__":
    main()
