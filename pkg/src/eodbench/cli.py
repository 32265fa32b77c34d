"""Command-line entry point: generate, simulate, train, finetune, eval, probe, plot."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import typing
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import (
    DatasetManifest, DegradationRange, generate_records, ingest_real, load_dataset, real_manifest,
    save_dataset, split_records,
)
from .evaluation import RteConfig, evaluate_suite, latent_probe
from .models import ModelConfig, preset
from .profiles import CurrentProfile, ProfileSamplerConfig
from .simulator import DegradationParams, SimConfig, eod_time, simulate
from .training import CheckpointBundle, TrainConfig, fine_tune, fine_tune_sweep, curve_mse, train

log = logging.getLogger("eodbench")

OUTPUT_ROOT_ENV = "EODBENCH_OUTPUT_ROOT"


class ConfigValidationError(ValueError):
    pass


@dataclass
class DatasetSection:
    name: str = "synthetic"
    master_seed: int = 0
    count: int = 1000
    min_duration: float = 500.0
    max_duration: float = 20000.0
    train_fraction: float = 0.85
    buckets: list | None = None


@dataclass
class ModelSection:
    kind: str = "dynaformer"
    preset: str = "tiny"
    overrides: dict = field(default_factory=dict)

    def build(self) -> ModelConfig:
        unknown = set(self.overrides) - {f.name for f in dataclasses.fields(ModelConfig)}
        if unknown:
            raise ConfigValidationError(f"unknown keys: {', '.join(f'model.overrides.{k}' for k in sorted(unknown))}")
        return preset(self.preset, **self.overrides)


@dataclass
class SimulateSection:
    q_max: float = 6000.0
    r0: float = 0.1
    const_current: float | None = None
    profile: str | None = None  # JSON file with segment_values and segment_end_times
    horizon: float = 20000.0


@dataclass
class ProbeSection:
    targets: str = "synthetic"
    max_records: int = 500


@dataclass
class FinetuneSection:
    sizes: list = field(default_factory=lambda: [5, 10, 20, 40, 80])
    mode: str = "single"  # single | sweep
    real_root: str | None = None
    held_out: str | None = None


@dataclass
class RunConfig:
    output_dir: str | None = None
    seed: int = 0
    jobs: int = 1
    data: str | None = None
    checkpoint: str | None = None
    regime: str = "interpolation"
    metric: str = "all"  # eval: rte | rmse | all
    dataset: DatasetSection = field(default_factory=DatasetSection)
    sim: SimConfig = field(default_factory=SimConfig)
    sampler: ProfileSamplerConfig = field(default_factory=ProfileSamplerConfig)
    ranges: DegradationRange = field(default_factory=DegradationRange)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    rte: RteConfig = field(default_factory=RteConfig)
    probe: ProbeSection = field(default_factory=ProbeSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)

    def to_json(self) -> dict:
        return asdict(self)

    def manifest(self) -> DatasetManifest:
        d = self.dataset
        return DatasetManifest(
            name=d.name, master_seed=d.master_seed, count=d.count, sampler=self.sampler,
            ranges=replace(self.ranges, regime=self.regime), sim=self.sim, min_duration=d.min_duration,
            max_duration=d.max_duration, buckets=d.buckets, train_fraction=d.train_fraction,
        )


def _unknown_keys(cls, data: dict, prefix: str = "") -> list[str]:
    names = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    bad = []
    for k, v in data.items():
        if k not in names:
            bad.append(prefix + k)
        elif dataclasses.is_dataclass(hints[k]) and isinstance(v, dict):
            bad.extend(_unknown_keys(hints[k], v, f"{prefix}{k}."))
    return bad


def _build(cls, data: dict):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for k, v in data.items():
        if dataclasses.is_dataclass(hints[k]) and isinstance(v, dict):
            kwargs[k] = _build(hints[k], v)
        else:
            kwargs[k] = v
    return cls(**kwargs)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(data: dict, key: str, value):
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigValidationError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = value


def _flatten(d: dict, prefix: str = "") -> set[str]:
    out = set()
    for k, v in d.items():
        if isinstance(v, dict) and k != "overrides":
            out |= _flatten(v, f"{prefix}{k}.")
        else:
            out.add(prefix + k)
    return out


def load_config(path: str | None, sets: list[str] = (), flags: dict | None = None) -> tuple[RunConfig, set[str]]:
    """Resolve file, ``--set key=value`` and flag overrides; returns the config and explicit keys."""
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigValidationError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(data, dict):
            raise ConfigValidationError(f"{path}: top level must be an object")
    for item in sets:
        if "=" not in item:
            raise ConfigValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_dotted(data, k.strip(), _parse_value(v))
    for k, v in (flags or {}).items():
        if v is not None:
            _set_dotted(data, k, v)
    bad = _unknown_keys(RunConfig, data)
    if bad:
        raise ConfigValidationError(f"unknown keys: {', '.join(sorted(bad))}")
    try:
        cfg = _build(RunConfig, data)
    except (TypeError, ValueError) as e:
        raise ConfigValidationError(str(e)) from e
    return cfg, _flatten(data)


def _output_dir(cfg: RunConfig, command: str) -> Path:
    if cfg.output_dir:
        out = Path(cfg.output_dir)
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(cfg: RunConfig, out: Path, command: str):
    resolved = cfg.to_json()
    resolved["output_dir"] = str(out)
    (out / "config.json").write_text(json.dumps(resolved, indent=1, sort_keys=True) + "\n")
    log.info("%s: resolved config written to %s", command, out / "config.json")


def _require(value, what: str):
    if value is None:
        raise ConfigValidationError(f"missing required setting: {what}")
    return value


def _load_data(cfg: RunConfig):
    path = Path(_require(cfg.data, "data"))
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return load_dataset(path)


def cmd_generate(cfg: RunConfig, explicit: set[str], out: Path) -> dict:
    manifest = cfg.manifest()
    records = generate_records(manifest, jobs=cfg.jobs)
    save_dataset(records, manifest, out / "dataset")
    return {"records": len(records), "path": str(out / "dataset")}


def cmd_simulate(cfg: RunConfig, explicit: set[str], out: Path) -> dict:
    s = cfg.simulate
    if s.profile:
        d = json.loads(Path(s.profile).read_text())
        profile = CurrentProfile(np.asarray(d["segment_values"], float), np.asarray(d["segment_end_times"], float))
    else:
        profile = CurrentProfile.constant(_require(s.const_current, "simulate.const_current or simulate.profile"),
                                          s.horizon)
    curve = simulate(profile, DegradationParams(s.q_max, s.r0), cfg.sim)
    rows = np.column_stack([curve.times, curve.v])
    np.savetxt(out / "curve.tsv", rows, delimiter="\t", header="t_s\tvoltage_V", comments="", fmt="%.17g")
    return {"samples": len(curve.v), "eod_reached": curve.eod_reached, "eod_time": eod_time(curve, cfg.sim.v_cutoff),
            "path": str(out / "curve.tsv")}


def _data_cutoff(manifest: DatasetManifest) -> float:
    return manifest.sim.v_cutoff


def cmd_train(cfg: RunConfig, explicit: set[str], out: Path) -> dict:
    if cfg.data:
        records, manifest = _load_data(cfg)
    else:
        manifest = cfg.manifest()
        records = generate_records(manifest, jobs=cfg.jobs)
    tcfg = cfg.train
    if "train.v_cutoff" not in explicit:
        tcfg = replace(tcfg, v_cutoff=_data_cutoff(manifest))
    tcfg = replace(tcfg, seed=cfg.seed) if "train.seed" not in explicit else tcfg
    tr, va = split_records(records, manifest)
    bundle, run = train(cfg.model.kind, tr, va, cfg.model.build(), tcfg)
    bundle.save(out / "checkpoint.npz")
    run.save(out / "run.json")
    return {"checkpoint": str(out / "checkpoint.npz"), "best_val_loss": run.best_val_loss,
            "steps": run.steps, "stop_reason": run.stop_reason}


def _records_for_finetune(cfg: RunConfig):
    if cfg.finetune.real_root:
        records, errors = ingest_real(cfg.finetune.real_root, period=cfg.sim.sampling_period)
        for e in errors:
            log.warning("%s", e)
        return records, real_manifest("real", records, cfg.sim.sampling_period)
    return _load_data(cfg)


def cmd_finetune(cfg: RunConfig, explicit: set[str], out: Path) -> dict:
    bundle = CheckpointBundle.load(_require(cfg.checkpoint, "checkpoint"))
    records, manifest = _records_for_finetune(cfg)
    held = load_dataset(cfg.finetune.held_out)[0] if cfg.finetune.held_out else []
    tcfg = cfg.train
    if "train.v_cutoff" not in explicit:
        tcfg = replace(tcfg, v_cutoff=_data_cutoff(manifest))
    if cfg.finetune.mode == "sweep":
        if not held:
            raise ConfigValidationError("missing required setting: finetune.held_out (sweep mode)")
        results = fine_tune_sweep(bundle, records, held, cfg.finetune.sizes, tcfg, seed=cfg.seed)
        summary = []
        for r in results:
            r["bundle"].save(out / f"checkpoint_n{r['size']}.npz")
            summary.append({"size": r["size"], "median_mse": r["median_mse"]})
        base = float(np.median(curve_mse(bundle.model(), held)))
        report = {"kind": "sweep", "baseline_median_mse": base, "sweep": summary}
        (out / "sweep.json").write_text(json.dumps(report, indent=1) + "\n")
        return {"path": str(out / "sweep.json"), "sizes": [s["size"] for s in summary]}
    if cfg.finetune.mode != "single":
        raise ConfigValidationError(f"unknown finetune.mode {cfg.finetune.mode!r}")
    tuned, run = fine_tune(bundle, records, held, tcfg)
    tuned.save(out / "checkpoint.npz")
    run.save(out / "run.json")
    result = {"checkpoint": str(out / "checkpoint.npz"), "steps": run.steps}
    if held:
        result["median_mse_before"] = float(np.median(curve_mse(bundle.model(), held)))
        result["median_mse_after"] = float(np.median(curve_mse(tuned.model(), held)))
    return result


def cmd_eval(cfg: RunConfig, explicit: set[str], out: Path) -> dict:
    records, manifest = _load_data(cfg)
    ckpt = _require(cfg.checkpoint, "checkpoint")
    rcfg = cfg.rte
    if "rte.threshold" not in explicit:
        rcfg = replace(rcfg, threshold=_data_cutoff(manifest))
    if ckpt == "oracle":
        predictor = "oracle"
    else:
        bundle = CheckpointBundle.load(ckpt)
        predictor = bundle.model()
        if "rte.context_len" not in explicit:
            rcfg = replace(rcfg, context_len=bundle.model_cfg.context_len)
    regime = cfg.regime if "regime" in explicit else manifest.ranges.regime
    buckets = manifest.buckets or cfg.dataset.buckets or [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9), (10, 11)]
    if cfg.metric not in ("rte", "rmse", "all"):
        raise ConfigValidationError(f"unknown metric {cfg.metric!r}")
    report = evaluate_suite(predictor, records, rcfg, regime=regime, buckets=buckets, sim_cfg=manifest.sim,
                            with_rte=cfg.metric != "rmse")
    report.metadata.update({"checkpoint": ckpt, "dataset": manifest.name})
    report.save(out)
    group = report.groups[f"{regime}/all"]
    result = {"path": str(out / "report.json")}
    for m in ("rte", "rmse"):
        if cfg.metric in (m, "all"):
            result[f"median_{m}"] = group[m]["median"]
    return result


def cmd_probe(cfg: RunConfig, explicit: set[str], out: Path) -> dict:
    records, _ = _load_data(cfg)
    bundle = CheckpointBundle.load(_require(cfg.checkpoint, "checkpoint"))
    records = sorted(records, key=lambda r: r.id)[: cfg.probe.max_records]
    rep = latent_probe(bundle.model(), records, cfg.probe.targets)
    (out / "probe.json").write_text(json.dumps({"kind": "probe", **rep.to_json()}, indent=1) + "\n")
    return {"path": str(out / "probe.json"), "correlations": rep.correlations}


def cmd_plot(report: Path, dest: Path) -> dict:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    if report.suffix == ".tsv":
        data = np.loadtxt(report, delimiter="\t", skiprows=1, ndmin=2)
        with open(report) as fh:
            names = fh.readline().strip().split("\t")
        for j in range(1, data.shape[1]):
            ax.plot(data[:, 0], data[:, j], label=names[j])
        ax.set_xlabel(names[0])
        ax.legend()
    else:
        d = json.loads(report.read_text())
        if "groups" in d:
            keys = [k for k in d["groups"] if not k.endswith("/all")] or list(d["groups"])
            med = [d["groups"][k]["rte"]["median"] for k in keys]
            lo = [d["groups"][k]["rte"]["p5"] for k in keys]
            hi = [d["groups"][k]["rte"]["p95"] for k in keys]
            x = np.arange(len(keys))
            ax.errorbar(x, med, yerr=[np.subtract(med, lo), np.subtract(hi, med)], fmt="o-", capsize=3)
            ax.set_xticks(x, keys, rotation=30, ha="right")
            ax.set_ylabel("RTE")
        elif d.get("kind") == "probe":
            xy = np.asarray(d["coords"])
            ax.scatter(xy[:, 0], xy[:, 1], s=8)
            ax.set_xlabel("PC1")
            ax.set_ylabel("PC2")
        elif d.get("kind") == "sweep":
            sizes = [s["size"] for s in d["sweep"]]
            ax.plot(sizes, [s["median_mse"] for s in d["sweep"]], "o-", label="fine-tuned")
            ax.axhline(d["baseline_median_mse"], ls="--", color="gray", label="unadapted")
            ax.set_xlabel("fine-tuning curves")
            ax.set_ylabel("median MSE (V$^2$)")
            ax.legend()
        elif "train_loss" in d:
            ax.semilogy(d["train_loss"], label="train")
            ax.semilogy(d["val_loss"], label="validation")
            ax.set_xlabel("epoch")
            ax.legend()
        else:
            raise ValueError(f"{report}: unrecognized report format")
    fig.tight_layout()
    dest.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(dest, format="svg")
    plt.close(fig)
    return {"path": str(dest)}


COMMANDS = {
    "generate": cmd_generate, "simulate": cmd_simulate, "train": cmd_train, "finetune": cmd_finetune,
    "eval": cmd_eval, "probe": cmd_probe,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eodbench", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. train.lr=1e-3")
        s.add_argument("--out", dest="output_dir")
        s.add_argument("--seed", type=int)
        s.add_argument("--jobs", type=int)
        if name in ("train", "finetune", "eval", "probe"):
            s.add_argument("--data")
        if name in ("finetune", "eval", "probe"):
            s.add_argument("--checkpoint")
        if name in ("generate", "eval"):
            s.add_argument("--regime", choices=["interpolation", "extrapolation"])
        if name == "eval":
            s.add_argument("--metric", choices=["rte", "rmse", "all"])
        if name == "simulate":
            s.add_argument("--q-max", type=float, dest="simulate.q_max")
            s.add_argument("--r0", type=float, dest="simulate.r0")
            s.add_argument("--const-current", type=float, dest="simulate.const_current")
            s.add_argument("--profile", dest="simulate.profile")
    s = sub.add_parser("plot")
    s.add_argument("report")
    s.add_argument("output")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            result = cmd_plot(Path(args.report), Path(args.output))
        else:
            flags = {k: v for k, v in vars(args).items()
                     if k not in ("command", "config", "set", "verbose")}
            cfg, explicit = load_config(args.config, args.set, flags)
            out = _output_dir(cfg, args.command)
            _write_config(cfg, out, args.command)
            result = COMMANDS[args.command](cfg, explicit, out)
    except ConfigValidationError as e:
        print(f"error\tconfig\t{e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"error\tio\t{e}", file=sys.stderr)
        return 3
    except Exception as e:  # noqa: BLE001 - every failure becomes one parsable line
        print(f"error\t{type(e).__name__}\t{' '.join(str(e).split())}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, **result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
