"""Metrics, grouped reports, latent-space probe and MC-dropout bands."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .dataset import DEFAULT_BUCKETS, Record
from .kernel import KernelRng, derive_seed
from .models import BaseModel, ContextWindow
from .profiles import CurrentProfile
from .simulator import DegradationParams, SimConfig, simulate

# full-scale reference values, kept as report metadata only
REFERENCE_TARGETS = {
    "median_rte_constant_interpolation": 0.02,
    "median_rte_constant_extrapolation": 0.04,
    "probe_pearson_q_max_pc1": 0.96,
    "probe_pearson_r0_pc2": 0.98,
}


class ContractError(ValueError):
    pass


def rmse(pred, truth) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("empty sequences")
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass
class RteConfig:
    lower_fraction: float = 0.70
    upper_fraction: float = 1.30
    step: int = 1  # in sampling periods
    threshold: float = 3.0
    context_len: int = 50
    batch_size: int = 64

    def __post_init__(self):
        if not 0 < self.lower_fraction < 1 < self.upper_fraction:
            raise ValueError("need 0 < lower_fraction < 1 < upper_fraction")
        if self.step < 1:
            raise ValueError("step must be >= 1")

    @property
    def max_error(self) -> float:
        return max(1 - self.lower_fraction, self.upper_fraction - 1)


class SimulatorPredictor:
    """The simulator as a predictor: rebuilds a zero-order-hold profile and re-simulates."""

    def __init__(self, params: DegradationParams, cfg: SimConfig = SimConfig()):
        self.params = params
        self.cfg = cfg

    def __call__(self, samples, ctx=None) -> np.ndarray:
        samples = np.asarray(samples, dtype=np.float64)
        profile = CurrentProfile.from_samples(samples, self.cfg.sampling_period)
        cfg = replace(self.cfg, max_duration=max(self.cfg.max_duration, profile.horizon))
        v = simulate(profile, self.params, cfg).v[: len(samples)]
        return np.concatenate([v, np.full(len(samples) - len(v), v[-1])])

    def predict_many(self, samples_list, ctx=None, batch_size=None):
        return [self(s, ctx) for s in samples_list]


def _predict(predictor, inputs: list[np.ndarray], ctx, batch_size: int) -> list[np.ndarray]:
    if hasattr(predictor, "predict_many"):
        out = predictor.predict_many(inputs, ctx, batch_size=batch_size)
    else:
        out = [predictor(s, ctx) for s in inputs]
    for s, p in zip(inputs, out):
        if len(p) != len(s):
            raise ContractError(f"predictor returned {len(p)} samples for a {len(s)}-sample input")
    return [np.asarray(p) for p in out]


def record_context(record: Record, length: int) -> ContextWindow:
    return ContextWindow.from_record(record.voltage, record.current_samples(), record.sampling_period, length)


def rte(predictor, record: Record, cfg: RteConfig = RteConfig()) -> float:
    """Worst relative EoD timing error over truncated and extended inputs.

    ``predictor(samples, ctx)`` returns one voltage per current sample; an
    optional ``predict_many(list, ctx, batch_size=...)`` is used for batching.
    """
    cur = record.current_samples()
    t0 = len(cur)
    if not record.eod_reached(cfg.threshold):
        raise ValueError(f"{record.id}: ground truth does not reach {cfg.threshold} V")
    ctx = record_context(record, cfg.context_len) if t0 >= cfg.context_len else None
    lengths = range(math.ceil(cfg.lower_fraction * t0 - 1e-9), math.floor(cfg.upper_fraction * t0 + 1e-9) + 1,
                    cfg.step)
    short = [t for t in lengths if 0 < t < t0]
    long = [t for t in lengths if t >= t0]

    e_minus = 0.0
    preds = _predict(predictor, [cur[:t] for t in short], ctx, cfg.batch_size) if short else []
    for t, p in zip(short, preds):
        if p[-1] <= cfg.threshold:
            e_minus = max(e_minus, 1 - t / t0)

    e_plus = 0.0
    for k in range(0, len(long), cfg.batch_size):
        part = long[k:k + cfg.batch_size]
        inputs = [np.concatenate([cur, np.full(t - t0, cur[-1])]) for t in part]
        done = False
        for t, p in zip(part, _predict(predictor, inputs, ctx, cfg.batch_size)):
            if p[-1] > cfg.threshold:
                e_plus = t / t0 - 1
            else:
                done = True
                break
        if done:
            break
    return max(e_minus, e_plus)


def _bucket_of(n: int, buckets) -> str | None:
    for lo, hi in buckets:
        if lo <= n <= hi:
            return f"{lo}-{hi}"
    return None


def _quantiles(x) -> dict:
    x = np.asarray(x, dtype=np.float64)
    return {"median": float(np.median(x)), "p5": float(np.percentile(x, 5)),
            "p95": float(np.percentile(x, 95)), "n": int(len(x))}


@dataclass
class EvalReport:
    rows: list[dict]
    groups: dict[str, dict]
    metadata: dict = field(default_factory=dict)

    @classmethod
    def build(cls, rows: list[dict], metadata: dict | None = None) -> "EvalReport":
        rows = sorted(rows, key=lambda r: (r["regime"], r["id"]))
        keys: dict[str, list[dict]] = {}
        for r in rows:
            keys.setdefault(f"{r['regime']}/all", []).append(r)
            if r["bucket"] is not None:
                keys.setdefault(f"{r['regime']}/{r['bucket']}", []).append(r)
        groups = {
            k: {"rmse": _quantiles([r["rmse"] for r in g]), "rte": _quantiles([r["rte"] for r in g])}
            for k, g in sorted(keys.items())
        }
        return cls(rows, groups, dict(metadata or {}))

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport.build(self.rows + other.rows, {**self.metadata, **other.metadata})

    def median_rte(self, regime: str = "interpolation") -> float:
        return self.groups[f"{regime}/all"]["rte"]["median"]

    def to_json(self) -> dict:
        return {"rows": self.rows, "groups": self.groups, "metadata": self.metadata}

    def table(self) -> str:
        lines = ["group\tn\trmse_median\trmse_p5\trmse_p95\trte_median\trte_p5\trte_p95"]
        for k, g in self.groups.items():
            a, b = g["rmse"], g["rte"]
            lines.append(f"{k}\t{a['n']}\t{a['median']:.6g}\t{a['p5']:.6g}\t{a['p95']:.6g}"
                         f"\t{b['median']:.6g}\t{b['p5']:.6g}\t{b['p95']:.6g}")
        return "\n".join(lines) + "\n"

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(json.dumps(self.to_json(), indent=1) + "\n")
        (d / "report.tsv").write_text(self.table())
        return d


def _predictor_for(predictor, record: Record, sim_cfg: SimConfig):
    if isinstance(predictor, str) and predictor == "oracle":
        return SimulatorPredictor(record.params, sim_cfg)
    return predictor


def evaluate_suite(predictor, records: list[Record], cfg: RteConfig = RteConfig(), regime: str = "interpolation",
                   buckets=DEFAULT_BUCKETS, sim_cfg: SimConfig | None = None, with_rte: bool = True) -> EvalReport:
    """RMSE and RTE per record, grouped by transition bucket within ``regime``.

    ``predictor`` is a model, any ``(samples, ctx)`` callable, or ``"oracle"``.
    """
    if not records:
        raise ValueError("empty dataset")
    sim_cfg = sim_cfg or replace(SimConfig(), v_cutoff=cfg.threshold)
    rows = []
    for r in sorted(records, key=lambda r: r.id):
        p = _predictor_for(predictor, r, replace(sim_cfg, sampling_period=r.sampling_period))
        cur = r.current_samples()
        ctx = record_context(r, cfg.context_len) if len(cur) >= cfg.context_len else None
        pred = _predict(p, [cur], ctx, 1)[0]
        n = r.profile.n_transitions
        rows.append({"id": r.id, "regime": regime, "n_transitions": n, "bucket": _bucket_of(n, buckets),
                     "rmse": rmse(pred, r.voltage), "rte": rte(p, r, cfg) if with_rte else math.nan})
    meta = {"rte": asdict(cfg), "reference": REFERENCE_TARGETS}
    return EvalReport.build(rows, meta)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0:
        warnings.warn("Pearson correlation of a constant series is undefined", RuntimeWarning)
        return math.nan
    return float(np.clip(a @ b / den, -1.0, 1.0))


@dataclass
class ProbeReport:
    coords: np.ndarray
    explained_variance_ratio: np.ndarray
    correlations: dict[str, float]
    ids: list[str]
    pooling: str = "mean"

    def best(self, target: str) -> float:
        vals = [abs(v) for k, v in self.correlations.items() if k.endswith("_" + target) and not math.isnan(v)]
        return max(vals) if vals else math.nan

    def to_json(self) -> dict:
        return {"ids": self.ids, "coords": self.coords.tolist(), "pooling": self.pooling,
                "explained_variance_ratio": self.explained_variance_ratio.tolist(),
                "correlations": self.correlations}


def pca2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Top-2 principal coordinates and explained-variance ratios, sign-fixed."""
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(len(x) - 1, 1)
    w, vecs = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w, vecs = w[order], vecs[:, order]
    comps = vecs[:, :2].copy()
    for j in range(comps.shape[1]):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] *= -1
    total = w.sum()
    ratio = w[:2] / total if total > 0 else np.zeros(2)
    return xc @ comps, ratio


def latent_probe(model: BaseModel, records: list[Record], targets: str = "synthetic") -> ProbeReport:
    """PCA of mean-pooled encoder outputs, correlated with ageing variables."""
    if len(records) < 3:
        raise ValueError("latent probe needs at least 3 records")
    if not hasattr(model, "embed_context"):
        raise TypeError(f"{type(model).__name__} has no encoder to probe")
    emb = np.stack([model.embed_context(record_context(r, model.cfg.context_len)).mean(axis=0)
                    for r in records])
    coords, ratio = pca2(emb)
    if targets == "synthetic":
        series = {"q_max": [r.params.q_max for r in records], "r0": [r.params.r0 for r in records]}
    elif targets == "real":
        series = {"cycle": [r.cycle_index for r in records]}
    else:
        raise ValueError(f"unknown probe targets {targets!r}")
    corr = {f"pc{j + 1}_{name}": pearson(coords[:, j], v) for name, v in series.items() for j in range(2)}
    return ProbeReport(coords, ratio, corr, [r.id for r in records])


def mc_predict(model: BaseModel, ctx: ContextWindow, samples, n_passes: int = 50, seed: int = 0,
               counters=None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard deviation over stochastic forwards with dropout active.

    Pass ``i`` draws its masks from a stream keyed by ``(seed, counters[i])``.
    """
    if n_passes < 2:
        raise ValueError("n_passes must be >= 2")
    counters = list(range(n_passes)) if counters is None else list(counters)
    if len(counters) != n_passes:
        raise ValueError("need one RNG counter per pass")
    samples = np.asarray(samples, dtype=np.float64)
    if model.cfg.dropout_p == 0:
        warnings.warn("dropout_p = 0: MC passes are identical, uncertainty is degenerate", RuntimeWarning)
        v = model(samples, ctx)
        return v, np.zeros_like(v)
    runs = np.stack([model.forward(ctx, samples, mode="mc", rng=KernelRng(derive_seed(seed, c))).v for c in counters])
    return runs.mean(axis=0), runs.std(axis=0)
