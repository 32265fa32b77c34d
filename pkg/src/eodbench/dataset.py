"""Synthetic corpus generation, storage, splitting, and real-data ingestion.

A stored dataset is a directory holding ``records.jsonl`` (one record per
line) and ``manifest.json``. Floats are written with ``repr`` so they
round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .profiles import CurrentProfile, ProfileSamplerConfig, sample_profile, to_samples
from .simulator import Q_MAX_RANGE, R0_RANGE, DegradationParams, SimConfig, simulate

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RECORDS_FILE = "records.jsonl"
MANIFEST_FILE = "manifest.json"
MAX_DRAWS_PER_RECORD = 1000

# transition-count buckets used for grouped reporting
DEFAULT_BUCKETS = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9), (10, 11)]


class DatasetError(Exception):
    pass


class SchemaVersionError(DatasetError):
    pass


class CorruptDatasetError(DatasetError):
    pass


class GenerationError(DatasetError):
    pass


class IngestError(DatasetError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = Path(path)
        self.reason = reason


@dataclass
class Record:
    id: str
    source: str  # "synthetic" | "real"
    profile: CurrentProfile
    sampling_period: float
    voltage: np.ndarray
    params: DegradationParams | None = None
    battery_id: str | None = None
    cycle_index: int | None = None

    def __post_init__(self):
        self.voltage = np.asarray(self.voltage, dtype=np.float64)
        if self.source not in ("synthetic", "real"):
            raise ValueError(f"unknown source {self.source!r}")

    def __len__(self):
        return len(self.voltage)

    @property
    def duration(self) -> float:
        return (len(self.voltage) - 1) * self.sampling_period

    def current_samples(self) -> np.ndarray:
        """Current on the voltage grid, padded with the last value if the profile is short."""
        i = to_samples(self.profile, self.sampling_period)
        n = len(self.voltage)
        if len(i) >= n:
            return i[:n]
        return np.concatenate([i, np.full(n - len(i), i[-1])])

    def eod_reached(self, threshold: float) -> bool:
        return bool(self.voltage[-1] <= threshold)

    def __eq__(self, other):
        if not isinstance(other, Record):
            return NotImplemented
        return (
            self.id == other.id
            and self.source == other.source
            and self.profile == other.profile
            and self.sampling_period == other.sampling_period
            and np.array_equal(self.voltage, other.voltage)
            and self.params == other.params
            and self.battery_id == other.battery_id
            and self.cycle_index == other.cycle_index
        )

    __hash__ = None


@dataclass
class DegradationRange:
    q_max_min: float = Q_MAX_RANGE[0]
    q_max_max: float = Q_MAX_RANGE[1]
    r0_min: float = R0_RANGE[0]
    r0_max: float = R0_RANGE[1]
    regime: str = "interpolation"
    # extrapolation draws from the box widened by this fraction of each bound
    margin: float = 0.10

    def __post_init__(self):
        if self.regime not in ("interpolation", "extrapolation"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if not 0 < self.margin <= 0.10:
            raise ValueError("extrapolation margin must lie in (0, 0.10]")
        if not (0 < self.q_max_min < self.q_max_max and 0 <= self.r0_min < self.r0_max):
            raise ValueError("degradation bounds must be ordered and positive")

    def contains(self, p: DegradationParams) -> bool:
        return (
            self.q_max_min <= p.q_max <= self.q_max_max and self.r0_min <= p.r0 <= self.r0_max
        )

    def outer(self) -> tuple[float, float, float, float]:
        m = self.margin
        return (
            self.q_max_min * (1 - m), self.q_max_max * (1 + m),
            self.r0_min * (1 - m), self.r0_max * (1 + m),
        )

    def sample(self, rng: np.random.Generator) -> DegradationParams:
        if self.regime == "interpolation":
            return DegradationParams(
                float(rng.uniform(self.q_max_min, self.q_max_max)),
                float(rng.uniform(self.r0_min, self.r0_max)),
            )
        q_lo, q_hi, r_lo, r_hi = self.outer()
        while True:
            p = DegradationParams(float(rng.uniform(q_lo, q_hi)), float(rng.uniform(r_lo, r_hi)))
            if not self.contains(p):
                return p


@dataclass
class DatasetManifest:
    name: str
    master_seed: int = 0
    count: int = 100
    sampler: ProfileSamplerConfig = field(default_factory=ProfileSamplerConfig)
    ranges: DegradationRange = field(default_factory=DegradationRange)
    sim: SimConfig = field(default_factory=SimConfig)
    min_duration: float = 500.0
    max_duration: float = 20000.0
    buckets: list[tuple[int, int]] | None = None
    train_fraction: float = 0.85
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must lie in (0, 1]")
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if self.buckets is not None:
            self.buckets = [tuple(int(x) for x in b) for b in self.buckets]

    def record_id(self, j: int) -> str:
        return f"{self.name}-{j:06d}"

    def split_of(self, record_id: str) -> str:
        h = hashlib.sha256(f"{self.master_seed}:{record_id}".encode()).digest()
        u = int.from_bytes(h[:8], "big") / 2.0**64
        return "train" if u < self.train_fraction else "validation"

    def to_json(self, ids: list[str]) -> dict:
        split = {"train": self.train_fraction, "validation": 1.0 - self.train_fraction,
                 "assignment": {"train": [], "validation": []}}
        for rid in ids:
            split["assignment"][self.split_of(rid)].append(rid)
        return {
            "name": self.name,
            "schema_version": self.schema_version,
            "master_seed": self.master_seed,
            "sampler": {
                "profile": asdict(self.sampler),
                "sim": asdict(self.sim),
                "min_duration": self.min_duration,
                "max_duration": self.max_duration,
                "buckets": [list(b) for b in self.buckets] if self.buckets is not None else None,
            },
            "ranges": asdict(self.ranges),
            "count": self.count,
            "split": split,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise SchemaVersionError(
                f"unsupported schema_version {d.get('schema_version')!r}, expected {SCHEMA_VERSION}"
            )
        s = d["sampler"]
        return cls(
            name=d["name"],
            master_seed=d["master_seed"],
            count=d["count"],
            sampler=ProfileSamplerConfig(**s["profile"]),
            ranges=DegradationRange(**d["ranges"]),
            sim=SimConfig(**s["sim"]),
            min_duration=s["min_duration"],
            max_duration=s["max_duration"],
            buckets=s["buckets"],
            train_fraction=d["split"]["train"],
        )


def record_seed(master_seed: int, j: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(j)])


def _accept(manifest: DatasetManifest, curve) -> bool:
    if not curve.eod_reached:
        return False
    duration = (len(curve.v) - 1) * curve.sampling_period
    return manifest.min_duration <= duration <= manifest.max_duration


def generate_record(manifest: DatasetManifest, j: int) -> Record:
    """Draw, simulate and filter record ``j``; redraw from the same stream until accepted."""
    rng = np.random.default_rng(record_seed(manifest.master_seed, j))
    sampler = manifest.sampler
    if manifest.buckets:
        lo, hi = manifest.buckets[j % len(manifest.buckets)]
        sampler = replace(sampler, n_transitions_min=lo, n_transitions_max=hi)
    for _ in range(MAX_DRAWS_PER_RECORD):
        params = manifest.ranges.sample(rng)
        profile = sample_profile(rng, sampler)
        curve = simulate(profile, params, manifest.sim)
        if _accept(manifest, curve):
            return Record(
                id=manifest.record_id(j), source="synthetic", profile=profile,
                sampling_period=manifest.sim.sampling_period, voltage=curve.v, params=params,
            )
    raise GenerationError(
        f"record {j}: no draw passed the duration filter after {MAX_DRAWS_PER_RECORD} attempts"
    )


def _generate_chunk(args):
    manifest, idx = args
    return [generate_record(manifest, j) for j in idx]


def generate_records(manifest: DatasetManifest, jobs: int = 1) -> list[Record]:
    idx = list(range(manifest.count))
    if jobs <= 1 or manifest.count < 2:
        return [generate_record(manifest, j) for j in idx]
    chunks = [idx[k::jobs] for k in range(jobs)]
    out: dict[int, Record] = {}
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        for chunk, recs in zip(chunks, ex.map(_generate_chunk, [(manifest, c) for c in chunks])):
            out.update(zip(chunk, recs))
    return [out[j] for j in idx]


def generate_dataset(manifest: DatasetManifest, path, jobs: int = 1) -> list[Record]:
    records = generate_records(manifest, jobs=jobs)
    save_dataset(records, manifest, path)
    return records


def make_test_sets(
    manifest: DatasetManifest, regime: str, transitions_buckets=None, path=None, jobs: int = 1
) -> tuple[list[Record], DatasetManifest]:
    """Test-set variant of ``manifest``: regime-specific degradation draws and per-bucket profiles.

    Buckets may reach beyond the training transition range.
    """
    ranges = replace(manifest.ranges, regime=regime)
    buckets = [tuple(b) for b in transitions_buckets] if transitions_buckets else None
    if buckets:
        hi = max(b[1] for b in buckets)
        sampler = replace(manifest.sampler, n_transitions_max=max(hi, manifest.sampler.n_transitions_max))
    else:
        sampler = manifest.sampler
    test_manifest = replace(
        manifest, name=f"{manifest.name}-{regime}", ranges=ranges, buckets=buckets, sampler=sampler,
    )
    records = generate_records(test_manifest, jobs=jobs)
    if path is not None:
        save_dataset(records, test_manifest, path)
    return records, test_manifest


def split_records(records: list[Record], manifest: DatasetManifest) -> tuple[list[Record], list[Record]]:
    train, val = [], []
    for r in records:
        (train if manifest.split_of(r.id) == "train" else val).append(r)
    return train, val


def _record_to_json(r: Record) -> str:
    d = {"id": r.id, "source": r.source}
    if r.battery_id is not None:
        d["battery_id"] = r.battery_id
    if r.cycle_index is not None:
        d["cycle_index"] = r.cycle_index
    if r.params is not None:
        d["q_max"] = r.params.q_max
        d["r0"] = r.params.r0
    d["sampling_period"] = r.sampling_period
    d["segment_values"] = r.profile.segment_values.tolist()
    d["segment_end_times"] = r.profile.segment_end_times.tolist()
    d["voltage"] = r.voltage.tolist()
    return json.dumps(d, separators=(",", ":"))


def _record_from_json(d: dict) -> Record:
    params = None
    if "q_max" in d:
        params = DegradationParams(d["q_max"], d["r0"])
    return Record(
        id=d["id"], source=d["source"],
        profile=CurrentProfile(np.array(d["segment_values"]), np.array(d["segment_end_times"])),
        sampling_period=d["sampling_period"], voltage=np.array(d["voltage"], dtype=np.float64),
        params=params, battery_id=d.get("battery_id"), cycle_index=d.get("cycle_index"),
    )


def save_dataset(records: list[Record], manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = replace(manifest, count=len(records))
    with open(path / RECORDS_FILE, "w") as f:
        for r in records:
            f.write(_record_to_json(r))
            f.write("\n")
    with open(path / MANIFEST_FILE, "w") as f:
        json.dump(manifest.to_json([r.id for r in records]), f, indent=1)
        f.write("\n")
    return path


def load_dataset(path) -> tuple[list[Record], DatasetManifest]:
    path = Path(path)
    try:
        with open(path / MANIFEST_FILE) as f:
            manifest = DatasetManifest.from_json(json.load(f))
    except json.JSONDecodeError as e:
        raise CorruptDatasetError(f"{path / MANIFEST_FILE}: {e}") from e
    records = []
    with open(path / RECORDS_FILE) as f:
        text = f.read()
    if text and not text.endswith("\n"):
        raise CorruptDatasetError(f"{path / RECORDS_FILE}: truncated final line")
    for n, line in enumerate(text.splitlines(), 1):
        try:
            records.append(_record_from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError) as e:
            raise CorruptDatasetError(f"{path / RECORDS_FILE}:{n}: {e}") from e
    if len(records) != manifest.count:
        raise CorruptDatasetError(
            f"{path}: manifest lists {manifest.count} records, file holds {len(records)}"
        )
    return records, manifest


_CYCLE_RE = re.compile(r"^(?P<battery>.+)_cycle(?P<k>\d+)\.csv$")
REAL_COLUMNS = ("time_s", "current_A", "voltage_V")


def _read_cycle(path: Path, period: float, current: float) -> Record:
    m = _CYCLE_RE.match(path.name)
    if m is None:
        raise IngestError(path, "file name does not match <battery_id>_cycle<k>.csv")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(REAL_COLUMNS):
            raise IngestError(path, f"expected header {','.join(REAL_COLUMNS)}, got {header}")
        try:
            rows = np.array([[float(x) for x in row] for row in reader if row], dtype=np.float64)
        except ValueError as e:
            raise IngestError(path, f"non-numeric value: {e}") from e
    if rows.ndim != 2 or rows.shape[0] < 2 or rows.shape[1] != 3:
        raise IngestError(path, "need at least two rows of three columns")
    t, _, v = rows.T
    if np.any(np.diff(t) <= 0):
        raise IngestError(path, "time_s is not strictly increasing")
    if np.any(v <= 0) or np.any(v >= 4.3):
        raise IngestError(path, "voltage outside (0, 4.3) V")
    n = math.floor((t[-1] - t[0]) / period + 1e-9) + 1
    grid = t[0] + np.arange(n) * period
    voltage = np.interp(grid, t, v)
    horizon = max(n - 1, 1) * period
    return Record(
        id=f"{m['battery']}_cycle{int(m['k'])}", source="real",
        profile=CurrentProfile.constant(current, horizon), sampling_period=period,
        voltage=voltage, battery_id=m["battery"], cycle_index=int(m["k"]),
    )


def ingest_real(
    root, period: float = 2.0, current: float = 2.0, cutoff: float = 3.2
) -> tuple[list[Record], list[IngestError]]:
    """Read ``root/<battery>/<battery>_cycle<k>.csv`` files into real records.

    Bad files are reported in the second return value and skipped.
    """
    root = Path(root)
    records, errors = [], []
    files = sorted(
        root.glob("*/*.csv"),
        key=lambda p: (p.parent.name, int(m["k"]) if (m := _CYCLE_RE.match(p.name)) else -1, p.name),
    )
    for p in files:
        try:
            rec = _read_cycle(p, period, current)
        except IngestError as e:
            log.error("ingest failed: %s", e)
            errors.append(e)
            continue
        if not rec.eod_reached(cutoff):
            log.warning("%s ends at %.3f V, above the %.2f V cutoff", p, rec.voltage[-1], cutoff)
        records.append(rec)
    return records, errors


def real_manifest(name: str, records: list[Record], period: float = 2.0, cutoff: float = 3.2,
                  seed: int = 0) -> DatasetManifest:
    return DatasetManifest(
        name=name, master_seed=seed, count=len(records),
        sim=SimConfig(sampling_period=period, v_cutoff=cutoff), min_duration=0.0,
    )
