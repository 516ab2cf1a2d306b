"""Degradation traces to labeled, normalized model samples.

Also holds the train/test split and the condition-disjoint client
partition used to build the heterogeneous federated setting.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

HOURS_PER_YEAR = 8766.0
WINDOW = 9
FAILURE_RATIO = 0.8  # 1 dB drop in optical output power

SAMPLE_COLUMNS = [f"p{i}" for i in range(WINDOW)] + [
    "beta", "delta", "temp_c", "current_ma", "ttf_years"]


class FeatureError(ValueError):
    """A trace cannot be turned into a sample."""


class ConstantSeriesError(FeatureError):
    pass


class CensoredTraceError(FeatureError):
    pass


@dataclass
class DegradationTrace:
    device_id: str
    temperature_C: float
    current_mA: float
    aperture_um: float
    times_h: List[float]
    powers_mW: List[float]
    true_ttf_h: Optional[float] = None

    def validate(self) -> None:
        t = np.asarray(self.times_h, dtype=float)
        p = np.asarray(self.powers_mW, dtype=float)
        if t.shape != p.shape:
            raise FeatureError(f"{self.device_id}: {t.size} times vs {p.size} powers")
        if t.size < WINDOW:
            raise FeatureError(f"{self.device_id}: {t.size} points, need at least {WINDOW}")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise FeatureError(f"{self.device_id}: times must start at 0 and strictly ascend")
        if np.any(p <= 0) or not np.isfinite(p).all():
            raise FeatureError(f"{self.device_id}: powers must be positive and finite")

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Dict) -> "DegradationTrace":
        return cls(
            device_id=str(d["device_id"]),
            temperature_C=float(d["temperature_C"]),
            current_mA=float(d["current_mA"]),
            aperture_um=float(d["aperture_um"]),
            times_h=[float(v) for v in d["times_h"]],
            powers_mW=[float(v) for v in d["powers_mW"]],
            true_ttf_h=None if d.get("true_ttf_h") is None else float(d["true_ttf_h"]),
        )


@dataclass
class Sample:
    p_seq: Tuple[float, ...]
    beta: float
    delta: float
    temperature_C: float
    current_mA: float
    ttf_years: float

    def row(self) -> List[float]:
        return [*self.p_seq, self.beta, self.delta, self.temperature_C,
                self.current_mA, self.ttf_years]

    @classmethod
    def from_row(cls, row: Sequence[float]) -> "Sample":
        vals = [float(v) for v in row]
        if len(vals) != len(SAMPLE_COLUMNS):
            raise FeatureError(f"sample row has {len(vals)} fields, expected {len(SAMPLE_COLUMNS)}")
        return cls(tuple(vals[:WINDOW]), *vals[WINDOW:])


# ---------------------------------------------------------------------------
# statistical features


def _central_moments(series: Sequence[float]) -> Tuple[float, float, float]:
    x = np.asarray(series, dtype=float)
    if x.size < 3:
        raise FeatureError(f"need at least 3 values, got {x.size}")
    d = x - x.mean()
    m2 = float(np.mean(d * d))
    # relative test: a window of identical readings leaves only rounding noise
    if m2 <= (1e-14 * max(1.0, float(np.max(np.abs(x))))) ** 2:
        raise ConstantSeriesError("constant series")
    return m2, float(np.mean(d ** 3)), float(np.mean(d ** 4))


def skewness(series: Sequence[float]) -> float:
    """Population skewness m3 / m2**1.5."""
    m2, m3, _ = _central_moments(series)
    return m3 / m2 ** 1.5


def kurtosis(series: Sequence[float]) -> float:
    """Population excess kurtosis m4 / m2**2 - 3."""
    m2, _, m4 = _central_moments(series)
    return m4 / (m2 * m2) - 3.0


# ---------------------------------------------------------------------------
# labels and samples


def label_ttf(trace: DegradationTrace) -> float:
    """Time to failure in years: first interpolated drop to 80% of P(0).

    Traces that never cross fall back to ``true_ttf_h``.
    """
    p = np.asarray(trace.powers_mW, dtype=float)
    t = np.asarray(trace.times_h, dtype=float)
    if p.size == 0 or p[0] <= 0:
        raise FeatureError(f"{trace.device_id}: initial power must be positive")
    threshold = FAILURE_RATIO * p[0]
    below = np.nonzero(p[1:] <= threshold)[0]
    if below.size:
        k = int(below[0]) + 1
        p0, p1 = p[k - 1], p[k]
        t0, t1 = t[k - 1], t[k]
        hours = t0 + (p0 - threshold) / (p0 - p1) * (t1 - t0)
    elif trace.true_ttf_h is not None:
        hours = trace.true_ttf_h
    else:
        raise CensoredTraceError(f"{trace.device_id}: censored trace")
    return hours / HOURS_PER_YEAR


def build_sample(trace: DegradationTrace) -> Sample:
    """Un-normalized sample from the first nine monitoring points.

    The power window is expressed relative to the initial reading.
    """
    trace.validate()
    p = np.asarray(trace.powers_mW[:WINDOW], dtype=float)
    rel = p / p[0]
    return Sample(
        p_seq=tuple(float(v) for v in rel),
        beta=kurtosis(rel),
        delta=skewness(rel),
        temperature_C=float(trace.temperature_C),
        current_mA=float(trace.current_mA),
        ttf_years=label_ttf(trace),
    )


@dataclass
class RejectionReport:
    total: int = 0
    accepted: int = 0
    rejected: Dict[str, str] = field(default_factory=dict)


def build_samples(traces: Iterable[DegradationTrace]) -> Tuple[List[Sample], RejectionReport]:
    """Build samples for every usable trace; failures are counted, not raised."""
    samples: List[Sample] = []
    report = RejectionReport()
    for tr in traces:
        report.total += 1
        try:
            samples.append(build_sample(tr))
        except FeatureError as exc:
            report.rejected[tr.device_id] = str(exc)
    report.accepted = len(samples)
    return samples, report


# ---------------------------------------------------------------------------
# normalization


NORM_FEATURES = ("p", "beta", "delta", "temperature_C", "current_mA", "ttf_years")


@dataclass
class NormStats:
    lo: Dict[str, float]
    hi: Dict[str, float]

    def scale(self, feature: str, value):
        return (np.asarray(value, dtype=float) - self.lo[feature]) / (self.hi[feature] - self.lo[feature])

    def unscale(self, feature: str, value):
        return np.asarray(value, dtype=float) * (self.hi[feature] - self.lo[feature]) + self.lo[feature]

    def to_dict(self) -> Dict:
        return {"min": dict(self.lo), "max": dict(self.hi)}

    @classmethod
    def from_dict(cls, d: Dict) -> "NormStats":
        stats = cls({k: float(v) for k, v in d["min"].items()},
                    {k: float(v) for k, v in d["max"].items()})
        missing = set(NORM_FEATURES) - set(stats.lo) | set(NORM_FEATURES) - set(stats.hi)
        if missing:
            raise FeatureError(f"norm stats missing {sorted(missing)}")
        return stats


def _columns(samples: Sequence[Sample]) -> Dict[str, np.ndarray]:
    if not samples:
        raise FeatureError("no samples")
    return {
        "p": np.array([s.p_seq for s in samples], dtype=float).ravel(),
        "beta": np.array([s.beta for s in samples]),
        "delta": np.array([s.delta for s in samples]),
        "temperature_C": np.array([s.temperature_C for s in samples]),
        "current_mA": np.array([s.current_mA for s in samples]),
        "ttf_years": np.array([s.ttf_years for s in samples]),
    }


def normalize_fit(samples: Sequence[Sample]) -> NormStats:
    """Min-max statistics; fit on training samples only.

    All nine power positions share one range.
    """
    cols = _columns(samples)
    lo, hi = {}, {}
    for name in NORM_FEATURES:
        lo[name] = float(cols[name].min())
        hi[name] = float(cols[name].max())
        if not hi[name] > lo[name]:
            raise FeatureError(f"constant feature {name!r}")
    return NormStats(lo, hi)


def normalize_apply(samples: Sequence[Sample], stats: NormStats) -> List[Sample]:
    """Scale every feature and the label; out-of-range values are kept as is."""
    out = []
    for s in samples:
        out.append(Sample(
            p_seq=tuple(float(v) for v in stats.scale("p", s.p_seq)),
            beta=float(stats.scale("beta", s.beta)),
            delta=float(stats.scale("delta", s.delta)),
            temperature_C=float(stats.scale("temperature_C", s.temperature_C)),
            current_mA=float(stats.scale("current_mA", s.current_mA)),
            ttf_years=float(stats.scale("ttf_years", s.ttf_years)),
        ))
    return out


# ---------------------------------------------------------------------------
# splits and partitions


def split_train_test(samples: Sequence, train_fraction: float, seed: int):
    """Seeded shuffle, then floor(f * n) train and the remainder test."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(samples)
    if n == 0:
        raise FeatureError("cannot split an empty sample set")
    order = np.random.default_rng(seed).permutation(n)
    n_train = math.floor(train_fraction * n)
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    return train, test


@dataclass
class ClientDataset:
    client_id: int
    samples: List[Sample]

    @property
    def n_i(self) -> int:
        return len(self.samples)


def temperature_bands(temperatures: Iterable[float], n_clients: int) -> List[List[float]]:
    """Group the distinct temperatures into ``n_clients`` contiguous bands."""
    levels = sorted(set(float(t) for t in temperatures))
    if n_clients < 1:
        raise ValueError(f"n_clients must be >= 1, got {n_clients}")
    if n_clients > len(levels):
        raise FeatureError(
            f"{n_clients} clients requested but only {len(levels)} distinct temperature bands")
    return [list(chunk) for chunk in np.array_split(np.array(levels), n_clients)]


def partition_clients(train_samples: Sequence[Sample], n_clients: int,
                      key=lambda s: s.temperature_C) -> List[ClientDataset]:
    """Condition-disjoint partition: client k holds the k-th temperature band.

    Bands are contiguous runs of distinct temperature levels, lowest first.
    Sample order inside a client follows the input order.
    """
    bands = temperature_bands((key(s) for s in train_samples), n_clients)
    owner = {t: cid for cid, band in enumerate(bands, start=1) for t in band}
    buckets: Dict[int, List[Sample]] = {cid: [] for cid in range(1, n_clients + 1)}
    for s in train_samples:
        buckets[owner[float(key(s))]].append(s)
    return [ClientDataset(cid, buckets[cid]) for cid in range(1, n_clients + 1)]


# ---------------------------------------------------------------------------
# files


def write_samples_csv(path, samples: Sequence[Sample]) -> None:
    """Lossless CSV (shortest round-trip float repr)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMPLE_COLUMNS)
        for s in samples:
            w.writerow([repr(float(v)) for v in s.row()])


def read_samples_csv(path) -> List[Sample]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != SAMPLE_COLUMNS:
            raise FeatureError(f"{path}: unexpected header {header}")
        return [Sample.from_row(row) for row in r]


def write_traces_jsonl(path, traces: Iterable[DegradationTrace], header: Optional[Dict] = None) -> None:
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps({"provenance": header}, sort_keys=True, separators=(",", ":")) + "\n")
        for tr in traces:
            fh.write(tr.to_json() + "\n")


def read_traces_jsonl(path) -> Tuple[Optional[Dict], List[DegradationTrace]]:
    header = None
    traces = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "provenance" in obj and not traces and header is None:
                header = obj["provenance"]
                continue
            traces.append(DegradationTrace.from_dict(obj))
    return header, traces
