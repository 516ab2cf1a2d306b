"""Synthetic VCSEL accelerated-aging traces with known time to failure.

Relative output power follows ``1 - 0.25 * (t / tau) ** gamma`` with a
per-device shape exponent and an Arrhenius/current-accelerated time scale
``tau``. The noise-free 80% crossing is therefore ``tau * 0.8 ** (1/gamma)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from fedlaser.features import DegradationTrace, FeatureError, build_sample

BOLTZMANN_EV = 8.617333262e-5
ZERO_CELSIUS_K = 273.15
END_OF_TEST_RATIO = 0.5  # devices are pulled from the oven below 50% of P(0)

DEFAULT_BAND_WEIGHTS = (251, 333, 389, 389, 433, 467, 534, 601)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass
class GeneratorConfig:
    device_count: int = 3397
    temp_range_C: Tuple[float, float] = (50.0, 150.0)
    n_temp_levels: int = 16
    current_range_mA: Tuple[float, float] = (6.0, 9.0)
    n_current_levels: int = 5
    test_durations_h: Tuple[float, ...] = (3500.0, 15000.0)
    sampling_interval_h: float = 350.0
    activation_energy_eV: float = 0.4
    current_exponent: float = 2.0
    gammas: Tuple[float, ...] = (0.7, 1.0, 1.5)
    tau0_h: float = 80000.0
    noise_sigma: float = 0.005
    band_weights: Tuple[float, ...] = DEFAULT_BAND_WEIGHTS
    p0_range_mW: Tuple[float, float] = (1.0, 3.0)
    apertures_um: Tuple[float, ...] = (4.0, 6.0, 8.0, 10.0)
    seed: int = 2022

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))
        self.validate()

    def validate(self) -> None:
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"generator.{key}", msg)

        need(isinstance(self.device_count, int) and self.device_count >= 1,
             "device_count", "must be a positive integer")
        lo, hi = self.temp_range_C
        need(-ZERO_CELSIUS_K < lo < hi, "temp_range_C", "must be an increasing pair above absolute zero")
        clo, chi = self.current_range_mA
        need(0 < clo < chi, "current_range_mA", "must be an increasing positive pair")
        need(self.n_temp_levels >= len(self.band_weights), "n_temp_levels",
             "needs at least one level per band")
        need(self.n_current_levels >= 1, "n_current_levels", "must be >= 1")
        need(len(self.test_durations_h) >= 1
             and set(self.test_durations_h) <= {3500.0, 15000.0},
             "test_durations_h", "durations must be drawn from {3500, 15000}")
        need(self.sampling_interval_h > 0, "sampling_interval_h", "must be positive")
        need(self.sampling_interval_h * 9 < min(self.test_durations_h) + 1e-9,
             "sampling_interval_h", "shortest test must hold at least 10 samples")
        need(self.activation_energy_eV >= 0, "activation_energy_eV", "must be >= 0")
        need(self.current_exponent >= 0, "current_exponent", "must be >= 0")
        need(len(self.gammas) >= 1 and all(g > 0 for g in self.gammas), "gammas",
             "must be positive")
        need(self.tau0_h > 0, "tau0_h", "must be positive")
        need(self.noise_sigma >= 0, "noise_sigma", "must be >= 0")
        need(len(self.band_weights) >= 1 and all(w > 0 for w in self.band_weights),
             "band_weights", "must be positive")
        need(0 < self.p0_range_mW[0] <= self.p0_range_mW[1], "p0_range_mW",
             "must be a positive non-decreasing pair")
        need(len(self.apertures_um) >= 1, "apertures_um", "must be non-empty")
        need(isinstance(self.seed, int) and 0 <= self.seed < 2 ** 64, "seed",
             "must be a 64-bit unsigned integer")

    @property
    def temperature_levels(self) -> np.ndarray:
        return np.linspace(*self.temp_range_C, self.n_temp_levels)

    @property
    def current_levels(self) -> np.ndarray:
        if self.n_current_levels == 1:
            return np.array([0.5 * sum(self.current_range_mA)])
        return np.linspace(*self.current_range_mA, self.n_current_levels)

    @property
    def reference_current_mA(self) -> float:
        return 0.5 * (self.current_range_mA[0] + self.current_range_mA[1])

    def to_dict(self) -> Dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"generator.{key}", "unknown key")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError("generator", str(exc)) from None


def degradation_timescale(temperature_C: float, current_mA: float, cfg: GeneratorConfig) -> float:
    """Accelerated degradation time scale tau in hours.

    Equals ``tau0_h`` at the lowest configured temperature and the
    mid-range current, and shrinks with hotter or harder-driven devices.
    """
    if temperature_C <= -ZERO_CELSIUS_K:
        raise ValueError(f"non-physical temperature {temperature_C} C")
    if current_mA <= 0:
        raise ValueError(f"non-physical current {current_mA} mA")
    t_k = temperature_C + ZERO_CELSIUS_K
    t_ref = cfg.temp_range_C[0] + ZERO_CELSIUS_K
    arrhenius = math.exp(cfg.activation_energy_eV / BOLTZMANN_EV * (1.0 / t_k - 1.0 / t_ref))
    return cfg.tau0_h * arrhenius * (cfg.reference_current_mA / current_mA) ** cfg.current_exponent


def analytic_ttf_h(tau_h: float, gamma: float) -> float:
    return tau_h * 0.8 ** (1.0 / gamma)


def simulate_trace(cfg: GeneratorConfig, rng: np.random.Generator, *,
                   device_id: str = "D0",
                   temperature_C: Optional[float] = None,
                   current_mA: Optional[float] = None,
                   gamma: Optional[float] = None,
                   duration_h: Optional[float] = None) -> DegradationTrace:
    """One device's aging record on the regular monitoring grid.

    Conditions not given explicitly are drawn from ``rng``. Monitoring
    stops at the test duration or once the noise-free power would fall
    below half its initial value, whichever comes first.
    """
    # draw every condition even when overridden so the stream layout is fixed
    t_draw = float(rng.choice(cfg.temperature_levels))
    i_draw = float(rng.choice(cfg.current_levels))
    g_draw = float(rng.choice(np.asarray(cfg.gammas, dtype=float)))
    d_draw = float(rng.choice(np.asarray(cfg.test_durations_h, dtype=float)))
    p0 = float(rng.uniform(*cfg.p0_range_mW))
    aperture = float(rng.choice(np.asarray(cfg.apertures_um, dtype=float)))

    T = t_draw if temperature_C is None else float(temperature_C)
    I = i_draw if current_mA is None else float(current_mA)
    gam = g_draw if gamma is None else float(gamma)
    dur = d_draw if duration_h is None else float(duration_h)

    tau = degradation_timescale(T, I, cfg)
    t_end = min(dur, tau * (4.0 * (1.0 - END_OF_TEST_RATIO)) ** (1.0 / gam))
    n = int(math.floor(t_end / cfg.sampling_interval_h + 1e-9)) + 1
    times = np.arange(n) * cfg.sampling_interval_h
    clean = 1.0 - 0.25 * (times / tau) ** gam
    noise = rng.normal(0.0, cfg.noise_sigma, size=n) if cfg.noise_sigma > 0 else np.zeros(n)
    powers = p0 * clean * (1.0 + noise)
    return DegradationTrace(
        device_id=device_id,
        temperature_C=T,
        current_mA=I,
        aperture_um=aperture,
        times_h=times.tolist(),
        powers_mW=powers.tolist(),
        true_ttf_h=analytic_ttf_h(tau, gam),
    )


def band_counts(device_count: int, weights: Sequence[float]) -> List[int]:
    """Largest-remainder apportionment of devices to temperature bands."""
    w = np.asarray(weights, dtype=float)
    quotas = device_count * w / w.sum()
    counts = np.floor(quotas).astype(int)
    short = device_count - int(counts.sum())
    order = sorted(range(len(w)), key=lambda k: (-(quotas[k] - counts[k]), k))
    for k in order[:short]:
        counts[k] += 1
    return counts.tolist()


@dataclass
class CorpusStats:
    attempts: int = 0
    rejected: Dict[str, str] = field(default_factory=dict)


def generate_corpus(cfg: GeneratorConfig, stats: Optional[CorpusStats] = None) -> List[DegradationTrace]:
    """``cfg.device_count`` usable traces, stratified over temperature bands.

    Each device gets its own RNG stream derived from ``(seed, index,
    attempt)``; a trace that cannot produce a sample is redrawn on the
    next attempt stream, so the usable count is exact.
    """
    stats = stats if stats is not None else CorpusStats()
    bands = np.array_split(cfg.temperature_levels, len(cfg.band_weights))
    traces: List[DegradationTrace] = []
    index = 0
    for band, count in zip(bands, band_counts(cfg.device_count, cfg.band_weights)):
        for _ in range(count):
            device_id = f"D{index:05d}"
            for attempt in range(1000):
                stats.attempts += 1
                rng = np.random.default_rng([cfg.seed, index, attempt])
                temp = float(band[int(rng.integers(len(band)))])
                tr = simulate_trace(cfg, rng, device_id=device_id, temperature_C=temp)
                try:
                    build_sample(tr)
                except FeatureError as exc:
                    stats.rejected[f"{device_id}#{attempt}"] = str(exc)
                    continue
                traces.append(tr)
                break
            else:  # pragma: no cover - needs a pathological config
                raise RuntimeError(f"{device_id}: no usable trace after 1000 attempts")
            index += 1
    return traces
