"""Lumped two-volume surrogate of a single Li-ion cell under discharge.

State: surface charge, bulk charge, and one first-order overpotential lag.
Terminal voltage is an OCV curve of the surface state of charge minus the
ohmic drop ``i * r0`` and the lag voltage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numba
import numpy as np

from .profiles import CurrentProfile


@dataclass(frozen=True)
class DegradationParams:
    q_max: float  # C
    r0: float  # ohm

    def __post_init__(self):
        if not self.q_max > 0:
            raise ValueError(f"q_max must be positive, got {self.q_max}")
        if not self.r0 >= 0:
            raise ValueError(f"r0 must be non-negative, got {self.r0}")


# Training box for the degradation parameters (C, ohm).
Q_MAX_RANGE = (5000.0, 8000.0)
R0_RANGE = (0.017215, 0.45)


@dataclass(frozen=True)
class SimConfig:
    sampling_period: float = 2.0
    inner_step: float = 0.1
    v_full: float = 4.2
    v_cutoff: float = 3.0
    max_duration: float = 20000.0
    u0: float = 3.41
    a_lin: float = 0.55
    a_log: float = 0.10
    a_sat: float = 0.06
    f_surface: float = 0.2
    d_diff: float = 5e-3
    r_lag: float = 0.05
    tau_lag: float = 100.0
    x_clip: float = 0.01

    def __post_init__(self):
        ratio = self.sampling_period / self.inner_step
        if self.inner_step <= 0 or abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError(
                f"inner_step {self.inner_step} must divide sampling_period {self.sampling_period}"
            )
        if not self.v_cutoff < self.v_full:
            raise ValueError("v_cutoff must be below v_full")
        if not 0 < self.f_surface < 1:
            raise ValueError("f_surface must lie in (0, 1)")
        if not 0 < self.x_clip <= 0.01:
            raise ValueError("x_clip must lie in (0, 0.01]")
        if self.tau_lag <= 0 or self.d_diff < 0 or self.r_lag < 0:
            raise ValueError("tau_lag must be positive, d_diff and r_lag non-negative")

    @property
    def steps_per_sample(self) -> int:
        return int(round(self.sampling_period / self.inner_step))

    def ideal(self) -> "SimConfig":
        """Fast diffusion, no lag: EoD is set by the OCV curve and ohmic drop alone."""
        return replace(self, d_diff=1.0, r_lag=0.0)


@dataclass(frozen=True)
class BatteryState:
    q_surface: float
    q_bulk: float
    v_lag: float = 0.0
    t: float = 0.0

    @classmethod
    def full(cls, params: DegradationParams, cfg: SimConfig) -> "BatteryState":
        return cls(cfg.f_surface * params.q_max, (1 - cfg.f_surface) * params.q_max, 0.0, 0.0)


@dataclass(frozen=True)
class VoltageCurve:
    t0: float
    sampling_period: float
    v: np.ndarray
    eod_reached: bool

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.v)) * self.sampling_period


def ocv(x: float, cfg: SimConfig = SimConfig()) -> float:
    if not math.isfinite(x):
        raise ValueError(f"state of charge must be finite, got {x}")
    return _ocv(float(x), cfg.u0, cfg.a_lin, cfg.a_log, cfg.a_sat, cfg.x_clip)


@numba.njit(cache=True)
def _ocv(x, u0, a_lin, a_log, a_sat, x_clip):
    # upper clip keeps the saturation log argument >= x_clip
    if x < x_clip:
        x = x_clip
    elif x > 1.0 + x_clip:
        x = 1.0 + x_clip
    return u0 + a_lin * x + a_log * math.log(x) - a_sat * math.log(1.0 + 2.0 * x_clip - x)


def step(
    state: BatteryState, i_load: float, dt: float, params: DegradationParams, cfg: SimConfig
) -> BatteryState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    qs, qb, vl = _euler(
        state.q_surface, state.q_bulk, state.v_lag, i_load, dt,
        cfg.f_surface, cfg.d_diff, cfg.r_lag, cfg.tau_lag,
    )
    return BatteryState(qs, qb, vl, state.t + dt)


@numba.njit(cache=True)
def _euler(qs, qb, vl, i_load, dt, f, d, r_lag, tau):
    flux = d * (qb / (1.0 - f) - qs / f)
    qs_new = qs + dt * (-i_load + flux)
    qb_new = qb - dt * flux
    vl_new = vl + dt * (i_load * r_lag - vl) / tau
    if qs_new < 0.0:
        qs_new = 0.0
    if qb_new < 0.0:
        qb_new = 0.0
    return qs_new, qb_new, vl_new


def terminal_voltage(
    state: BatteryState, i_load: float, params: DegradationParams, cfg: SimConfig
) -> float:
    x = state.q_surface / (cfg.f_surface * params.q_max)
    return ocv(x, cfg) - i_load * params.r0 - state.v_lag


@numba.njit(cache=True)
def _simulate(values, ends, n_samples, steps_per_sample, inner, q_max, r0, v_cutoff,
              u0, a_lin, a_log, a_sat, x_clip, f, d, r_lag, tau):
    out = np.empty(n_samples)
    qs = f * q_max
    qb = (1.0 - f) * q_max
    vl = 0.0
    n_seg = len(values)
    seg = 0
    k = 0  # inner step counter; time is k * inner to avoid drift
    for j in range(n_samples):
        t = k * inner
        while seg < n_seg - 1 and t >= ends[seg]:
            seg += 1
        i = values[seg]
        v = _ocv(qs / (f * q_max), u0, a_lin, a_log, a_sat, x_clip) - i * r0 - vl
        out[j] = v
        if v <= v_cutoff:
            return out[: j + 1], True
        if j == n_samples - 1:
            break
        for _ in range(steps_per_sample):
            t = k * inner
            while seg < n_seg - 1 and t >= ends[seg]:
                seg += 1
            qs, qb, vl = _euler(qs, qb, vl, values[seg], inner, f, d, r_lag, tau)
            k += 1
    return out, False


def simulate(profile: CurrentProfile, params: DegradationParams, cfg: SimConfig = SimConfig()) -> VoltageCurve:
    """Integrate from full charge and sample the terminal voltage every sampling period.

    Stops at the first sample at or below ``cfg.v_cutoff`` (included) or at
    ``min(profile.horizon, cfg.max_duration)``.
    """
    horizon = min(profile.horizon, cfg.max_duration)
    if horizon <= 0:
        raise ValueError(f"profile horizon must be positive, got {horizon}")
    n_samples = math.floor(horizon / cfg.sampling_period + 1e-9) + 1
    v, reached = _simulate(
        profile.segment_values, profile.segment_end_times, n_samples,
        cfg.steps_per_sample, cfg.inner_step, float(params.q_max), float(params.r0), cfg.v_cutoff,
        cfg.u0, cfg.a_lin, cfg.a_log, cfg.a_sat, cfg.x_clip,
        cfg.f_surface, cfg.d_diff, cfg.r_lag, cfg.tau_lag,
    )
    return VoltageCurve(0.0, cfg.sampling_period, v, bool(reached))


def eod_time(curve: VoltageCurve, threshold: float) -> float | None:
    if len(curve.v) == 0:
        raise ValueError("empty curve")
    below = np.flatnonzero(curve.v <= threshold)
    if len(below) == 0:
        return None
    return curve.t0 + int(below[0]) * curve.sampling_period

