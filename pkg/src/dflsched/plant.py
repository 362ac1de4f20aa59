"""Synthetic ground-truth building plant.

A nonlinear, noisy multi-zone thermal model with an internal
setpoint-tracking controller.  It exposes only what a real building
management system could observe: hourly zone temperatures and ex-post
electrical powers.  No gradients, by construction: two thermal nodes per
zone, a nonlinear envelope convection law, an ambient-dependent cooling
COP, duct losses, scheduled internal gains and process noise all separate
it from the affine RC model the optimizer learns.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rc
from .rc import ThetaParams, ZoneTopology


class PlantError(Exception):
    pass


@dataclass(frozen=True)
class PlantSpec:
    """Physical description of the plant; all ratings thermal kW."""

    topology: ZoneTopology
    c_air: np.ndarray  # (Z,) kWh/degC
    c_mass: np.ndarray  # (Z,) kWh/degC
    r_env: np.ndarray  # (Z,) degC/kW at the reference 10 degC delta
    r_mass: np.ndarray  # (Z,) degC/kW air-mass coupling
    r_zone: float  # degC/kW between adjacent zones
    convection_exponent: float  # envelope heat flow ~ dT^exponent
    reheat_rating: np.ndarray  # (Z,) kW thermal
    ahu_heat_rating: np.ndarray  # (F,) kW thermal
    ahu_cool_rating: np.ndarray  # (F,) kW thermal
    cop_ref: float  # COP at cop_ref_temp
    cop_ref_temp: float
    cop_slope: float  # COP drop per degC of ambient above reference
    cop_min: float
    cop_max: float
    duct_loss: float  # fraction of AHU thermal lost in ducts
    fan_coeff: float  # electrical kW per thermal kW moved through the AHU
    gain_occupied: np.ndarray  # (Z,) kW during occupied weekday hours
    gain_base: np.ndarray  # (Z,) kW otherwise
    solar_gain_peak: float  # kW per zone at solar noon
    noise_std: float  # kW, Gaussian on gains per substep
    kp: float  # controller proportional gain, kW/degC
    ki: float  # controller integral gain, kW/(degC h)
    substeps: int = 12
    # minimum-airflow ventilation: AHU fan electricity drawn per occupied
    # zone regardless of thermal demand, attributed to the active thermal
    # channel per the airflow-share accounting convention
    vent_fan_kw: np.ndarray | None = None

    def __post_init__(self):
        z = self.topology.num_zones
        if self.vent_fan_kw is None:
            object.__setattr__(self, "vent_fan_kw", np.zeros(z))
        for name in ("c_air", "c_mass", "r_env", "r_mass", "reheat_rating",
                     "gain_occupied", "gain_base", "vent_fan_kw"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (z,):
                raise PlantError(f"{name} must have length {z}")
            object.__setattr__(self, name, v)
        f = self.topology.num_floors
        for name in ("ahu_heat_rating", "ahu_cool_rating"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (f,):
                raise PlantError(f"{name} must have length {f}")
            object.__setattr__(self, name, v)
        if np.any(self.reheat_rating <= 0) or np.any(self.ahu_heat_rating <= 0) \
                or np.any(self.ahu_cool_rating <= 0):
            raise PlantError("equipment ratings must be positive")
        if not 0 <= self.duct_loss < 1:
            raise PlantError("duct loss must be in [0, 1)")
        if self.noise_std < 0:
            raise PlantError("noise std must be nonnegative")
        for amb in (-20.0, 45.0):
            if self.cop(amb) <= 0:
                raise PlantError("COP must stay positive over -20..45 degC")

    def cop(self, ambient: float) -> float:
        value = self.cop_ref - self.cop_slope * (ambient - self.cop_ref_temp)
        return float(np.clip(value, self.cop_min, self.cop_max))


def default_plant_spec(topology: ZoneTopology, noise_std: float = 0.15,
                       seed: int = 0) -> PlantSpec:
    """Desk-scale office defaults with mild per-zone heterogeneity so zones
    are distinguishable."""
    rng = np.random.default_rng(seed)
    z = topology.num_zones
    spread = rng.uniform(0.85, 1.15, size=z)
    return PlantSpec(
        topology=topology,
        c_air=0.9 * spread,
        c_mass=6.0 * spread,
        r_env=5.0 / spread,
        r_mass=0.6 * np.ones(z),
        r_zone=4.0,
        convection_exponent=1.35,
        reheat_rating=4.0 * np.ones(z),
        ahu_heat_rating=np.full(topology.num_floors, 60.0),
        ahu_cool_rating=np.full(topology.num_floors, 45.0),
        cop_ref=3.5,
        cop_ref_temp=15.0,
        cop_slope=0.09,
        cop_min=1.6,
        cop_max=5.0,
        duct_loss=0.18,
        fan_coeff=0.08,
        gain_occupied=2.0 * spread,
        gain_base=0.1 * np.ones(z),
        solar_gain_peak=1.2,
        noise_std=noise_std,
        kp=6.0,
        ki=2.0,
        substeps=12,
        vent_fan_kw=0.75 * spread,
    )


@dataclass
class SimulationTrace:
    tau_obs: np.ndarray  # (T+1, Z) hourly observed zone temperatures
    p_hvac_obs: np.ndarray  # (T, Z) ex-post zonal electrical power
    p_import_obs: np.ndarray  # (T,)
    expost_cost: float | None = None
    p_heat_obs: np.ndarray | None = None  # (T, Z) electrical, heating share
    p_cool_obs: np.ndarray | None = None  # (T, Z) electrical, cooling share
    # thermal bookkeeping over the run (kWh), for energy-sanity checks
    energy_delivered_kwh: float = 0.0
    energy_envelope_kwh: float = 0.0  # negative when the building loses heat
    energy_gains_kwh: float = 0.0
    energy_storage_kwh: float = 0.0  # air+mass heat content change


def _adjacency(topology: ZoneTopology) -> np.ndarray:
    adj = rc.adjacency_mask(topology).astype(float)
    np.fill_diagonal(adj, 0.0)
    return adj


def _solar_profile(hour_frac: np.ndarray, peak: float) -> np.ndarray:
    """Zero outside 6h-18h, sinusoidal bump peaking at noon."""
    x = np.sin(np.pi * (hour_frac - 6.0) / 12.0)
    return peak * np.where((hour_frac >= 6.0) & (hour_frac <= 18.0), np.maximum(x, 0.0), 0.0)


class _PlantState:
    def __init__(self, spec: PlantSpec, tau_air: np.ndarray):
        self.t_air = np.asarray(tau_air, dtype=float).copy()
        self.t_mass = self.t_air.copy()
        self.integral = np.zeros(spec.topology.num_zones)


def _allocate(spec: PlantSpec, cmd: np.ndarray):
    """Split thermal commands into AHU heating, reheat and AHU cooling,
    respecting floor coil ratings with proportional curtailment."""
    q_h = np.maximum(cmd, 0.0)
    q_c = np.maximum(-cmd, 0.0)
    ahu_h = np.zeros_like(q_h)
    reheat = np.zeros_like(q_h)
    cool = np.zeros_like(q_c)
    for f, members in enumerate(spec.topology.floors):
        m = np.asarray(members)
        want = q_h[m]
        total = want.sum()
        scale = min(1.0, spec.ahu_heat_rating[f] / total) if total > 0 else 0.0
        ahu_h[m] = want * scale
        reheat[m] = np.minimum(want - ahu_h[m], spec.reheat_rating[m])
        want_c = q_c[m]
        total_c = want_c.sum()
        scale_c = min(1.0, spec.ahu_cool_rating[f] / total_c) if total_c > 0 else 0.0
        cool[m] = want_c * scale_c
    return ahu_h, reheat, cool


def _substep(spec: PlantSpec, state: _PlantState, lo, hi, ambient: float,
             gains: np.ndarray, h: float, adj: np.ndarray,
             occupied: bool = False):
    """Advance one controller+thermal substep; returns electrical powers.

    PI control tracks the band [lo, hi] (lo == hi for exact setpoints); the
    integrator only accumulates while the equipment can deliver the command
    (conditional-integration anti-windup)."""
    err = np.clip(state.t_air, lo, hi) - state.t_air
    cmd = spec.kp * err + spec.ki * state.integral
    ahu_h, reheat, cool = _allocate(spec, cmd)
    delivered = ahu_h + reheat - cool
    saturated = np.abs(delivered - cmd) > 1e-9
    state.integral = np.where(saturated, state.integral, state.integral + err * h)

    q_hvac = (1.0 - spec.duct_loss) * (ahu_h - cool) + reheat
    d_t = ambient - state.t_air
    q_env = d_t * np.abs(d_t / 10.0) ** (spec.convection_exponent - 1.0) / spec.r_env
    q_zz = (adj @ state.t_air - adj.sum(axis=1) * state.t_air) / spec.r_zone
    q_ma = (state.t_mass - state.t_air) / spec.r_mass

    state.t_air = state.t_air + h * (q_hvac + gains + q_env + q_zz + q_ma) / spec.c_air
    state.t_mass = state.t_mass + h * (-q_ma) / spec.c_mass

    cop = spec.cop(ambient)
    p_heat = ahu_h + reheat + spec.fan_coeff * ahu_h
    p_cool = cool / cop + spec.fan_coeff * cool
    if occupied:
        vent = spec.vent_fan_kw
        heat_side = cmd >= 0.0
        p_heat = p_heat + np.where(heat_side, vent, 0.0)
        p_cool = p_cool + np.where(heat_side, 0.0, vent)
    return p_heat, p_cool, q_hvac, q_env


def _gains(spec: PlantSpec, hour_frac: float, occupied: bool,
           rng: np.random.Generator) -> np.ndarray:
    base = spec.gain_occupied if occupied else spec.gain_base
    solar = _solar_profile(np.asarray(hour_frac), spec.solar_gain_peak)
    noise = rng.normal(0.0, spec.noise_std, size=len(base)) if spec.noise_std > 0 \
        else np.zeros(len(base))
    return base + solar + noise


def _occupied(hour_of_day: int, day_of_week: int) -> bool:
    return day_of_week < 5 and 7 <= hour_of_day < 18


def simulate_day(spec: PlantSpec, setpoints: np.ndarray, weather: np.ndarray,
                 seed: int, day_of_week: int = 0, tariff=None,
                 dt: float = 1.0) -> SimulationTrace:
    """Track hourly setpoints at sub-hourly resolution and return hourly
    observations.  Deterministic given (spec, setpoints, weather, seed).
    The plant never fails: saturation is physical behavior.

    During hour t the controller tracks ``setpoints[t+1]``, the temperature
    the schedule wants reached by the end of the step.
    """
    setpoints = np.asarray(setpoints, dtype=float)
    weather = np.asarray(weather, dtype=float).ravel()
    z = spec.topology.num_zones
    t_h = len(weather)
    if setpoints.shape != (t_h + 1, z):
        raise PlantError(f"setpoints must have shape {(t_h + 1, z)}, got {setpoints.shape}")

    rng = np.random.default_rng(seed)
    adj = _adjacency(spec.topology)
    state = _PlantState(spec, setpoints[0])
    h = dt / spec.substeps

    tau_obs = np.empty((t_h + 1, z))
    tau_obs[0] = state.t_air
    p_heat_obs = np.zeros((t_h, z))
    p_cool_obs = np.zeros((t_h, z))
    e_delivered = e_envelope = e_gains = 0.0
    heat0 = float(spec.c_air @ state.t_air + spec.c_mass @ state.t_mass)

    for t in range(t_h):
        target = setpoints[t + 1]
        hour_of_day = t % 24
        occupied = _occupied(hour_of_day, day_of_week + t // 24)
        acc_h = np.zeros(z)
        acc_c = np.zeros(z)
        for k in range(spec.substeps):
            gains = _gains(spec, hour_of_day + (k + 0.5) / spec.substeps * dt,
                           occupied, rng)
            p_heat, p_cool, q_hvac, q_env = _substep(
                spec, state, target, target, weather[t], gains, h, adj,
                occupied=occupied)
            acc_h += p_heat
            acc_c += p_cool
            e_delivered += float(q_hvac.sum()) * h
            e_envelope += float(q_env.sum()) * h
            e_gains += float(gains.sum()) * h
        tau_obs[t + 1] = state.t_air
        p_heat_obs[t] = acc_h / spec.substeps
        p_cool_obs[t] = acc_c / spec.substeps

    p_hvac = p_heat_obs + p_cool_obs
    p_import = p_hvac.sum(axis=1)
    cost = tariff.cost_of(p_import, dt) if tariff is not None else None
    heat1 = float(spec.c_air @ state.t_air + spec.c_mass @ state.t_mass)
    return SimulationTrace(tau_obs, p_hvac, p_import, cost, p_heat_obs,
                           p_cool_obs, energy_delivered_kwh=e_delivered,
                           energy_envelope_kwh=e_envelope,
                           energy_gains_kwh=e_gains,
                           energy_storage_kwh=heat1 - heat0)


class Plant:
    """Callable wrapper binding a spec, for use by the training loop."""

    def __init__(self, spec: PlantSpec):
        self.spec = spec

    def simulate(self, setpoints, ambient, seed, day_of_week=0, tariff=None,
                 dt=1.0) -> SimulationTrace:
        return simulate_day(self.spec, setpoints, ambient, seed,
                            day_of_week=day_of_week, tariff=tariff, dt=dt)


class ExactRcPlant:
    """Realizable diagnostic plant: an RC model with hidden parameters and a
    perfect inverse controller.  When the learned parameters equal the hidden
    ones, observed powers reproduce the schedule exactly (zero noise)."""

    def __init__(self, theta: ThetaParams, dt: float = 1.0,
                 cap_h: float | None = None, cap_c: float | None = None):
        self.theta = theta
        self.dt = dt
        self.cap_h = cap_h
        self.cap_c = cap_c

    def simulate(self, setpoints, ambient, seed, day_of_week=0, tariff=None,
                 dt=None) -> SimulationTrace:
        dt = self.dt if dt is None else dt
        setpoints = np.asarray(setpoints, dtype=float)
        ambient = np.asarray(ambient, dtype=float).ravel()
        th = self.theta
        z = th.num_zones
        t_h = len(ambient)
        tau = np.empty((t_h + 1, z))
        tau[0] = setpoints[0]
        p_h = np.zeros((t_h, z))
        p_c = np.zeros((t_h, z))
        for t in range(t_h):
            # thermal need that lands exactly on the setpoint
            drift = rc.rc_step(th, tau[t], ambient[t], np.zeros(z), np.zeros(z), dt)
            q_net = (setpoints[t + 1] - drift) * th.c / dt
            heat = np.maximum(q_net, 0.0) / th.eta_h
            cool = np.maximum(-q_net, 0.0) / th.eta_c
            if self.cap_h is not None:
                heat = np.minimum(heat, self.cap_h)
            if self.cap_c is not None:
                cool = np.minimum(cool, self.cap_c)
            p_h[t] = heat
            p_c[t] = cool
            tau[t + 1] = rc.rc_step(th, tau[t], ambient[t], heat, cool, dt)
        p_hvac = p_h + p_c
        p_import = p_hvac.sum(axis=1)
        cost = tariff.cost_of(p_import, dt) if tariff is not None else None
        return SimulationTrace(tau, p_hvac, p_import, cost, p_h, p_c)


# ---------------------------------------------------------------------------
# historical data generation


BASELINE_OCCUPIED = 21.0
BASELINE_HEAT_SETBACK = 17.0
BASELINE_COOL_SETBACK = 26.0


@dataclass(frozen=True)
class BaselinePolicy:
    """Conventional fixed schedule: one occupied setpoint, heating/cooling
    setbacks otherwise."""

    occupied: float = BASELINE_OCCUPIED
    heat_setback: float = BASELINE_HEAT_SETBACK
    cool_setback: float = BASELINE_COOL_SETBACK


@dataclass(frozen=True)
class TransitionDataset:
    """Hourly transitions (tau_t, tau_amb, p_h, p_c, tau_next), electrical
    powers, for pre-training the RC model."""

    tau: np.ndarray  # (N, Z)
    tau_amb: np.ndarray  # (N,)
    p_h: np.ndarray  # (N, Z)
    p_c: np.ndarray  # (N, Z)
    tau_next: np.ndarray  # (N, Z)
    dt: float = 1.0

    def __len__(self) -> int:
        return len(self.tau_amb)


def baseline_band(hour_of_day: int, day_of_week: int, num_zones: int,
                  policy: BaselinePolicy | None = None):
    if policy is None:
        policy = BaselinePolicy()
    if _occupied(hour_of_day, day_of_week):
        lo = hi = np.full(num_zones, policy.occupied)
    else:
        lo = np.full(num_zones, policy.heat_setback)
        hi = np.full(num_zones, policy.cool_setback)
    return lo, hi


def historical_rollout(spec: PlantSpec, weather_year: np.ndarray, seed: int,
                       dt: float = 1.0,
                       policy: BaselinePolicy | None = None) -> TransitionDataset:
    """One year under the conventional occupancy schedule (21 degC occupied,
    17/26 degC setbacks by default), recorded as hourly transitions."""
    weather_year = np.asarray(weather_year, dtype=float).ravel()
    n = len(weather_year)
    if n % 24:
        raise PlantError("weather series must cover whole days")
    z = spec.topology.num_zones
    rng = np.random.default_rng(seed)
    adj = _adjacency(spec.topology)
    state = _PlantState(spec, np.full(z, 20.0))
    h = dt / spec.substeps

    tau = np.empty((n, z))
    p_h = np.zeros((n, z))
    p_c = np.zeros((n, z))
    tau_next = np.empty((n, z))

    for t in range(n):
        hour_of_day = t % 24
        day_of_week = (t // 24) % 7
        lo, hi = baseline_band(hour_of_day, day_of_week, z, policy)
        occupied = _occupied(hour_of_day, day_of_week)
        tau[t] = state.t_air
        acc_h = np.zeros(z)
        acc_c = np.zeros(z)
        for k in range(spec.substeps):
            gains = _gains(spec, hour_of_day + (k + 0.5) / spec.substeps * dt,
                           occupied, rng)
            ph, pc, _, _ = _substep(spec, state, lo, hi, weather_year[t],
                                     gains, h, adj, occupied=occupied)
            acc_h += ph
            acc_c += pc
        p_h[t] = acc_h / spec.substeps
        p_c[t] = acc_c / spec.substeps
        tau_next[t] = state.t_air

    return TransitionDataset(tau, weather_year.copy(), p_h, p_c, tau_next, dt)


def warmup_initial_tau(spec: PlantSpec, preceding_day_weather: np.ndarray,
                       seed: int, dt: float = 1.0,
                       day_of_week: int = 0) -> np.ndarray:
    """Zone temperatures after running the baseline policy over the
    preceding day; used as each scenario's initial condition."""
    weather = np.asarray(preceding_day_weather, dtype=float).ravel()
    z = spec.topology.num_zones
    rng = np.random.default_rng(seed)
    adj = _adjacency(spec.topology)
    state = _PlantState(spec, np.full(z, 20.0))
    h = dt / spec.substeps
    for t in range(len(weather)):
        hour_of_day = t % 24
        lo, hi = baseline_band(hour_of_day, day_of_week, z)
        occupied = _occupied(hour_of_day, day_of_week)
        for k in range(spec.substeps):
            gains = _gains(spec, hour_of_day + (k + 0.5) / spec.substeps * dt,
                           occupied, rng)
            _substep(spec, state, lo, hi, weather[t], gains, h, adj,
                     occupied=occupied)
    return state.t_air.copy()


# ---------------------------------------------------------------------------
# export


def export_trace_csv(trace: SimulationTrace, path: str | Path) -> None:
    """Columns: t, zone, tau_obs (end of step), p_hvac_obs."""
    t_h, z_n = trace.p_hvac_obs.shape
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["t", "zone", "tau_obs", "p_hvac_obs"])
        for t in range(t_h):
            for z in range(z_n):
                writer.writerow([t, z, repr(float(trace.tau_obs[t + 1, z])),
                                 repr(float(trace.p_hvac_obs[t, z]))])


def export_trace_summary(trace: SimulationTrace, path: str | Path) -> None:
    doc = {
        "energy_kwh": float(trace.p_import_obs.sum()),
        "peak_kw": float(trace.p_import_obs.max()) if trace.p_import_obs.size else 0.0,
        "expost_cost": trace.expost_cost,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
