"""Learnable multi-zone RC thermal model.

The one-step map, evaluated exactly as written (self-persistence is carried
by the diagonal of the coupling matrix):

    tau' = dt * ( alpha @ tau + (eta_h*p_h - eta_c*p_c)/c + (tau_amb - tau)/(r*c) )

Parameters are stored in natural units; the flat vector used by the
optimizers keeps alpha entries raw and eta/r/c in log-space so positivity
survives arbitrary gradient steps.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class RcError(Exception):
    pass


@dataclass(frozen=True)
class ZoneTopology:
    """Zone count, floor membership and labels.

    Floors partition a subset of the zones; every conditioned zone belongs
    to exactly one floor.
    """

    num_zones: int
    floors: tuple[tuple[int, ...], ...]
    zone_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.zone_names:
            object.__setattr__(
                self, "zone_names",
                tuple(f"Z{z:02d}" for z in range(self.num_zones)))
        seen = set()
        for floor in self.floors:
            for z in floor:
                if z < 0 or z >= self.num_zones:
                    raise RcError(f"zone index {z} out of range")
                if z in seen:
                    raise RcError(f"zone {z} appears in more than one floor")
                seen.add(z)
        if len(self.zone_names) != self.num_zones:
            raise RcError("zone_names length must equal num_zones")

    @property
    def num_floors(self) -> int:
        return len(self.floors)

    def floor_of(self, zone: int) -> int:
        for f, members in enumerate(self.floors):
            if zone in members:
                return f
        raise RcError(f"zone {zone} is not on any floor")


def default_topology(num_zones: int, zones_per_floor: int = 5) -> ZoneTopology:
    """Consecutive chunks of ``zones_per_floor`` zones per floor; the case
    study is 15 zones on 3 floors of 5."""
    floors = tuple(
        tuple(range(start, min(start + zones_per_floor, num_zones)))
        for start in range(0, num_zones, zones_per_floor)
    )
    return ZoneTopology(num_zones, floors)


@dataclass(frozen=True)
class ThetaParams:
    """RC parameters: inter-zonal coupling (alpha, 1/h), heating and cooling
    efficiencies (dimensionless), lumped resistance (degC/kW) and capacitance
    (kWh/degC).  eta/r/c must be strictly positive; alpha is unrestricted.

    ``alpha_mask`` optionally restricts which alpha entries are learnable;
    unmasked entries stay fixed at their current values.
    """

    alpha: np.ndarray
    eta_h: np.ndarray
    eta_c: np.ndarray
    r: np.ndarray
    c: np.ndarray
    alpha_mask: np.ndarray | None = None

    def __post_init__(self):
        z = len(self.eta_h)
        for name in ("alpha", "eta_h", "eta_c", "r", "c"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.alpha.shape != (z, z):
            raise RcError(f"alpha must be {z}x{z}")
        for name in ("eta_h", "eta_c", "r", "c"):
            v = getattr(self, name)
            if v.shape != (z,):
                raise RcError(f"{name} must have length {z}")
            if not np.all(v > 0):
                raise RcError(f"{name} must be strictly positive")
        if not np.all(np.isfinite(self.alpha)):
            raise RcError("alpha must be finite")
        if self.alpha_mask is not None:
            mask = np.asarray(self.alpha_mask, dtype=bool)
            if mask.shape != (z, z):
                raise RcError(f"alpha_mask must be {z}x{z}")
            object.__setattr__(self, "alpha_mask", mask)

    @property
    def num_zones(self) -> int:
        return len(self.eta_h)

    @property
    def num_params(self) -> int:
        z = self.num_zones
        n_alpha = int(self.alpha_mask.sum()) if self.alpha_mask is not None else z * z
        return n_alpha + 4 * z


def default_theta(num_zones: int, dt: float, seed: int = 0,
                  alpha_mask: np.ndarray | None = None) -> ThetaParams:
    """Initializer used before any pre-training: near-identity persistence
    plus small coupling noise, and coarse physical priors for eta/r/c."""
    rng = np.random.default_rng(seed)
    alpha = np.eye(num_zones) / dt + rng.uniform(-0.01, 0.01, size=(num_zones, num_zones))
    if alpha_mask is not None:
        alpha = np.where(alpha_mask | np.eye(num_zones, dtype=bool), alpha, 0.0)
    return ThetaParams(
        alpha=alpha,
        eta_h=np.full(num_zones, 0.9),
        eta_c=np.full(num_zones, 0.9),
        r=np.full(num_zones, 5.0),
        c=np.full(num_zones, 3.0),
        alpha_mask=alpha_mask,
    )


# ---------------------------------------------------------------------------
# dynamics


def rc_step(theta: ThetaParams, tau_in: np.ndarray, tau_amb: float,
            p_h: np.ndarray, p_c: np.ndarray, dt: float) -> np.ndarray:
    """One-step temperature update (state and powers may also be batched
    with a leading sample axis; tau_amb broadcasts)."""
    tau_in = np.asarray(tau_in, dtype=float)
    p_h = np.asarray(p_h, dtype=float)
    p_c = np.asarray(p_c, dtype=float)
    coupling = tau_in @ theta.alpha.T
    injection = (theta.eta_h * p_h - theta.eta_c * p_c) / theta.c
    ambient = (np.expand_dims(np.asarray(tau_amb, dtype=float), -1) - tau_in) / (theta.r * theta.c)
    return dt * (coupling + injection + ambient)


def rollout(theta: ThetaParams, tau_0: np.ndarray, tau_amb: np.ndarray,
            p_h: np.ndarray, p_c: np.ndarray, dt: float) -> np.ndarray:
    """Sequential rc_step application; returns T+1 states including tau_0."""
    tau_amb = np.asarray(tau_amb, dtype=float).ravel()
    p_h = np.atleast_2d(np.asarray(p_h, dtype=float))
    p_c = np.atleast_2d(np.asarray(p_c, dtype=float))
    steps = len(tau_amb)
    if p_h.shape[0] != steps or p_c.shape[0] != steps:
        raise RcError("power series length must match ambient series")
    out = np.empty((steps + 1, theta.num_zones))
    out[0] = np.asarray(tau_0, dtype=float)
    for t in range(steps):
        out[t + 1] = rc_step(theta, out[t], tau_amb[t], p_h[t], p_c[t], dt)
    return out


# ---------------------------------------------------------------------------
# flat parameter vector (alpha raw, eta/r/c in log-space)


def _alpha_indices(theta: ThetaParams) -> np.ndarray:
    z = theta.num_zones
    if theta.alpha_mask is None:
        return np.arange(z * z)
    return np.flatnonzero(theta.alpha_mask.ravel())


def pack(theta: ThetaParams) -> np.ndarray:
    """Flatten to [alpha (masked, row-major), log eta_h, log eta_c, log r, log c]."""
    return np.concatenate([
        theta.alpha.ravel()[_alpha_indices(theta)],
        np.log(theta.eta_h),
        np.log(theta.eta_c),
        np.log(theta.r),
        np.log(theta.c),
    ])


def unpack(flat: np.ndarray, num_zones: int,
           alpha_mask: np.ndarray | None = None,
           alpha_fixed: np.ndarray | None = None) -> ThetaParams:
    """Inverse of ``pack``.  With a mask, non-learnable alpha entries come
    from ``alpha_fixed`` (zeros when omitted)."""
    flat = np.asarray(flat, dtype=float)
    z = num_zones
    n_alpha = int(alpha_mask.sum()) if alpha_mask is not None else z * z
    if flat.shape != (n_alpha + 4 * z,):
        raise RcError(f"flat vector must have length {n_alpha + 4 * z}, got {flat.shape}")
    if alpha_mask is None:
        alpha = flat[:n_alpha].reshape(z, z).copy()
    else:
        alpha = np.zeros(z * z) if alpha_fixed is None else np.asarray(alpha_fixed, dtype=float).ravel().copy()
        alpha[np.flatnonzero(alpha_mask.ravel())] = flat[:n_alpha]
        alpha = alpha.reshape(z, z)
    rest = flat[n_alpha:]
    return ThetaParams(
        alpha=alpha,
        eta_h=np.exp(rest[:z]),
        eta_c=np.exp(rest[z:2 * z]),
        r=np.exp(rest[2 * z:3 * z]),
        c=np.exp(rest[3 * z:]),
        alpha_mask=alpha_mask,
    )


def unpack_like(flat: np.ndarray, template: ThetaParams) -> ThetaParams:
    return unpack(flat, template.num_zones, template.alpha_mask, template.alpha)


# ---------------------------------------------------------------------------
# step coefficients and their Jacobian


@dataclass(frozen=True)
class StepCoefficients:
    """Dense coefficients of the affine one-step map

        tau' = m_tau @ tau + m_ph * p_h + m_pc * p_c + m_amb * tau_amb
    """

    m_tau: np.ndarray  # (Z, Z)
    m_ph: np.ndarray  # (Z,)
    m_pc: np.ndarray  # (Z,)
    m_amb: np.ndarray  # (Z,)


def step_coefficients(theta: ThetaParams, dt: float) -> StepCoefficients:
    z = theta.num_zones
    leak = dt / (theta.r * theta.c)
    return StepCoefficients(
        m_tau=dt * theta.alpha - np.diag(leak),
        m_ph=dt * theta.eta_h / theta.c,
        m_pc=-dt * theta.eta_c / theta.c,
        m_amb=leak.copy(),
    )


def coefficient_jacobian(theta: ThetaParams, dt: float) -> sp.csr_matrix:
    """Jacobian of the step coefficients with respect to the flat parameter
    vector.

    Row layout: m_tau row-major (Z*Z rows), then m_ph, m_pc, m_amb (Z rows
    each).  Columns follow the ``pack`` layout; the eta/r/c columns are
    derivatives with respect to the log-space entries.
    """
    z = theta.num_zones
    a_idx = _alpha_indices(theta)
    n_alpha = len(a_idx)
    p = n_alpha + 4 * z
    col_eta_h = n_alpha + np.arange(z)
    col_eta_c = col_eta_h + z
    col_r = col_eta_c + z
    col_c = col_r + z

    leak = dt / (theta.r * theta.c)
    inj_h = dt * theta.eta_h / theta.c
    inj_c = dt * theta.eta_c / theta.c

    rows, cols, vals = [], [], []

    def add(row, col, val):
        rows.append(row)
        cols.append(col)
        vals.append(val)

    # m_tau block: d/d alpha_ij = dt; diagonal also carries the leak term
    pos_of = {flat: k for k, flat in enumerate(a_idx)}
    for i in range(z):
        for j in range(z):
            row = i * z + j
            flat = i * z + j
            if flat in pos_of:
                add(row, pos_of[flat], dt)
            if i == j:
                add(row, col_r[i], leak[i])   # d(-dt/(rc))/dlog r = +dt/(rc)
                add(row, col_c[i], leak[i])
    # m_ph rows
    for i in range(z):
        row = z * z + i
        add(row, col_eta_h[i], inj_h[i])
        add(row, col_c[i], -inj_h[i])
    # m_pc rows
    for i in range(z):
        row = z * z + z + i
        add(row, col_eta_c[i], -inj_c[i])
        add(row, col_c[i], inj_c[i])
    # m_amb rows
    for i in range(z):
        row = z * z + 2 * z + i
        add(row, col_r[i], -leak[i])
        add(row, col_c[i], -leak[i])

    return sp.csr_matrix((vals, (rows, cols)), shape=(z * z + 3 * z, p))


# ---------------------------------------------------------------------------
# checkpoint files


def save_checkpoint(theta: ThetaParams, path: str | Path) -> None:
    """JSON key-value checkpoint; floats round-trip bit-exactly through
    Python's repr-based JSON encoding."""
    doc = {
        "format": "rc-theta-v1",
        "num_zones": theta.num_zones,
        "log_space": False,
        "alpha": theta.alpha.tolist(),
        "eta_h": theta.eta_h.tolist(),
        "eta_c": theta.eta_c.tolist(),
        "r": theta.r.tolist(),
        "c": theta.c.tolist(),
        "alpha_mask": theta.alpha_mask.tolist() if theta.alpha_mask is not None else None,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> ThetaParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "rc-theta-v1":
        raise RcError(f"{path}: not an RC parameter checkpoint")
    fields = {k: np.asarray(doc[k], dtype=float) for k in ("alpha", "eta_h", "eta_c", "r", "c")}
    if doc.get("log_space"):
        for k in ("eta_h", "eta_c", "r", "c"):
            fields[k] = np.exp(fields[k])
    mask = doc.get("alpha_mask")
    return ThetaParams(
        alpha_mask=np.asarray(mask, dtype=bool) if mask is not None else None,
        **fields,
    )


def adjacency_mask(topology: ZoneTopology) -> np.ndarray:
    """Optional alpha sparsity: self terms, same-floor pairs and vertically
    stacked zones (same position on adjacent floors)."""
    z = topology.num_zones
    mask = np.eye(z, dtype=bool)
    for members in topology.floors:
        for a in members:
            for b in members:
                mask[a, b] = True
    for f in range(topology.num_floors - 1):
        lower, upper = topology.floors[f], topology.floors[f + 1]
        for a, b in zip(lower, upper):
            mask[a, b] = mask[b, a] = True
    return mask
