"""Closed-loop simulation of the rendered impedance against the phantom.

The end effector obeys the rendered dynamics
``Lambda (a - a_d) = F_tissue - D (v - v_d) - K (x - x_d)``, integrated with
semi-implicit Euler at the physics rate. The tissue reaction is the
ground-truth Hunt-Crossley force along ``+z``. Control runs at ``cfg.dt``.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .controller import (
    VS_MODES,
    CycleState,
    ImpedanceGains,
    StrategyConfig,
    VariableImpedanceController,
    damping_design,
    interaction_force,
)
from .core import Phantom
from .gpr import BodyMap, gpr_mean

LOG_COLUMNS = (
    "t", "x", "y", "z", "vx", "vy", "vz", "xt_x", "xt_y", "xt_z",
    "f_model", "f_tissue", "K_x", "K_y", "K_z", "D_x", "D_y", "D_z",
    "T", "T_dot", "qp_status", "eps", "contact", "F_d", "F_bound", "map_kappa", "surface_offset",
)


class SimulationBlowup(RuntimeError):
    """The plant state diverged; ``cycle`` is the offending control cycle."""

    def __init__(self, message: str, cycle: int = -1):
        super().__init__(message)
        self.cycle = cycle


@dataclass(frozen=True)
class ScanPlan:
    """Back-and-forth lateral sweep at constant speed and constant target height.

    The target height is the map surface at ``start`` minus ``depth_offset``.
    """

    start: tuple[float, float] = (0.05, 0.01)
    end: tuple[float, float] = (0.05, 0.09)
    speed: float = 0.01
    depth_offset: float = 0.02
    duration: float = 30.0

    def __post_init__(self):
        if not self.speed > 0:
            raise ValueError("speed must be > 0")
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if self.length <= 0:
            raise ValueError("start and end must differ")

    @property
    def length(self) -> float:
        return math.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1])

    def lateral(self, t: float) -> tuple[float, float, float, float]:
        """Target ``(x, y, vx, vy)`` at time ``t``."""
        L = self.length
        ux, uy = (self.end[0] - self.start[0]) / L, (self.end[1] - self.start[1]) / L
        s = (self.speed * t) % (2 * L)
        sign = 1.0
        if s > L:
            s, sign = 2 * L - s, -1.0
        return (self.start[0] + ux * s, self.start[1] + uy * s, sign * self.speed * ux, sign * self.speed * uy)

    def check_inside(self, ph: Phantom) -> None:
        for p in (self.start, self.end):
            if not ph.contains(p[0], p[1]):
                raise ValueError(f"scan path point {p} outside phantom bounds")


@dataclass(frozen=True)
class Disturbance:
    """Surface height offsets as trapezoids ``(t_start, rise, hold, fall, height)``.

    Positive heights raise the phantom surface; profiles are continuous and
    zero outside each segment.
    """

    segments: tuple[tuple[float, float, float, float, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(tuple(float(v) for v in s) for s in self.segments))
        for s in self.segments:
            if len(s) != 5 or s[1] <= 0 or s[3] <= 0 or s[2] < 0:
                raise ValueError(f"bad disturbance segment {s}")

    def offset(self, t: float) -> tuple[float, float]:
        """Height offset (m) and its rate (m/s) at time ``t``."""
        h = hd = 0.0
        for t0, rise, hold, fall, height in self.segments:
            u = t - t0
            if u <= 0 or u >= rise + hold + fall:
                continue
            if u < rise:
                h += height * u / rise
                hd += height / rise
            elif u < rise + hold:
                h += height
            else:
                h += height * (1 - (u - rise - hold) / fall)
                hd -= height / fall
        return h, hd

    @property
    def end_time(self) -> float:
        return max((s[0] + s[1] + s[2] + s[3] for s in self.segments), default=0.0)

    def to_list(self) -> list:
        return [list(s) for s in self.segments]


def default_lift(t_start: float = 8.0) -> Disturbance:
    """Raise the phantom by 2 cm, lower it back, then drop it 3 cm and restore.

    The drop takes the surface below the target height so contact is lost.
    """
    return Disturbance(((t_start, 1.0, 3.0, 1.0, 0.02), (t_start + 7.0, 1.0, 3.0, 1.0, -0.03)))


NO_DISTURBANCE = Disturbance()


@dataclass
class PlantState:
    pos: np.ndarray
    vel: np.ndarray
    acc: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass(frozen=True)
class Contact:
    eps: float
    eps_dot: float
    force: float
    kappa: float


def tissue_contact(ph: Phantom, pos, vel, t: float, dist: Disturbance = NO_DISTURBANCE) -> Contact:
    """Ground-truth penetration, rate and Hunt-Crossley force on the probe."""
    pt = ph.point(pos[0], pos[1])
    h, hd = dist.offset(t)
    eps = pt.s + h - pos[2]
    eps_dot = pt.ds_dx * vel[0] + pt.ds_dy * vel[1] + hd - vel[2]
    if eps < 0:
        return Contact(eps, eps_dot, 0.0, pt.kappa)
    e = eps**ph.beta
    return Contact(eps, eps_dot, pt.kappa * e + pt.lambda_ * e * eps_dot, pt.kappa)


def plant_acceleration(state: PlantState, F_command, ph: Phantom, dist: Disturbance, t: float, Lambda) -> np.ndarray:
    """``(F_tissue e_z + F_command) / Lambda``; ``F_command`` is the rendered impedance force."""
    c = tissue_contact(ph, state.pos, state.vel, t, dist)
    F = np.asarray(F_command, dtype=float).copy()
    F[2] += c.force
    return F / np.asarray(Lambda, dtype=float)


def step_plant(state: PlantState, F_command, ph: Phantom, dist: Disturbance, dt_phys: float, t: float = 0.0,
               Lambda=(1.0, 1.0, 1.0)) -> PlantState:
    """One semi-implicit Euler step (velocity first, then position)."""
    a = plant_acceleration(state, F_command, ph, dist, t, Lambda)
    v = state.vel + dt_phys * a
    x = state.pos + dt_phys * v
    return PlantState(x, v, a)


@dataclass
class ScanLog:
    """Per-control-cycle record; column arrays keyed by ``LOG_COLUMNS``."""

    mode: str
    columns: dict
    dt: float
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def __len__(self) -> int:
        return len(self.columns["t"])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            cols = [self.columns[c] for c in LOG_COLUMNS]
            for row in zip(*cols):
                w.writerow([v if isinstance(v, str) else ("1" if v is True else "0" if v is False else f"{v:.9g}")
                            for v in row])

    @classmethod
    def from_csv(cls, path, mode: str = "", dt: float = 0.002) -> "ScanLog":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        cols = {}
        for j, name in enumerate(header):
            vals = [r[j] for r in body]
            if name == "qp_status":
                cols[name] = np.array(vals, dtype=object)
            elif name == "contact":
                cols[name] = np.array([v == "1" for v in vals])
            else:
                cols[name] = np.array([float(v) for v in vals])
        return cls(mode, cols, dt)

    def equals(self, other: "ScanLog") -> bool:
        """Bitwise equality of every column."""
        return all(np.array_equal(self.columns[c], other.columns[c]) for c in LOG_COLUMNS)


class _MapCache:
    """Body-map lookups at the probe position."""

    def __init__(self, bm: BodyMap):
        self.bm = bm

    def __call__(self, x: float, y: float):
        bm = self.bm
        s = bm.height(x, y)
        gx, gy = bm.gradient(x, y)
        k = max(0.0, gpr_mean(bm.kappa_gpr, x, y))
        lam = max(0.0, gpr_mean(bm.lambda_gpr, x, y))
        return s, (gx, gy), k, lam


def run_scan(
    cfg: StrategyConfig,
    ph: Phantom,
    bm: BodyMap,
    plan: ScanPlan = ScanPlan(),
    dist: Disturbance | None = None,
    seed: int = 0,
    dt_phys: float = 0.001,
) -> ScanLog:
    """Simulate one scan in ``cfg.mode``.

    Variable-stiffness modes run the QP controller each cycle; ``cs`` holds
    ``cfg.cs_K``; ``cf`` commands the vertical velocity from the force error
    (``z_dot = -(k_p e + k_d e_dot)``, ``e = F_ref - F``) on the force seen
    through a first-order low-pass at ``cfg.cf_filter_hz``; the lateral axes
    stay compliant with ``cs_K``.

    ``seed`` is recorded only: the plant and controller are deterministic.
    """
    dist = NO_DISTURBANCE if dist is None else dist
    plan.check_inside(ph)
    if not bm.covers(plan.start[0], plan.start[1]) or not bm.covers(plan.end[0], plan.end[1]):
        raise ValueError("body map does not cover the scan path")
    n_sub = int(round(cfg.dt / dt_phys))
    if n_sub < 1 or abs(n_sub * dt_phys - cfg.dt) > 1e-12:
        raise ValueError("dt_phys must divide the control period")
    n_cycles = int(round(plan.duration / cfg.dt))
    Lam = np.array(cfg.Lambda)
    lookup = _MapCache(bm)
    z_d = bm.height(*plan.start) - plan.depth_offset
    x0, y0, _, _ = plan.lateral(0.0)
    state = PlantState(np.array([x0, y0, bm.height(x0, y0)]), np.zeros(3))
    vic = VariableImpedanceController(cfg) if cfg.mode in VS_MODES else None
    if cfg.mode in ("cs", "cf"):
        gains = ImpedanceGains(Lam, damping_design(cfg.cs_K, Lam, cfg.zeta), np.array(cfg.cs_K))
    else:
        gains = vic.gains
    size = ph.size
    centre = np.array([(ph.bounds[0] + ph.bounds[1]) / 2, (ph.bounds[2] + ph.bounds[3]) / 2, 0.0])
    out = {c: np.empty(n_cycles) for c in LOG_COLUMNS}
    out["qp_status"] = np.empty(n_cycles, dtype=object)
    out["contact"] = np.empty(n_cycles, dtype=bool)
    e_prev = f_filt = None
    cf_alpha = 1.0 - math.exp(-2.0 * math.pi * cfg.cf_filter_hz * cfg.dt) if cfg.cf_filter_hz > 0 else 1.0
    for k in range(n_cycles):
        t = k * cfg.dt
        xd, yd, vxd, vyd = plan.lateral(t)
        target = np.array([xd, yd, z_d])
        v_target = np.array([vxd, vyd, 0.0])
        x_t = state.pos - target
        xd_t = state.vel - v_target
        contact = tissue_contact(ph, state.pos, state.vel, t, dist)
        s_map, grad, kap, lam = lookup(state.pos[0], state.pos[1])
        T = Tdot = math.nan
        status, F_d, F_bound = "none", math.nan, math.nan
        if vic is not None:
            cs = CycleState(x_t, xd_t, state.acc, s_map, grad, kap, lam, bm.beta, state.vel)
            gains, rep = vic.step(cs)
            T, Tdot, status, F_d, F_bound = rep.T, rep.T_dot, rep.status, rep.F_d, rep.F_bound
        elif cfg.mode == "cf":
            f_filt = contact.force if f_filt is None else f_filt + cf_alpha * (contact.force - f_filt)
            e = cfg.F_ref - f_filt
            e_dot = 0.0 if e_prev is None else (e - e_prev) / cfg.dt
            e_prev = e
            vz_cmd = -(cfg.cf_kp * e + cfg.cf_kd * e_dot)
            F_d = cfg.F_ref
        f_model = interaction_force(gains, CycleState(x_t, xd_t, state.acc))[2]
        row = (t, *state.pos, *state.vel, *x_t, f_model, contact.force, *gains.K, *gains.D,
               T, Tdot, status, contact.eps, contact.eps >= 0.0, F_d, F_bound, kap, dist.offset(t)[0])
        for c, v in zip(LOG_COLUMNS, row):
            out[c][k] = v
        for j in range(n_sub):
            tj = t + j * dt_phys
            xd, yd, vxd, vyd = plan.lateral(tj)
            F_cmd = -gains.D * (state.vel - np.array([vxd, vyd, 0.0])) - gains.K * (state.pos - np.array([xd, yd, z_d]))
            if cfg.mode == "cf":
                F_cmd[2] = 0.0
                a = plant_acceleration(state, F_cmd, ph, dist, tj, Lam)
                vel = state.vel + dt_phys * a
                vel[2] = vz_cmd
                a[2] = (vz_cmd - state.vel[2]) / dt_phys if j == 0 else 0.0
                state = PlantState(state.pos + dt_phys * vel, vel, a)
            else:
                state = step_plant(state, F_cmd, ph, dist, dt_phys, tj, Lam)
            if not (np.all(np.isfinite(state.pos)) and np.linalg.norm(state.pos - centre) <= 10 * size):
                raise SimulationBlowup(f"plant diverged at cycle {k} (t={t:.3f} s)", k)
            if not ph.contains(state.pos[0], state.pos[1]):
                raise SimulationBlowup(f"probe left the workspace at cycle {k} (t={t:.3f} s)", k)
    meta = {"mode": cfg.mode, "seed": seed, "dt_phys": dt_phys, "z_d": z_d, "disturbance": dist.to_list()}
    return ScanLog(cfg.mode, out, cfg.dt, meta)


# ---------------------------------------------------------------- analysis
def contact_intervals(contact: np.ndarray) -> list[tuple[int, int]]:
    """Index ranges ``[i0, i1)`` of consecutive rows out of contact."""
    loss = ~np.asarray(contact, dtype=bool)
    out, start = [], None
    for i, v in enumerate(loss):
        if v and start is None:
            start = i
        elif not v and start is not None:
            out.append((start, i))
            start = None
    if start is not None:
        out.append((start, len(loss)))
    return out


def safety_certificates(log: ScanLog, cfg: StrategyConfig, recontact_window: float = 1.0) -> dict:
    """Tank floor, stiffness bounds, floor behaviour and valve checks for a VS log."""
    T, Tdot = log["T"], log["T_dot"]
    K = np.column_stack([log["K_x"], log["K_y"], log["K_z"]])
    K_min, K_max = np.array(cfg.K_min), np.array(cfg.K_max)
    tol_T = abs(cfg.eta) * cfg.dt
    T_entry = np.concatenate([[cfg.T0], T[:-1]])
    floored = T_entry <= cfg.T_min
    loss = ~log["contact"].astype(bool)
    rows = np.flatnonzero(loss & floored)
    k_floor_ok = bool(np.all(K[rows] == K_min)) if rows.size else True
    optimal = log["qp_status"] == "optimal"
    valve_ok = bool(np.all(Tdot[optimal] >= cfg.eta - 1e-9))
    rec_rows = []
    n_win = int(round(recontact_window / cfg.dt))
    for i0, i1 in contact_intervals(log["contact"]):
        if i1 < len(log):
            rec_rows.extend(range(i1, min(i1 + n_win, len(log))))
    rec = np.array(rec_rows, dtype=int)
    rec_ok = bool(np.all(-Tdot[rec] <= abs(cfg.eta) + 1e-9)) if rec.size else True
    certs = {
        "tank_floor": {"pass": bool(T.min() >= cfg.T_min - tol_T), "min_T": float(T.min()), "limit": cfg.T_min - tol_T},
        "stiffness_bounds": {"pass": bool(np.all(K >= K_min) and np.all(K <= K_max)),
                             "min_K": float(K.min()), "max_K": float(K.max())},
        "k_min_after_floor": {"pass": k_floor_ok, "n_checked": int(rows.size)},
        "power_valve": {"pass": valve_ok, "min_T_dot_optimal": float(Tdot[optimal].min()) if optimal.any() else None},
        "recontact_power": {"pass": rec_ok, "n_checked": int(rec.size),
                            "max_extraction": float((-Tdot[rec]).max()) if rec.size else None},
    }
    certs["all_pass"] = all(v["pass"] for v in certs.values() if isinstance(v, dict))
    return certs


def run_summary(log: ScanLog, cfg: StrategyConfig) -> dict:
    f = log["f_tissue"]
    summary = {
        "mode": log.mode,
        "cycles": len(log),
        "max_force": float(f.max()),
        "max_penetration": float(log["eps"].max()),
        "contact_fraction": float(log["contact"].mean()),
    }
    z_d = log.meta.get("z_d")
    if z_d is not None:
        summary["descent_below_setpoint"] = float(max(0.0, z_d - log["z"].min()))
    if log.mode in VS_MODES:
        summary["safety"] = safety_certificates(log, cfg)
    elif log.mode == "cf":
        falling = np.diff(log["surface_offset"], prepend=log["surface_offset"][0]) < 0
        if falling.any():
            summary["cf_descending_while_surface_falls"] = float((log["vz"][falling] < 0).mean())
    return summary


def run_disturbance_suite(
    ph: Phantom,
    bm: BodyMap,
    plan: ScanPlan,
    lift: Disturbance,
    modes: Sequence[str] = ("vs-cf", "vs-vf", "cs", "cf"),
    base: StrategyConfig = StrategyConfig(),
    workers: int | None = None,
    seed: int = 0,
) -> tuple[dict, dict]:
    """Run each mode under ``lift``; return ``(logs, summary)``."""
    def one(mode):
        cfg = replace(base, mode=mode)
        return mode, run_scan(cfg, ph, bm, plan, lift, seed), cfg

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, modes))
    else:
        results = [one(m) for m in modes]
    logs = {m: log for m, log, _ in results}
    summary = {m: run_summary(log, cfg) for m, log, cfg in results}
    return logs, summary


def save_summary(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
