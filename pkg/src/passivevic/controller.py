"""Passive variable impedance control with an energy tank.

Per control cycle the diagonal stiffness ``K`` is chosen by a QP that trades
force tracking against staying near ``K_min``, subject to a force window and
two tank rows: the stored energy may not fall below ``T_min`` after the step,
and it may not drain faster than ``|eta|``.

Axes are ``(x, y, z)`` with ``z`` up. ``x_tilde = x - x_d``; with the target
below the surface ``x_tilde[2] > 0`` in contact and the model force
``F_ext[2] = K_z x_tilde_z`` equals the pressing force on the tissue.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .qp import OPTIMAL, ActiveSetSolver, QpProblem

MODES = ("vs-cf", "vs-vf", "cs", "cf")
VS_MODES = ("vs-cf", "vs-vf")


class ConfigError(ValueError):
    """Invalid controller configuration; the message names the field."""


def _vec3(v) -> tuple[float, float, float]:
    a = np.broadcast_to(np.asarray(v, dtype=float), (3,))
    return tuple(float(x) for x in a)


@dataclass(frozen=True)
class StrategyConfig:
    """All controller knobs; the JSON config file mirrors these fields.

    Forces in N, lengths in m, stiffness in N/m, energies in J, powers in W.
    ``force_model`` selects the QP force model: ``"static"`` uses ``K x_tilde``
    only, ``"full"`` adds the measured damping and inertia terms. The force
    controller gains ``cf_kp`` ((m/s)/N) and ``cf_kd`` (m/N) act on the sensed
    force after a first-order low-pass at ``cf_filter_hz`` (0 disables it).
    """

    mode: str = "vs-cf"
    F_ref: float = 2.5
    eps_max: float = 0.013
    eps_d: float = 0.008
    F_min_const: float = 5.0
    F_max: float = 10.0
    Q: tuple[float, float, float] = (1.0, 1.0, 1.0)
    R: tuple[float, float, float] = (1e-6, 1e-6, 1e-6)
    K_min: tuple[float, float, float] = (100.0, 100.0, 100.0)
    K_max: tuple[float, float, float] = (1000.0, 1000.0, 1000.0)
    dt: float = 0.002
    Lambda: tuple[float, float, float] = (1.0, 1.0, 1.0)
    zeta: float = 0.707
    T0: float = 1.0
    T_min: float = 0.05
    T_max: float = 2.0
    eta: float = -0.5
    force_model: str = "static"
    cs_K: tuple[float, float, float] = (1000.0, 1000.0, 1000.0)
    cf_kp: float = 0.3
    cf_kd: float = 0.01
    cf_filter_hz: float = 2.0
    qp_max_iter: int = 100

    def __post_init__(self):
        for name in ("Q", "R", "K_min", "K_max", "Lambda", "cs_K"):
            try:
                object.__setattr__(self, name, _vec3(getattr(self, name)))
            except (TypeError, ValueError):
                raise ConfigError(f"{name}: expected a scalar or 3 numbers") from None
        def need(ok, name, msg):
            if not ok:
                raise ConfigError(f"{name}: {msg} (got {getattr(self, name)!r})")
        need(self.mode in MODES, "mode", f"must be one of {MODES}")
        need(self.force_model in ("static", "full"), "force_model", "must be 'static' or 'full'")
        need(self.eps_d > 0, "eps_d", "must be > 0")
        need(self.eps_d <= self.eps_max, "eps_max", "must be >= eps_d")
        need(self.F_min_const <= self.F_max, "F_min_const", "must be <= F_max")
        need(self.F_max > 0, "F_max", "must be > 0")
        need(min(self.Q) > 0, "Q", "must be positive")
        need(min(self.R) > 0, "R", "must be positive")
        need(min(self.K_min) > 0, "K_min", "must be positive")
        need(all(a <= b for a, b in zip(self.K_min, self.K_max)), "K_max", "must be >= K_min")
        need(min(self.Lambda) > 0, "Lambda", "must be positive")
        need(self.zeta >= 0, "zeta", "must be >= 0")
        need(self.dt > 0, "dt", "must be > 0")
        need(self.eta <= 0, "eta", "must be <= 0")
        need(0 <= self.T_min < self.T_max, "T_min", "must satisfy 0 <= T_min < T_max")
        need(self.T0 > 0, "T0", "must be > 0")
        need(min(self.cs_K) > 0, "cs_K", "must be positive")
        need(self.cf_filter_hz >= 0, "cf_filter_hz", "must be >= 0")
        need(self.qp_max_iter > 0, "qp_max_iter", "must be > 0")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict, **overrides) -> "StrategyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown configuration field")
        merged = {**d, **{k: v for k, v in overrides.items() if v is not None}}
        try:
            return cls(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path, **overrides) -> "StrategyConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(d, **overrides)


@dataclass(frozen=True)
class ImpedanceGains:
    Lambda: np.ndarray
    D: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        for name in ("Lambda", "D", "K"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        if np.any(self.Lambda <= 0) or np.any(self.K <= 0) or np.any(self.D < 0):
            raise ValueError("Lambda and K must be positive, D non-negative")


@dataclass(frozen=True)
class TankState:
    x_t: float
    T_min: float = 0.05
    T_max: float = 2.0
    eta: float = -0.5
    sigma: int = 1

    @property
    def energy(self) -> float:
        return 0.5 * self.x_t * self.x_t

    @classmethod
    def from_energy(cls, T: float, T_min=0.05, T_max=2.0, eta=-0.5) -> "TankState":
        return cls(math.sqrt(2.0 * T), T_min, T_max, eta, 0 if T >= T_max else 1)


@dataclass(frozen=True)
class CycleState:
    """Feedback for one control cycle.

    ``s`` and ``grad`` are the map surface height and gradient at the probe,
    ``kappa``/``lambda_`` the map viscoelastic parameters, ``v_ee`` the probe
    velocity (m/s).
    """

    x_tilde: np.ndarray
    xd_tilde: np.ndarray = field(default_factory=lambda: np.zeros(3))
    xdd_tilde: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s: float = 0.0
    grad: tuple[float, float] = (0.0, 0.0)
    kappa: float = 0.0
    lambda_: float = 0.0
    beta: float = 1.35
    v_ee: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("x_tilde", "xd_tilde", "xdd_tilde", "v_ee"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        if self.kappa < 0 or self.lambda_ < 0:
            raise ValueError("map values must be non-negative")


@dataclass(frozen=True)
class CycleReport:
    status: str
    active_set: tuple[int, ...]
    T: float
    T_dot: float
    F_bound: float
    F_d: float
    eps_dot: float
    iterations: int = 0


def interaction_force(g: ImpedanceGains, c: CycleState) -> np.ndarray:
    """Impedance model force ``Lambda xdd + D xd + K x`` (diagonal gains)."""
    return g.Lambda * c.xdd_tilde + g.D * c.xd_tilde + g.K * c.x_tilde


def penetration_rate(c: CycleState, v_ee=None) -> float:
    """``eps_dot = grad(s) . v_xy - z_dot``: positive when moving into the tissue."""
    v = c.v_ee if v_ee is None else np.asarray(v_ee, dtype=float)
    return float(c.grad[0] * v[0] + c.grad[1] * v[1] - v[2])


def force_bound_from_penetration(kappa: float, lambda_: float, beta: float, eps_bound: float, eps_dot: float) -> float:
    """Hunt-Crossley force at penetration ``eps_bound`` and rate ``eps_dot``, floored at 0."""
    if eps_bound <= 0:
        return 0.0
    e = eps_bound**beta
    return max(0.0, kappa * e + lambda_ * eps_dot * e)


def damping_design(K, Lambda, zeta: float):
    """``D = 2 zeta sqrt(K Lambda)`` per axis."""
    return 2.0 * zeta * np.sqrt(np.asarray(K, dtype=float) * np.asarray(Lambda, dtype=float))


def strategy_targets(cfg: StrategyConfig, c: CycleState) -> tuple[float, float, float]:
    """``(F_d_z, F_cap_z, eps_dot)`` for a variable-stiffness mode."""
    eps_dot = penetration_rate(c)
    if cfg.mode == "vs-cf":
        bound = force_bound_from_penetration(c.kappa, c.lambda_, c.beta, cfg.eps_max, eps_dot)
        return cfg.F_ref, min(cfg.F_max, bound), eps_dot
    if cfg.mode == "vs-vf":
        target = force_bound_from_penetration(c.kappa, c.lambda_, c.beta, cfg.eps_d, eps_dot)
        return target, min(cfg.F_max, cfg.F_min_const), eps_dot
    raise ValueError(f"mode {cfg.mode!r} has no QP")


def assemble_qp(cfg: StrategyConfig, c: CycleState, tank: TankState, D, T_prev: float | None = None):
    """Stiffness QP for one cycle.

    Returns ``(problem, F_d_z, F_cap_z, eps_dot)``. The decision variable is
    ``diag(K)``. General rows, in order: pressing-force ceiling, pulling-force
    floor, tank-energy row, power row.
    """
    if T_prev is None:
        T_prev = tank.energy
    F_dz, cap, eps_dot = strategy_targets(cfg, c)
    x, xd = c.x_tilde, c.xd_tilde
    Q, R = np.array(cfg.Q), np.array(cfg.R)
    K_min, K_max = np.array(cfg.K_min), np.array(cfg.K_max)
    if cfg.force_model == "full":
        const = np.asarray(cfg.Lambda) * c.xdd_tilde + np.asarray(D, dtype=float) * xd
    else:
        const = np.zeros(3)
    F_d = np.array([0.0, 0.0, F_dz])
    H = np.diag(Q * x * x + R)
    g = Q * x * (const - F_d) - R * K_min
    # F_z = const_z + x_z K_z within [-F_max, cap]
    ez = np.array([0.0, 0.0, 1.0])
    rows = [x[2] * ez, -x[2] * ez]
    rhs = [cap - const[2], cfg.F_max + const[2]]
    D_floor = damping_design(K_min, cfg.Lambda, cfg.zeta)
    base = tank.sigma * float(xd @ (D_floor * xd)) - float(x @ (K_min * xd))
    rows += [-(x * xd), -(x * xd)]
    rhs += [base + (T_prev - tank.T_min) / cfg.dt, base - tank.eta]
    p = QpProblem(H, g, K_min, K_max, np.array(rows), np.array(rhs))
    return p, F_dz, cap, eps_dot


def tank_step(tank: TankState, K, K_min, D, c: CycleState, dt: float) -> TankState:
    """Explicit Euler step of the tank state.

    ``w = -(K - K_min) x_tilde`` while the tank holds more than ``T_min``;
    ``x_t_dot = sigma/x_t * xd^T D xd - w^T xd / x_t``. Storage is disabled
    (``sigma = 0``) once the energy reaches ``T_max``.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if tank.x_t <= 1e-6:
        raise FloatingPointError(f"tank state {tank.x_t} below numerical guard")
    x, xd = c.x_tilde, c.xd_tilde
    K = np.asarray(K, dtype=float)
    w = -(K - np.asarray(K_min, dtype=float)) * x if tank.energy > tank.T_min else np.zeros(3)
    diss = float(xd @ (np.asarray(D, dtype=float) * xd))
    xdot = (tank.sigma * diss - float(w @ xd)) / tank.x_t
    x_new = tank.x_t + dt * xdot
    T_new = 0.5 * x_new * x_new
    return replace(tank, x_t=x_new, sigma=0 if T_new >= tank.T_max else 1)


def control_cycle(
    cfg: StrategyConfig,
    c: CycleState,
    tank: TankState,
    T_prev: float | None = None,
    solver: ActiveSetSolver | None = None,
    D_prev=None,
):
    """One variable-stiffness cycle: QP, fallback, damping design, tank step.

    Returns ``(gains, new_tank, report)``. If the tank is at its floor, or the
    QP is not solved to optimality, the stiffness falls back to ``K_min``.
    """
    if cfg.mode not in VS_MODES:
        raise ValueError(f"control_cycle needs a variable-stiffness mode, got {cfg.mode!r}")
    K_min = np.array(cfg.K_min)
    if D_prev is None:
        D_prev = damping_design(K_min, cfg.Lambda, cfg.zeta)
    T0 = tank.energy
    problem, F_dz, cap, eps_dot = assemble_qp(cfg, c, tank, D_prev, T_prev)
    status, active, iters = "floor", (), 0
    K = K_min.copy()
    if T0 > tank.T_min:
        sol = (solver or ActiveSetSolver(cfg.qp_max_iter)).solve(problem)
        status, active, iters = sol.status, sol.active_set, sol.iterations
        if sol.status == OPTIMAL:
            K = np.clip(sol.u, K_min, np.array(cfg.K_max))
    D = damping_design(K, cfg.Lambda, cfg.zeta)
    new_tank = tank_step(tank, K, K_min, D, c, cfg.dt)
    T1 = new_tank.energy
    report = CycleReport(status, active, T1, (T1 - T0) / cfg.dt, cap, F_dz, eps_dot, iters)
    return ImpedanceGains(np.array(cfg.Lambda), D, K), new_tank, report


class VariableImpedanceController:
    """Stateful wrapper: owns the tank, the warm-started solver and the last gains."""

    def __init__(self, cfg: StrategyConfig):
        if cfg.mode not in VS_MODES:
            raise ValueError(f"variable-stiffness mode required, got {cfg.mode!r}")
        self.cfg = cfg
        self.solver = ActiveSetSolver(cfg.qp_max_iter)
        self.tank = TankState.from_energy(cfg.T0, cfg.T_min, cfg.T_max, cfg.eta)
        K = np.array(cfg.K_min)
        self.gains = ImpedanceGains(np.array(cfg.Lambda), damping_design(K, cfg.Lambda, cfg.zeta), K)

    def step(self, c: CycleState):
        self.gains, self.tank, report = control_cycle(self.cfg, c, self.tank, solver=self.solver, D_prev=self.gains.D)
        return self.gains, report
