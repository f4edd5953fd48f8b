import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from passivevic.controller import (
    ConfigError,
    CycleState,
    ImpedanceGains,
    StrategyConfig,
    TankState,
    VariableImpedanceController,
    assemble_qp,
    control_cycle,
    damping_design,
    force_bound_from_penetration,
    interaction_force,
    penetration_rate,
    tank_step,
)
from passivevic.qp import OPTIMAL, qp_solve
from qp_oracle import brute_force

CFG = StrategyConfig()
K_MIN = np.array(CFG.K_min)


def gains(K):
    K = np.broadcast_to(np.asarray(K, float), (3,)).copy()
    return ImpedanceGains(np.ones(3), damping_design(K, 1.0, 0.707), K)


def random_state(rng, kappa=True):
    return CycleState(
        x_tilde=rng.normal(0, 0.01, 3),
        xd_tilde=rng.normal(0, 0.05, 3),
        xdd_tilde=rng.normal(0, 0.5, 3),
        s=0.0,
        grad=tuple(rng.normal(0, 0.1, 2)),
        kappa=float(rng.uniform(500, 5000)) if kappa else 0.0,
        lambda_=float(rng.uniform(0, 3000)),
        v_ee=rng.normal(0, 0.02, 3),
    )


# ------------------------------------------------------------ interaction law
def test_interaction_force_zero_state():
    assert np.all(interaction_force(gains(100), CycleState(np.zeros(3))) == 0)


def test_interaction_force_hooke():
    f = interaction_force(gains(100), CycleState([0, 0, 0.01]))
    assert f == pytest.approx([0, 0, 1.0], abs=1e-15)


def test_interaction_force_affine_in_stiffness():
    rng = np.random.default_rng(0)
    c = random_state(rng)
    base = ImpedanceGains(np.ones(3), np.full(3, 14.0), np.full(3, 300.0))
    h = 1.0
    for i in range(3):
        K2 = base.K.copy()
        K2[i] += h
        slope = (interaction_force(replace(base, K=K2), c) - interaction_force(base, c)) / h
        expected = np.zeros(3)
        expected[i] = c.x_tilde[i]
        assert np.abs(slope - expected).max() < 1e-10


# ------------------------------------------------------------ penetration rate
@pytest.mark.parametrize("grad,v,expected", [
    ((0, 0), (0, 0, 0), 0.0),
    ((0, 0), (0, 0, -0.01), 0.01),
    ((0.1, 0), (0.01, 0, 0), 0.001),
])
def test_penetration_rate(grad, v, expected):
    assert penetration_rate(CycleState(np.zeros(3), grad=grad), v) == pytest.approx(expected, abs=1e-15)


# ---------------------------------------------------------------- force bound
def test_force_bound_frozen_value():
    f = force_bound_from_penetration(2000, 0, 1.35, 0.02, 0.0)
    assert f == pytest.approx(2000 * math.exp(1.35 * math.log(0.02)), rel=1e-14)
    assert f == pytest.approx(10.17, abs=5e-3)


def test_force_bound_zero_depth():
    assert force_bound_from_penetration(2000, 500, 1.35, 0.0, 0.3) == 0.0


def test_force_bound_rate_monotone():
    assert force_bound_from_penetration(1000, 500, 1.35, 0.01, 0.05) > force_bound_from_penetration(1000, 500, 1.35, 0.01, 0)


def test_force_bound_floored():
    assert force_bound_from_penetration(1000, 5000, 1.35, 0.01, -10.0) == 0.0


# ------------------------------------------------------------------- damping
def test_damping_examples():
    assert damping_design(100, 1, 0.707) == pytest.approx(14.14, abs=1e-12)
    assert damping_design(400, 1, 0.0) == 0.0
    assert damping_design(400, 1, 0.707) / damping_design(100, 1, 0.707) == pytest.approx(2.0)


# ----------------------------------------------------------------- QP assembly
def test_zero_error_gives_k_min():
    tank = TankState.from_energy(1.0)
    p, *_ = assemble_qp(CFG, CycleState(np.zeros(3)), tank, damping_design(K_MIN, 1, 0.707))
    assert np.all(p.b[2:] >= 0)
    sol = qp_solve(p)
    assert sol.status == OPTIMAL
    assert np.array_equal(sol.u, K_MIN)


def test_static_hessian_matches_hand_derivation():
    x = np.array([0.003, -0.002, 0.01])
    cfg = replace(CFG, Q=(1.0, 2.0, 3.0), R=(1e-6, 2e-6, 3e-6))
    p, F_d, *_ = assemble_qp(cfg, CycleState(x, kappa=1000, lambda_=100), TankState.from_energy(1.0),
                             damping_design(K_MIN, 1, 0.707))
    Q, R = np.diag(cfg.Q), np.diag(cfg.R)
    assert np.allclose(p.H, np.diag(x) @ Q @ np.diag(x) + R, rtol=1e-14, atol=0)
    # linear term: d/dK of 1/2 |x K - F_d|_Q^2 + 1/2 |K - K_min|_R^2 at K = 0
    Fd = np.array([0, 0, F_d])
    assert np.allclose(p.g, -np.diag(x) @ Q @ Fd - R @ K_MIN, rtol=1e-14, atol=0)


def test_force_row_inactive_on_soft_region():
    # soft flat tissue: bound at eps_max well above F_ref, so the pressing ceiling never binds
    c = CycleState([0, 0, 0.01], kappa=1000, lambda_=2000)
    cfg = CFG
    p, F_d, cap, _ = assemble_qp(cfg, c, TankState.from_energy(1.0), damping_design(K_MIN, 1, 0.707))
    assert cap > F_d
    sol = qp_solve(p)
    assert 6 not in sol.active_set
    # unconstrained minimiser of (x K - F_d)^2 Q + (K - K_min)^2 R
    x, Q, R = 0.01, cfg.Q[2], cfg.R[2]
    assert sol.u[2] == pytest.approx((Q * x * F_d + R * cfg.K_min[2]) / (Q * x * x + R), rel=1e-12)


def test_vs_vf_targets_bound_at_desired_depth():
    cfg = replace(CFG, mode="vs-vf")
    c = CycleState([0, 0, 0.02], kappa=1500, lambda_=0)
    _, F_d, cap, _ = assemble_qp(cfg, c, TankState.from_energy(1.0), damping_design(K_MIN, 1, 0.707))
    assert F_d == pytest.approx(force_bound_from_penetration(1500, 0, 1.35, cfg.eps_d, 0))
    assert cap == cfg.F_min_const


# ----------------------------------------------------------------------- tank
def test_tank_unchanged_without_storage_at_k_min():
    tank = TankState(math.sqrt(2), sigma=0)
    c = CycleState([0.01, 0, 0.02], [0.1, 0, -0.2])
    assert tank_step(tank, K_MIN, K_MIN, damping_design(K_MIN, 1, 0.707), c, 0.002).x_t == tank.x_t


def test_tank_frozen_step():
    # choose D and rate so that xd^T D xd = 0.4 W
    D = np.array([10.0, 10.0, 10.0])
    xd = np.array([0.0, 0.0, 0.2])
    new = tank_step(TankState(math.sqrt(2)), K_MIN, K_MIN, D, CycleState(np.zeros(3), xd), 0.002)
    assert new.x_t == pytest.approx(1.41478, abs=5e-6)
    assert new.energy == pytest.approx(1.0008, abs=5e-5)


@given(st.floats(0.06, 1.9), st.lists(st.floats(-1, 1), min_size=3, max_size=3),
       st.lists(st.floats(-0.05, 0.05), min_size=3, max_size=3))
def test_pure_dissipation_never_drains(T, xd, x):
    tank = TankState.from_energy(T)
    new = tank_step(tank, K_MIN, K_MIN, damping_design(K_MIN, 1, 0.707), CycleState(x, xd), 0.002)
    assert new.energy >= tank.energy - 1e-15


def test_tank_guard():
    with pytest.raises(FloatingPointError):
        tank_step(TankState(1e-7), K_MIN, K_MIN, np.ones(3), CycleState(np.zeros(3)), 0.002)


def test_storage_disabled_above_t_max():
    tank = TankState.from_energy(1.999)
    c = CycleState(np.zeros(3), [0, 0, 1.0])
    new = tank_step(tank, K_MIN, K_MIN, np.full(3, 100.0), c, 0.002)
    assert new.energy >= 2.0 and new.sigma == 0


# -------------------------------------------------------------- control cycle
def test_empty_tank_gives_k_min():
    c = CycleState([0, 0, 0.002], [0, 0, 0.0], kappa=3000, lambda_=500)
    g, _, rep = control_cycle(CFG, c, TankState.from_energy(0.05))
    assert np.array_equal(g.K, K_MIN)
    assert rep.status == "floor"


def test_contact_loss_respects_tank_rows():
    # error shrinking quickly: raising K would pump energy out of the tank
    c = CycleState([0, 0, 0.005], [0, 0, -0.5], kappa=0.0, lambda_=0.0)
    for T in (1.0, 0.0502):
        tank = TankState.from_energy(T)
        g, new, rep = control_cycle(CFG, c, tank)
        extracted = float((g.K - K_MIN) @ (c.x_tilde * -c.xd_tilde)) * CFG.dt
        assert extracted <= (T - CFG.T_min) + 1e-12
        assert extracted / CFG.dt <= abs(CFG.eta) + 1e-9
        assert new.energy >= CFG.T_min - abs(CFG.eta) * CFG.dt
        assert np.all(g.K >= K_MIN) and np.all(g.K <= np.array(CFG.K_max))


def test_static_equilibrium_beats_endpoints():
    c = CycleState([0, 0, 0.008], kappa=1000, lambda_=2000)
    g, _, rep = control_cycle(CFG, c, TankState.from_energy(1.0))
    err = abs(g.K[2] * 0.008 - CFG.F_ref)
    assert rep.status == OPTIMAL
    assert err <= abs(CFG.K_min[2] * 0.008 - CFG.F_ref)
    assert err <= abs(CFG.K_max[2] * 0.008 - CFG.F_ref)


def test_control_cycle_rejects_baseline_modes():
    with pytest.raises(ValueError):
        control_cycle(replace(CFG, mode="cs"), CycleState(np.zeros(3)), TankState.from_energy(1.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["vs-cf", "vs-vf"]), st.floats(0.05, 0.5))
def test_passivity_and_valve_along_random_trajectory(seed, mode, T0):
    rng = np.random.default_rng(seed)
    cfg = replace(CFG, mode=mode, T0=T0)
    vic = VariableImpedanceController(cfg)
    T_prev = vic.tank.energy
    for _ in range(200):
        g, rep = vic.step(random_state(rng, kappa=rng.random() < 0.8))
        assert rep.T >= cfg.T_min - abs(cfg.eta) * cfg.dt
        if rep.status == OPTIMAL:
            assert (rep.T - T_prev) / cfg.dt >= cfg.eta - 1e-9
        assert np.all(g.K >= K_MIN) and np.all(g.K <= np.array(cfg.K_max))
        T_prev = rep.T


def test_qp_objective_matches_brute_force_on_cycle_states():
    rng = np.random.default_rng(42)
    for k in range(200):
        cfg = replace(CFG, mode="vs-cf" if k % 2 else "vs-vf")
        tank = TankState.from_energy(float(rng.uniform(0.05, 2.0)))
        p, *_ = assemble_qp(cfg, random_state(rng), tank, damping_design(K_MIN, 1, 0.707))
        sol = qp_solve(p)
        if sol.status != OPTIMAL:
            continue
        _, f_ref = brute_force(p.H, p.g, p.lb, p.ub, p.A, p.b)
        assert abs(sol.objective - f_ref) <= 1e-6 * max(abs(f_ref), 1e-12) + 1e-12


# --------------------------------------------------------------------- config
@pytest.mark.parametrize("field,value", [("eps_d", 0.02), ("Q", -1.0), ("eta", 0.1), ("K_max", 50.0),
                                         ("mode", "fast"), ("F_min_const", 20.0)])
def test_config_errors_name_field(field, value):
    with pytest.raises(ConfigError, match=field):
        StrategyConfig.from_dict({field: value})


def test_config_unknown_field():
    with pytest.raises(ConfigError, match="gain"):
        StrategyConfig.from_dict({"gain": 1})


def test_config_roundtrip_and_override(tmp_path):
    cfg = replace(CFG, F_ref=3.0, K_max=(900.0, 900.0, 800.0))
    cfg.save(tmp_path / "c.json")
    assert StrategyConfig.load(tmp_path / "c.json") == cfg
    assert StrategyConfig.load(tmp_path / "c.json", mode="vs-vf").mode == "vs-vf"
