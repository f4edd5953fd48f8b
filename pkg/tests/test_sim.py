from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import brentq

from passivevic.controller import StrategyConfig
from passivevic.core import BaseSurface, Phantom, default_phantom
from passivevic.estimation import PalpationProtocol, survey_grid
from passivevic.gpr import build_body_map
from passivevic.sim import (
    LOG_COLUMNS,
    NO_DISTURBANCE,
    Disturbance,
    PlantState,
    ScanLog,
    ScanPlan,
    SimulationBlowup,
    contact_intervals,
    default_lift,
    plant_acceleration,
    run_disturbance_suite,
    run_scan,
    run_summary,
    safety_certificates,
    step_plant,
    tissue_contact,
)

FLAT = Phantom((0, 0.1, 0, 0.1), 1000.0, 2000.0, 1.35, BaseSurface(), ())
SHORT = ScanPlan(duration=4.0)


@pytest.fixture(scope="module")
def ph():
    return default_phantom()


@pytest.fixture(scope="module")
def bm(ph):
    return build_body_map(survey_grid(ph, 0.01, PalpationProtocol(noise_sigma=0.05), seed=0))


# ---------------------------------------------------------------------- plant
def test_ballistic_coast():
    s = PlantState(np.array([0.05, 0.05, 0.05]), np.array([0.01, -0.02, 0.03]))
    for k in range(100):
        s = step_plant(s, np.zeros(3), FLAT, NO_DISTURBANCE, 0.001, k * 0.001)
    assert np.allclose(s.pos, [0.051, 0.048, 0.053], atol=1e-15)
    assert np.all(s.acc == 0)


def test_static_equilibrium():
    K, z_d = 400.0, -0.02
    # independent fixed point: kappa (-z)^beta = K (z - z_d)
    z = brentq(lambda z: 1000.0 * (-z) ** 1.35 - K * (z - z_d), z_d, -1e-12, xtol=1e-15)
    s = PlantState(np.array([0.05, 0.05, z]), np.zeros(3))
    F = -K * (s.pos - np.array([0.05, 0.05, z_d]))
    assert np.abs(plant_acceleration(s, F, FLAT, NO_DISTURBANCE, 0.0, np.ones(3))).max() < 1e-8


def test_energy_audit():
    K, D, z_d, dt = 500.0, 20.0, -0.01, 1e-4
    s = PlantState(np.array([0.05, 0.05, 0.005]), np.zeros(3))

    def stored(st):
        eps = max(0.0, -st.pos[2])
        return 0.5 * st.vel[2] ** 2 + 0.5 * K * (st.pos[2] - z_d) ** 2 + 1000.0 * eps**2.35 / 2.35

    E0, dissipated = stored(s), 0.0
    for k in range(10000):
        F = np.array([0.0, 0.0, -D * s.vel[2] - K * (s.pos[2] - z_d)])
        new = step_plant(s, F, FLAT, NO_DISTURBANCE, dt, k * dt)
        eps = max(0.0, -s.pos[2])
        dissipated += dt * (D + 2000.0 * eps**1.35) * new.vel[2] ** 2
        s = new
    assert dissipated > 0.01
    assert abs(E0 - stored(s) - dissipated) < 1e-4


def test_contact_force_zero_out_of_contact():
    c = tissue_contact(FLAT, np.array([0.05, 0.05, 0.001]), np.array([0, 0, -1.0]), 0.0)
    assert c.force == 0.0 and c.eps < 0


def test_disturbance_profile_continuous():
    d = default_lift(2.0)
    t = np.linspace(0, 20, 20001)
    h = np.array([d.offset(ti)[0] for ti in t])
    assert h[0] == 0 and h[-1] == 0
    assert np.abs(np.diff(h)).max() < 0.03 * 1e-3 + 1e-12
    assert h.max() == pytest.approx(0.02) and h.min() == pytest.approx(-0.03)


def test_bad_disturbance_rejected():
    with pytest.raises(ValueError):
        Disturbance(((1.0, 0.0, 1.0, 1.0, 0.02),))


# ------------------------------------------------------------------ scan runs
@pytest.mark.parametrize("mode", ["vs-cf", "vs-vf", "cs", "cf"])
def test_scan_log_complete_and_consistent(mode, ph, bm):
    cfg = StrategyConfig(mode=mode)
    log = run_scan(cfg, ph, bm, SHORT)
    assert len(log) == 2000
    assert np.allclose(np.diff(log["t"]), cfg.dt)
    assert np.array_equal(log["contact"], log["eps"] >= 0)
    for c in LOG_COLUMNS:
        if c not in ("qp_status", "T", "T_dot", "F_d", "F_bound"):
            assert np.all(np.isfinite(log[c].astype(float))), c
    if mode.startswith("vs"):
        K = np.column_stack([log["K_x"], log["K_y"], log["K_z"]])
        assert np.all(K >= 100) and np.all(K <= 1000)
        assert log["T"].min() >= cfg.T_min - abs(cfg.eta) * cfg.dt


def test_scan_deterministic(ph, bm):
    cfg = StrategyConfig(mode="vs-cf")
    assert run_scan(cfg, ph, bm, SHORT, seed=3).equals(run_scan(cfg, ph, bm, SHORT, seed=3))


def test_zero_height_lift_matches_nominal(ph, bm):
    cfg = StrategyConfig(mode="vs-vf")
    zero = Disturbance(((1.0, 1.0, 1.0, 1.0, 0.0),))
    assert run_scan(cfg, ph, bm, SHORT, zero).equals(run_scan(cfg, ph, bm, SHORT))


def test_log_csv_roundtrip(tmp_path, ph, bm):
    log = run_scan(StrategyConfig(mode="vs-cf"), ph, bm, ScanPlan(duration=0.5))
    log.to_csv(tmp_path / "log.csv")
    back = ScanLog.from_csv(tmp_path / "log.csv", "vs-cf")
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == ",".join(LOG_COLUMNS)
    assert np.allclose(back["f_tissue"], log["f_tissue"], rtol=1e-8, atol=1e-12)
    assert np.array_equal(back["contact"], log["contact"])
    assert list(back["qp_status"]) == list(log["qp_status"])


def test_blowup_reports_cycle(ph, bm):
    cfg = StrategyConfig(mode="cs", Lambda=1e-4)
    with pytest.raises(SimulationBlowup) as info:
        run_scan(cfg, ph, bm, SHORT)
    assert info.value.cycle >= 0


def test_map_must_cover_path(ph, bm):
    with pytest.raises(ValueError):
        run_scan(StrategyConfig(), ph, bm, ScanPlan(start=(0.05, 0.01), end=(0.2, 0.01)))


def test_dt_phys_must_divide_control_period(ph, bm):
    with pytest.raises(ValueError):
        run_scan(StrategyConfig(), ph, bm, SHORT, dt_phys=0.0015)


def test_cs_presses_harder_on_ribs(ph, bm):
    log = run_scan(StrategyConfig(mode="cs"), ph, bm, ScanPlan(duration=8.0))
    y, f = log["y"], log["f_tissue"]
    t = log["t"]
    soft = (y < 0.027) & (t > 1.0)
    rib = (np.abs(y - 0.055) < 0.004) | (np.abs(y - 0.07) < 0.004)
    assert f[rib].max() > f[soft].max()


# ------------------------------------------------------------ certificates
def test_contact_intervals():
    assert contact_intervals(np.array([1, 0, 0, 1, 1, 0], bool)) == [(1, 3), (5, 6)]
    assert contact_intervals(np.ones(4, bool)) == []


def _synthetic_log(T, K, contact, Tdot=None, status="optimal"):
    n = len(T)
    cols = {c: np.zeros(n) for c in LOG_COLUMNS}
    cols["T"] = np.asarray(T, float)
    cols["T_dot"] = np.zeros(n) if Tdot is None else np.asarray(Tdot, float)
    for a in ("K_x", "K_y", "K_z"):
        cols[a] = np.asarray(K, float)
    cols["contact"] = np.asarray(contact, bool)
    cols["qp_status"] = np.array([status] * n, dtype=object)
    return ScanLog("vs-cf", cols, 0.002)


def test_certificates_detect_violations():
    cfg = StrategyConfig(T0=0.05)
    good = _synthetic_log([0.05] * 4, [100] * 4, [0, 0, 1, 1])
    assert safety_certificates(good, cfg)["all_pass"]
    assert safety_certificates(good, cfg)["k_min_after_floor"]["n_checked"] == 2
    stiff = _synthetic_log([0.05] * 4, [100, 300, 100, 100], [0, 0, 1, 1])
    assert not safety_certificates(stiff, cfg)["k_min_after_floor"]["pass"]
    low = _synthetic_log([0.05, 0.04, 0.05, 0.05], [100] * 4, [1] * 4)
    assert not safety_certificates(low, cfg)["tank_floor"]["pass"]
    drain = _synthetic_log([1, 1, 1, 1], [100] * 4, [0, 1, 1, 1], Tdot=[0, -0.6, 0, 0])
    certs = safety_certificates(drain, StrategyConfig())
    assert not certs["recontact_power"]["pass"] and not certs["power_valve"]["pass"]


def test_disturbance_suite_summary(ph, bm):
    logs, summary = run_disturbance_suite(ph, bm, ScanPlan(duration=6.0), default_lift(1.0), modes=("vs-vf", "cf"))
    assert set(logs) == {"vs-vf", "cf"}
    assert summary["vs-vf"]["safety"]["all_pass"]
    assert "cf_descending_while_surface_falls" not in summary["vs-vf"]
    assert summary["cf"]["max_force"] >= 0


def test_run_summary_fields(ph, bm):
    cfg = StrategyConfig(mode="cs")
    s = run_summary(run_scan(cfg, ph, bm, ScanPlan(duration=1.0)), cfg)
    assert {"mode", "cycles", "max_force", "max_penetration", "contact_fraction"} <= set(s)
    assert "safety" not in s


def test_vs_run_with_empty_tank_keeps_k_min_out_of_contact(ph, bm):
    cfg = StrategyConfig(mode="vs-cf", T0=0.05)
    log = run_scan(cfg, ph, bm, replace(SHORT, duration=1.0))
    certs = safety_certificates(log, cfg)
    assert certs["k_min_after_floor"]["n_checked"] > 0
    assert certs["all_pass"]


def test_lift_separation_behaviour(ph, bm):
    logs, summary = run_disturbance_suite(ph, bm, ScanPlan(duration=12.0), default_lift(1.0), modes=("vs-vf", "cf"),
                                          workers=2)
    vf = logs["vs-vf"]
    i0, i1 = max(contact_intervals(vf["contact"]), key=lambda iv: iv[1] - iv[0])
    assert (i1 - i0) * vf.dt > 2.0
    # once settled in free space the spring renders no force and the stiffness sits at its floor
    rows = slice(i0 + int(0.5 / vf.dt), i1)
    K_z = vf["K_z"][rows]
    assert np.abs(K_z * vf["xt_z"][rows]).max() < 1e-3
    assert np.median(K_z) == 100.0
    assert summary["vs-vf"]["safety"]["all_pass"]
    # the force loop keeps pushing down after the falling surface
    assert summary["cf"]["cf_descending_while_surface_falls"] > 0.9
    assert summary["cf"]["descent_below_setpoint"] > 0.01
