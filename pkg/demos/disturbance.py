"""Lift and then drop the phantom under each variable-stiffness mode.

The drop takes the surface below the target so contact is lost. The energy
tank keeps the stiffness changes passive, and the safety certificates are
checked on each log.

    python3 demos/disturbance.py
"""

from passivevic import (
    PalpationProtocol,
    ScanPlan,
    StrategyConfig,
    build_body_map,
    default_lift,
    default_phantom,
    run_scan,
    safety_certificates,
    survey_grid,
)


def main():
    ph = default_phantom()
    bm = build_body_map(survey_grid(ph, 0.01, PalpationProtocol(noise_sigma=0.05), seed=0))
    for mode in ("vs-cf", "vs-vf"):
        cfg = StrategyConfig(mode=mode)
        log = run_scan(cfg, ph, bm, ScanPlan(), default_lift())
        certs = safety_certificates(log, cfg)
        print(f"{mode}: contact lost for {100 * (1 - log['contact'].mean()):.1f}% of cycles, "
              f"min tank energy {certs['tank_floor']['min_T']:.3f} J")
        for name, c in certs.items():
            if isinstance(c, dict):
                print(f"  {name:<18} {'pass' if c['pass'] else 'FAIL'}")


if __name__ == "__main__":
    main()
