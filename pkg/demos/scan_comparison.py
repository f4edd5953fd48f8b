"""Compare the four control modes on a nominal 30 s scan across the ribs.

The variable-stiffness modes hold the force (VS-CF) or the penetration
(VS-VF); constant stiffness presses much harder on the ribs.

    python3 demos/scan_comparison.py
"""

import numpy as np

from passivevic import PalpationProtocol, ScanPlan, StrategyConfig, build_body_map, default_phantom, run_scan, survey_grid


def main():
    ph = default_phantom()
    bm = build_body_map(survey_grid(ph, 0.01, PalpationProtocol(noise_sigma=0.05), seed=0))
    print("mode    soft force  rib force  max eps [mm]  K_z range [N/m]")
    for mode in ("vs-cf", "vs-vf", "cs", "cf"):
        log = run_scan(StrategyConfig(mode=mode), ph, bm, ScanPlan())
        f, y, t = log["f_tissue"], log["y"], log["t"]
        soft = (y < 0.027) & (t > 2.0)
        rib = np.abs(y - 0.055) < 0.004
        print(f"{mode:<7} {f[soft].mean():10.2f}  {f[rib].mean():9.2f}  {1e3 * log['eps'].max():12.2f}"
              f"  {log['K_z'].min():6.0f} .. {log['K_z'].max():.0f}")


if __name__ == "__main__":
    main()
