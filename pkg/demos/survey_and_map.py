"""Palpate the default phantom on a 1 cm grid, then build the body map.

Prints the identified stiffness at a few nodes next to the ground truth and
the map's rib/soft contrast.

    python3 demos/survey_and_map.py
"""

import numpy as np

from passivevic import PalpationProtocol, build_body_map, default_phantom, survey_grid


def main():
    ph = default_phantom()
    est = survey_grid(ph, 0.01, PalpationProtocol(noise_sigma=0.05), seed=0)
    print(f"{len(est)} nodes, {sum(not e.ok for e in est)} flagged")
    print("   x      y     kappa_hat  kappa_true")
    for e in est[::17]:
        print(f"{e.x:.3f}  {e.y:.3f}  {e.fit.params.kappa:9.1f}  {ph.point(e.x, e.y).kappa:9.1f}")

    bm = build_body_map(est)
    P = np.random.default_rng(1).uniform(0.005, 0.095, (50, 2))
    truth = np.array([ph.point(x, y).kappa for x, y in P])
    err = np.abs(bm.kappa(P[:, 0], P[:, 1]) / truth - 1)
    print(f"map kappa error at 50 random points: mean {err.mean():.3f}, worst {err.max():.3f}")
    print(f"rib/soft contrast: {bm.kappa(0.05, 0.055) / bm.kappa(*ph.soft_reference):.2f}")


if __name__ == "__main__":
    main()
