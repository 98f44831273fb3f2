"""Linear-quadratic game: solver output against the game Riccati equation.

For a linear plant with quadratic cost the game is solved by one Newton-like
iteration from a zero nominal. The continuous-time Riccati solution is the
reference; the remaining gap comes from the Euler discretization of the
dynamics and shrinks linearly with the step size.

Run with ``python demos/lq_game.py``.
"""
import numpy as np

from gtddp.acceptance import lq_comparison
from gtddp.config import lq_fixture_config
from gtddp.pipeline import build_plant, solve_game


def main():
    print(f"{'dt':>9} {'iters':>5} {'cost rel':>10} {'K_u rel':>10} {'K_w rel':>10}")
    prev = None
    for dt in (4e-3, 2e-3, 1e-3, 5e-4, 2.5e-4):
        r = lq_comparison(dt)
        print(f"{dt:9.2e} {r['n_accepted']:5d} {r['cost_rel']:10.3e} {r['K_u_rel']:10.3e} {r['K_w_rel']:10.3e}")
        if prev is not None:
            print(f"{'':9} gain error ratio {prev / r['K_u_rel']:.2f}")
        prev = r["K_u_rel"]

    # attenuation level: the worst-case disturbance fades as gamma grows
    for gamma in (0.05, 0.5, 5.0, 50.0):
        cfg = lq_fixture_config(gamma=gamma, dt=1e-3, max_iters=1)
        res = solve_game(cfg, build_plant(cfg))
        print(f"gamma={gamma:<5g} max |l_w| at the first pass = {np.abs(res.initial_gains.l_w).max():.4g}")


if __name__ == "__main__":
    main()
