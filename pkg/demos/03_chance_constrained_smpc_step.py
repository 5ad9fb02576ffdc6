"""Solve one chance-constrained SMPC step on the bundled reactor model.

Loads the packaged configuration, solves the receding-horizon problem at
the nominal initial state, and prints how the distributionally robust
tightening mean + kappa * std keeps the constrained concentration below
its bound across the prediction horizon.
"""

import numpy as np

from pcmpc import cli, controller
from pcmpc.config import assemble_experiment, load_config
from pcmpc.moments import state_mean, state_variance


def main():
    cfg = load_config(cli.bundled_config_path("vandevusse"))
    experiment = assemble_experiment(cfg)
    prob = experiment.problem
    basis = experiment.basis
    cc = prob.constraints[0]
    kappa = controller.kappa(cc.beta)
    print(f"horizon {prob.horizon}, beta {cc.beta}, kappa {kappa:.4f}")
    print(f"constraint: x2 <= {cc.d} with probability >= {cc.beta}\n")

    x0 = np.asarray(cfg.simulation.x0_mean, dtype=float)
    sol = controller.solve_smpc(prob, x0)
    print(f"first input {sol.policy.offsets[0] + sol.policy.gains[0] @ x0}")
    print(f"predicted expected cost {sol.value:.4f}")
    print(f"converged: {sol.converged}, softened: {sol.fallback}\n")

    traj = controller.moment_trajectory(prob, x0, sol)
    print(f"{'stage':>5} {'mean x2':>10} {'std x2':>9} {'mean + kappa*std':>17} {'bound':>7}")
    for i in range(1, min(prob.horizon, 12) + 1):
        mean = state_mean(traj[i], basis)[1]
        std = np.sqrt(state_variance(traj[i], basis)[1, 1])
        tight = mean + kappa * std
        marker = "" if tight <= cc.d else "  <-- would violate"
        print(f"{i:>5} {mean:>10.5f} {std:>9.5f} {tight:>17.5f} {cc.d:>7.3f}{marker}")

    print("\nThe tightened value stays at or below the bound, so the")
    print("constraint holds for every distribution with these two moments.")


if __name__ == "__main__":
    main()
