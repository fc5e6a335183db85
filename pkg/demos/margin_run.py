"""A Markov run that drifts toward the simplex boundary until the margin monitor stops it."""

from labelflow.harness import bundled_path, load_scenario, run_scenario

scenario = load_scenario(bundled_path("markov_margin"))
for k in (16, 64, 256):
    traj = run_scenario(scenario, k)
    step, agent = traj.log["margin_violation"]
    print(f"k={k:<4d} stopped at t={traj.log['T_f']:.4f} (agent {agent}, step {step})")
