"""The Poisson-clock walk, its strong-cluster clock, and the time-changed walk.

Simulates one path and an ensemble, accumulates the additive functional
(time spent on the strong cluster), excises hole excursions, and compares
the exact next-cluster-point law from absorbing solves against Monte Carlo
frequencies.
"""

import numpy as np

from rcmwalk import (
    BoxGeometry,
    effective_conductances,
    next_point_frequencies,
    sample_environment,
    simulate_ctmc,
    step_distribution,
    strong_cluster,
    threshold_for_density,
    time_changed_trajectory,
)

env = sample_environment(BoxGeometry(2, 10), 2.0, 11)
dec = strong_cluster(env, threshold_for_density(2.0, 0.6))
print(f"box radius {env.N}; strong cluster {dec.cluster_size} sites, {len(dec.holes)} holes")

# one-step law at the origin
nb, pr = step_distribution(env, env.geometry.origin)
print("jump law at the origin:", np.round(pr, 3))

# --- one path with its strong-cluster clock ---------------------------------
rng = np.random.default_rng(1)
start = int(np.flatnonzero(dec.in_cluster)[0])
traj = simulate_ctmc(env, start, 40.0, rng, decomp=dec, kill_radius=None)
a_end = traj.A_hat(traj.end_time)
print(f"\npath: {traj.n_jumps} jumps in [0, {traj.end_time:.0f}], "
      f"cluster time A = {a_end:.2f} (hole time {traj.end_time - a_end:.2f})")

hat = time_changed_trajectory(traj, dec)
print(f"time-changed path: {len(hat.sites)} cluster visits on [0, {hat.horizon:.2f}]")
assert np.all(dec.in_cluster[hat.sites])

# --- next-cluster-point law: exact vs Monte Carlo ---------------------------
x = int(dec.holes[0].boundary[0])  # a site touching a hole
ec = effective_conductances(env, dec, x)
print(f"\neffective conductances from site {x} (eta = pi(x) = {ec.eta:.3f}):")
n = 50_000
sites, counts = next_point_frequencies(env, dec, x, n, np.random.default_rng(2))
freq = dict(zip(sites.tolist(), counts.tolist()))
for y, w in sorted(ec.as_dict().items()):
    p = w / ec.eta
    print(f"  next = {y:5d}: exact {p:.4f}   MC {freq.get(y, 0) / n:.4f}   (weight {w:.4f})")
print("table sums to pi(x):", np.isclose(sum(ec.values), ec.eta))
