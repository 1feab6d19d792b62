#!/usr/bin/env python3
"""Safe training against an unconstrained baseline on the binding fixture.

mg0's diesel unit is capped at 30 kW while the export price rewards
running it flat out.  The safe trainer pins the unit's discounted return
under its bound; the baseline with that row removed sails past it and
collects more profit.
"""

import numpy as np

from smaspl.scenario import load_scenario
from smaspl.training import build_world, train

EPISODES = 25

sc = load_scenario("scenarios/two_mg_binding.yaml")
world = build_world(sc)
row = next(r for r in world.table if r.id == "mg0.dg_p_hi")
bound = world.bounds(row)
print(f"dg cap row bound (discounted window): {bound:.2f} kW-steps")

print("\nsafe mode:")
records, agents, _ = train(world, episodes=EPISODES)
print(f"{'ep':>3s} {'reward':>8s} {'dg return':>10s} {'verdict':>10s}")
for r in records[::4] + [records[-1]]:
    print(f"{r.episode:3d} {np.mean(r.rewards):8.3f} "
          f"{r.j_dispatch['mg0.dg_p_hi']:10.2f} {r.pfe_verdict[:10]:>10s}")

print("\nbaseline with the cap row removed:")
records_u, _, _ = train(world, episodes=EPISODES, mode="u-pl",
                        removed_tokens=["dg-p:mg0"])
for r in records_u[::4] + [records_u[-1]]:
    print(f"{r.episode:3d} {np.mean(r.rewards):8.3f} "
          f"{r.j_dispatch['mg0.dg_p_hi']:10.2f}")

safe = records[-1].j_dispatch["mg0.dg_p_hi"]
free = records_u[-1].j_dispatch["mg0.dg_p_hi"]
print(f"\nfinal dg return: safe {safe:.1f} (<= {bound:.1f}) "
      f"vs baseline {free:.1f} ({free / bound - 1:+.0%} past the bound)")
