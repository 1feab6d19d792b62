#!/usr/bin/env python3
"""The feasibility gate: tighten violated bounds, re-update, re-dispatch.

mg0's export cap sits just below where the profit-seeking update wants
to dispatch.  The power-flow check trips, the violated bound is
tightened by the multiplier, and the re-anchored update pulls the
dispatch back inside -- all before any setpoint reaches an asset.
"""

import numpy as np

from smaspl.scenario import load_scenario
from smaspl.training import build_world, select_actions_online, train

sc = load_scenario("scenarios/two_mg_backtrack.yaml")
world = build_world(sc)
row = next(r for r in world.table if r.id == "mg0.pcc_p_hi")
print(f"mg0 export-cap row bound: {world.bounds(row):.2f} "
      f"(per-step cap {row.bound} kW, tau = {world.cfg.tau})")

records, agents, _ = train(world, episodes=2)
for r in records:
    print(f"episode {r.episode}: verdict {r.pfe_verdict!r} after "
          f"{r.backtrack_rounds} tightening round(s); "
          f"export return {r.j_dispatch['mg0.pcc_p_hi']:.2f}")

actions, verdict, rounds = select_actions_online(world, agents, 0)
blk = actions[0].reshape(6, world.horizon)
print(f"\nonline dispatch verdict: {verdict!r} ({rounds} round(s))")
print("mg0 dg setpoints   :", np.round(blk[0], 2))
print("mg0 charge/discharge:", np.round(blk[1], 2), np.round(blk[2], 2),
      "(complementarity enforced)")
