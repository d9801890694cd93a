"""Undamped parallel EP on five double-logistic sites: a fixed point from one start, a 2-cycle from another."""
from eplab.engine import RunConfig
from eplab.experiments import basin_labels, basin_problem

sites = basin_problem()
recs = basin_labels(sites, [0.0, 2.0], [0.01, 1.0], RunConfig(damping=1.0, max_passes=100))
for r in recs:
    g = r["trajectory"][-1]
    print(f"start mean={r['mean0']:+.1f} var={r['var0']:.2f}: {r['label']:12s} after {r['passes']} passes, "
          f"final precision {g.precision:.3f}")
