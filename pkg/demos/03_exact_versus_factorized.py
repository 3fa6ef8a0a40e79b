"""
Exact posterior versus the factorized approximation
===================================================

For a handful of points the marginal posterior of the pose can be computed
exactly by summing the joint density over every association vector. The
factorized posterior replaces that sum by a product of per-destination
mixtures whose weights come from message passing run once at the pose
samples. This script shows when the two agree.
"""

import numpy as np

from bpscan.lidar import make_rng
from bpscan.measurement import log_count_constant
from bpscan.oracle import approximate_log_posterior, exact_log_marginal, grid_charts, toy_instance

rng = make_rng(0, 1)

# %%
# Collect a few instances of each shape and compare on a 20^3 grid over the
# prior box. The count constant of the joint does not depend on the pose and
# is added back to the factorized value.
shown = {"one destination": 0, "one source": 0, "loopy": 0}
while min(shown.values()) < 2:
    inst = toy_instance(rng)
    n_d, n_s = len(inst.surface), len(inst.source)
    kind = "one destination" if n_d == 1 else "one source" if n_s == 1 else "loopy"
    if shown[kind] >= 2:
        continue
    shown[kind] += 1
    charts = grid_charts(inst.grid)
    exact = exact_log_marginal(charts, inst.surface, inst.source, inst.model) + inst.prior.log_density
    approx = approximate_log_posterior(charts, inst) + log_count_constant(n_s, inst.model.clutter.lambda_na)
    rel = np.abs(approx - exact) / np.abs(exact)
    same = np.argmax(exact) == np.argmax(approx)
    print(f"{kind:16s} N_D={n_d} N_S={n_s}: worst relative log error {rel.max():.3f}, "
          f"median {np.median(rel):.3f}, same argmax: {same}")

# %%
# With a single destination point every incoming message equals one and the
# product is the exact sum. With more destination points the messages are
# constants fitted over the whole prior, so at a particular pose they can
# down-weight a pairing that dominates there. The error is largest where one
# association is decisive, which is also where the posterior is highest.
