"""
Association marginals by message passing
========================================

Which source point belongs to which destination point? With exclusive
associations the exact marginals need a sum over every valid assignment.
Message passing gets them exactly when the association graph is a tree and
approximately otherwise.
"""

import numpy as np

from bpscan.association import BeliefTable, brute_force_marginals, run_bp

rng = np.random.default_rng(3)

# %%
# One destination point and four candidates: a tree, so the answer is exact.
tree = BeliefTable(rng.normal(0, 2, size=(1, 5)))
bp, state = run_bp(tree)
print("tree, message passing:", np.round(bp, 4))
print("tree, enumeration:    ", np.round(brute_force_marginals(tree), 4))
print("converged after", state.iterations, "sweeps")

# %%
# Three destination and three source points: the graph has cycles. When the
# evidence is weak compared with "no partner" the approximation is close.
weak = np.column_stack([np.zeros(3), np.log(rng.uniform(0, 0.3, size=(3, 3)))])
strong = np.column_stack([np.zeros(3), np.log(rng.uniform(0, 5.0, size=(3, 3)))])
for name, lw in (("weak", weak), ("strong", strong)):
    table = BeliefTable(lw)
    approx, _ = run_bp(table)
    exact = brute_force_marginals(table)
    print(f"{name} coupling: largest marginal error {np.abs(approx - exact).max():.4f}")

# %%
# Scaling a row by a constant changes nothing: rows are only defined up to a
# positive factor.
shifted = BeliefTable(strong + np.array([[1.0], [-4.0], [2.5]]))
print("row scaling changes marginals by",
      np.abs(run_bp(shifted)[0] - run_bp(BeliefTable(strong))[0]).max())

# %%
# Damping slows the updates but lands on the same fixed point.
damped, st = run_bp(BeliefTable(strong), damping=0.5, max_iters=2000)
print(f"damped run: {st.iterations} sweeps, differs by {np.abs(damped - run_bp(BeliefTable(strong))[0]).max():.1e}")
