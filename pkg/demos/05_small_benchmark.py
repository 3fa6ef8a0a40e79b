"""
A small Monte Carlo benchmark
=============================

The harness simulates trials along the trajectory, matches every
consecutive pair with each method and summarizes the drift errors by their
50% and 95% quantiles. This run is a small version of the full benchmark;
the full one is ``bp-scanmatch benchmark --out <dir>``.
"""

import sys
import tempfile
from pathlib import Path

from bpscan import harness

# %%
cfg = harness.default_config().with_overrides(n_mc=3, frames_per_trial=5, seed=4)
report = harness.run_benchmark(cfg, progress=lambda t: print(f"trial {t.trial} done", file=sys.stderr))

for m in report.methods:
    q = report.quantiles[m]["e_trans"]
    print(f"{harness.METHOD_LABELS[m]:17s} e_trans50 {100 * q['50']:6.2f}%   e_trans95 {100 * q['95']:6.2f}%")

# %%
# Everything but runtime.json depends only on the configuration, so two runs
# with the same seed produce identical files.
out = Path(tempfile.mkdtemp(prefix="bpscan-bench-"))
for path in harness.emit_report(report, out):
    print("wrote", path)
