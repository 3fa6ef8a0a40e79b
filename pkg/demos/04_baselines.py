"""
Baselines: NDT and an IMLS-style matcher
========================================

Both baselines start from the identity, as in the benchmark, and return a
local optimum of their own objectives. A few frames along the trajectory are
matched by all three methods.
"""

from bpscan.baselines import ImlsConfig, imls_match, ndt_match
from bpscan.geometry import Pose, scan_relative_pose, translation_error
from bpscan.harness import default_config
from bpscan.inference import match_scans
from bpscan.lidar import ClutterSpec, SensorSpec, demo_map, make_rng, scan
from bpscan.pointcloud import estimate_normals

poses = default_config().trajectory()
world = demo_map()
sensor, clutter = SensorSpec(), ClutterSpec()

# %%
print(f"{'frame':>5s} {'BP':>8s} {'NDT':>8s} {'IMLS':>8s}   (translation error, % of distance)")
for k in (10, 60, 110, 160, 210, 260):
    dest = scan(world, poses[k - 1], sensor, clutter, make_rng(2, k - 1))
    src = scan(world, poses[k], sensor, clutter, make_rng(2, k))
    truth = scan_relative_pose(poses[k], poses[k - 1])
    surf = estimate_normals(dest.points, 2.0)
    bp = match_scans(src, surf, seed=k).map_pose
    ndt = ndt_match(src, dest.points, Pose.identity())
    imls = imls_match(src, surf, ImlsConfig(h=2.0), Pose.identity())
    errs = [100 * translation_error(p, truth) for p in (bp, ndt, imls)]
    print(f"{k:5d} " + " ".join(f"{e:8.2f}" for e in errs))

# %%
# On most frames the three methods are within a few percent of each other,
# and the IMLS-style matcher is often the most accurate. NDT relies on the
# score gradient inside its cells; when the start at the identity sits in a
# flat region it can stop far from the truth, which is what drives its 95%
# quantile up in the benchmark. The sampled posterior does not depend on a
# starting point.
