"""
Building the bundled urban-block map
====================================

The demo scene is a loop road around a city block. The block inside the
loop is split into three buildings by narrow alleys, and the outside of the
loop is lined with buildings whose facades are staggered so that walls do not
form one long featureless corridor.

Running this script regenerates ``src/bpscan/data/demo_map.txt`` and
``src/bpscan/data/demo_trajectory.txt``.
"""

import math
from pathlib import Path

import numpy as np

from bpscan.lidar import SegmentMap, save_map, save_waypoints

DATA = Path(__file__).resolve().parents[1] / "src" / "bpscan" / "data"


def rect(x0, y0, x1, y1):
    """Four wall segments of an axis-aligned building footprint."""
    return [
        (x0, y0, x1, y0),
        (x1, y0, x1, y1),
        (x1, y1, x0, y1),
        (x0, y1, x0, y0),
    ]


# %%
# Buildings inside the loop (road centerline is the rectangle 0..80 x 0..50,
# road half-width 7 m).
inner = [
    rect(7, 7, 30, 43),
    rect(34, 9, 50, 41),
    rect(54, 7, 73, 36),
    rect(60, 39, 73, 43),
]

# %%
# Buildings outside the loop, with facades set back by different amounts.
outer = [
    # south side
    rect(-30, -30, -8, -7),
    rect(-4, -25, 20, -8),
    rect(24, -28, 45, -7),
    rect(49, -22, 62, -9),
    rect(66, -30, 100, -7),
    # north side
    rect(-30, 57, -9, 80),
    rect(-5, 58, 25, 85),
    rect(29, 57, 52, 75),
    rect(56, 59, 70, 80),
    rect(74, 57, 100, 80),
    # west side
    rect(-30, -4, -7, 20),
    rect(-28, 24, -9, 53),
    # east side
    rect(87, -3, 110, 22),
    rect(88, 26, 110, 53),
]

segments = np.array([s for b in inner + outer for s in b], dtype=float)
demo = SegmentMap(segments)
save_map(demo, DATA / "demo_map.txt")
print(f"{len(demo)} segments")


# %%
# The trajectory follows the road centerline counter-clockwise, with corners
# rounded to an 8 m radius so that the heading changes smoothly.
def rounded_rectangle(x0, y0, x1, y1, radius, step_deg=5.0):
    pts = []
    corners = [
        ((x1 - radius, y0 + radius), -90.0),
        ((x1 - radius, y1 - radius), 0.0),
        ((x0 + radius, y1 - radius), 90.0),
        ((x0 + radius, y0 + radius), 180.0),
    ]
    pts.append((x0 + radius, y0))
    for (cx, cy), start in corners:
        for k in range(int(90 / step_deg) + 1):
            a = math.radians(start + k * step_deg)
            pts.append((cx + radius * math.cos(a), cy + radius * math.sin(a)))
    pts.append((x0 + radius, y0))
    out = [pts[0]]
    for p in pts[1:]:
        if math.dist(p, out[-1]) > 1e-9:
            out.append(p)
    return np.array(out)


waypoints = rounded_rectangle(0, 0, 80, 50, 8.0)
save_waypoints(waypoints, DATA / "demo_trajectory.txt")
print(f"{len(waypoints)} waypoints")
