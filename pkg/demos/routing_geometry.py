"""
Top-1 routing regions of a linear gate
======================================

A gate scores every expert with ``w_j . x + b_j`` and Top-1 routing keeps
the arg-max. Each expert's region is an intersection of half-spaces, so it
is convex. With biases ``b_j = c - |w_j|^2 / 4`` the regions are exactly the
Voronoi cells of the sites ``w_j / 2``.
"""
import numpy as np

from loramoe.numerics import Rng
from loramoe import verify as V

rng = Rng(0)

# a random 2-D gate with five experts
gate = V.random_gate(rng, dim=2, n_experts=5)
report = V.check_region_convexity(gate, dim=2, n_pairs=20_000, rng=rng)
print("expert occupancy over", report.samples, "points:", report.occupancy)
print("midpoints tested:", report.pairs_same_region, "violations:", report.violations)

# a coarse picture of the partition on [-3, 3]^2
xs = np.linspace(-3, 3, 61)
grid = np.array([[x, y] for y in xs[::-1] for x in xs])
regions = V.top1_route(gate, grid).reshape(61, 61)
for line in regions[::4]:
    print("".join("ABCDE"[j] for j in line[::2]))

# constructed biases turn the same weights into a nearest-site rule
vgate = V.voronoi_gate(gate.Wg, offset=0.3)
pts = rng.uniform(-3, 3, (5000, 2))
vr = V.check_voronoi_sites(vgate, pts)
print(f"\nVoronoi agreement: {vr.agreements}/{vr.points}")
print("sites:\n", 0.5 * gate.Wg)
