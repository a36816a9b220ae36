"""Gaussian beam with a faint halo: adaptive particle cloud against particle-in-cell.

A million particles are drawn from a narrow core plus a wide halo. The
adaptive cloud places nodes where the error balance asks for them, so a
thousand or so nodes resolve the core, while a uniform grid of similar size
cannot. Run with ``python demos/beam_2d.py``.
"""

import numpy as np

from apcloud import benchmark as bm
from apcloud.octree import build_octree

N, SEED = 1_000_000, 42

params, domain, particles, ref = bm.beam_setup(2, N, SEED)
print(f"{N} particles, core width {params.tau1}, halo width {params.tau2}")
print("errors are RMS over particles divided by the largest reference value\n")

tree = build_octree(particles, domain)
print("method    nodes   err_phi    err_gradx   time")
for target in (500, 1156, 4000):
    c, _ = bm.calibrate_c(tree, domain, target)
    rep, sol = bm.run_apcloud(particles, domain, ref, c, seed=SEED)
    print(f"apcloud  {rep.n_nodes:6d}   {rep.err_phi:.2e}   {rep.err_gradx:.2e}   "
          f"{rep.wall_time:.2f}s  (c = {c:.3g})")

for m in (21, 41, 81):
    rep, _ = bm.run_pic(particles, domain, ref, m, seed=SEED)
    print(f"pic      {rep.n_nodes:6d}   {rep.err_phi:.2e}   {rep.err_gradx:.2e}   "
          f"{rep.wall_time:.2f}s  ({m} x {m} grid)")

# where the nodes went: most sit inside the core
h = sol.nodes.h[sol.nodes.interior]
levels, counts = np.unique(np.round(np.log2(2.0 / h)).astype(int), return_counts=True)
print("\nnode cells per level of the last cloud:",
      ", ".join(f"level {lv}: {n}" for lv, n in zip(levels, counts)))
