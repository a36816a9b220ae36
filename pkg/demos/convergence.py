"""Second-order convergence without sampling noise.

Exact cell averages of the beam density replace the particle deposit, and
each level splits every node cell of the first cloud, so the node spacing
halves everywhere. The gradient converges cleanly at second order. The
potential error is a sum of opposite-signed contributions from the core and
the surrounding coarse cells, so its per-level order wanders around two while
the fit over all levels stays close to it.
"""

import numpy as np

from apcloud import benchmark as bm
from apcloud.geometry import BeamParams

params = BeamParams.benchmark(2)
ref = bm.radial_reference_solve(params)
rows = bm.convergence_study_noise_free(params, c=2.4, levels=5, ref=ref)

print("n        err_phi     err_gradx   order_phi  order_gradx")
for r in rows:
    op = "-" if r.order_phi is None else f"{r.order_phi:.2f}"
    og = "-" if r.order_gradx is None else f"{r.order_gradx:.2f}"
    print(f"{r.n:<8d} {r.err_phi:.3e}   {r.err_gradx:.3e}   {op:9s}  {og}")

n = np.array([r.n for r in rows], dtype=float)
for name in ("err_phi", "err_gradx"):
    e = np.array([getattr(r, name) for r in rows])
    slope = -2 * np.polyfit(np.log(n), np.log(e), 1)[0]
    print(f"fitted order of {name}: {slope:.2f}")
