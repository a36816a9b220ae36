"""A single charged blob moving through a refined node cloud.

The cloud is refined toward the blob, so the blob always sits in the finest
cells while coarser cells change around it. With boundary values taken from
the blob's own field, any force the blob feels at its centre is a
discretization artefact. The blob is pushed by a uniform external field and
its trajectory is compared with the exact parabola.
"""

import numpy as np

from apcloud import benchmark as bm

FINEST = 6
E_EXT = np.array([0.4, 0.0])

# residual self-force along a straight line through the root midplane
path = np.column_stack([np.linspace(-0.15, 0.15, 31), np.zeros(31)])
res = bm.self_force_scan(path, finest_level=FINEST)
ap = np.linalg.norm(res.apcloud, axis=1) / res.field_scale
pic = np.linalg.norm(res.pic, axis=1) / res.field_scale
print(f"field scale of the blob: {res.field_scale:.3g}")
print(f"AP-Cloud residual |F|/scale: mean {ap.mean():.2e}, max {ap.max():.2e}, "
      f"jump ratio {bm.jump_ratio(res.apcloud):.2f}")
print(f"PIC residual |F|/scale:      mean {pic.mean():.2e}, max {pic.max():.2e}, "
      f"jump ratio {bm.jump_ratio(res.pic):.2f}")


def force(x):
    # external push plus whatever the discretization adds at the blob centre
    scan = bm.self_force_scan(np.atleast_2d(x), finest_level=FINEST)
    return E_EXT + scan.apcloud[0]


dt, steps = 0.05, 20
x0, v0 = np.array([-0.3, 0.05]), np.array([0.2, 0.0])
traj = bm.leapfrog(x0, v0, dt, steps, force)
t = dt * np.arange(steps + 1)
exact = x0 + np.outer(t, v0) + 0.5 * np.outer(t**2, E_EXT)
dev = np.linalg.norm(traj - exact, axis=1)
print(f"\ntrajectory over {steps} steps: end point {traj[-1].round(4)}, "
      f"exact {exact[-1].round(4)}, largest deviation {dev.max():.2e}")
