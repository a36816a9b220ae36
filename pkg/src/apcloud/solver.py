"""Adaptive particle-cloud Poisson solve on octree nodes.

The pipeline deposits particle charge onto node cells (nearest grid point),
removes the kernel's moment error through a sparse density system, solves the
GFD-discretized Poisson equation and interpolates potential and field back to
the particles with Taylor expansions about each particle's owning node.
"""

from __future__ import annotations

import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from apcloud._csv import write_csv
from apcloud.gfd import IllConditionedStencilError, StencilSet, multi_indices, vandermonde_rows
from apcloud.octree import (
    build_octree,
    default_required,
    gfd_neighbor_select,
    gfd_neighbor_select_all,
    select_nodes,
)
from apcloud.pic import NGP
from apcloud.sparse import SparseSystem, canonical, krylov_solve

STAGES_2D = (
    "Build quadtree",
    "Search nodes",
    "Build linear systems",
    "Solve linear system for rho",
    "Solve linear system for phi",
    "Find interpolation coefficient",
    "Interpolate",
)
STAGES_3D = ("Build octree",) + STAGES_2D[1:]


def stage_labels(dim):
    return STAGES_2D if dim == 2 else STAGES_3D


class PartitionError(RuntimeError):
    """A particle fell outside every node cell."""


# ---------------------------------------------------------------------------
# moments and deposition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentCoefficients:
    """Kernel moments of one node, each carrying its Taylor factor ``1/alpha!``.

    ``vector`` follows the derivative ordering of :func:`apcloud.gfd.multi_indices`.
    """

    a0: float
    a1: np.ndarray
    a2: np.ndarray
    vector: np.ndarray


def moment_coefficients(h, kernel=NGP, k=2, dim=2):
    """Closed-form moments of the cell-characteristic kernel on a centred cell."""
    if kernel.kind != "NGP":
        raise ValueError(f"moments are tabulated for the NGP kernel only, not {kernel.kind}")
    if k < 2:
        raise ValueError("GFD order k must be at least 2")

    def axis_moment(m):
        # (1/h) * integral over [-h/2, h/2] of x^m
        return 0.0 if m % 2 else (h / 2.0) ** m / (m + 1)

    vec = []
    for alpha in multi_indices(dim, k):
        powers = np.bincount(np.asarray(alpha), minlength=dim)
        val = np.prod([axis_moment(int(m)) / math.factorial(int(m)) for m in powers])
        vec.append(val)
    vec = np.array(vec)
    a2 = np.zeros((dim, dim))
    for val, alpha in zip(vec, multi_indices(dim, k)):
        if len(alpha) == 2:
            a2[alpha[0], alpha[1]] = a2[alpha[1], alpha[0]] = val
    return MomentCoefficients(1.0, vec[:dim].copy(), a2, vec)


def moment_table(nodeset, k=2):
    """Per-node moment vectors, shape (n, p); boundary rows are unused."""
    p = len(multi_indices(nodeset.dim, k))
    unit = moment_coefficients(1.0, NGP, k, nodeset.dim).vector
    orders = np.array([len(a) for a in multi_indices(nodeset.dim, k)])
    out = unit[None, :] * nodeset.h[:, None] ** orders[None, :]
    assert out.shape == (len(nodeset), p)
    return out


def ngp_deposit(particles, nodeset, owner=None):
    """Charge per node cell divided by the cell volume; boundary nodes get 0."""
    owner = nodeset.locate(particles.positions) if owner is None else owner
    if len(owner) and (owner.min() < 0 or not np.all(nodeset.interior[owner])):
        raise PartitionError("particle assigned to no node cell")
    q = np.bincount(owner, weights=particles.charges, minlength=len(nodeset))
    return q / nodeset.h**nodeset.dim


def exact_cell_averages(params, nodeset):
    """Cell averages of the analytic density (noise-free deposition)."""
    from apcloud.octree import cell_box

    out = np.zeros(len(nodeset))
    interior = np.flatnonzero(nodeset.interior)
    boxes = [cell_box(nodeset.cells[i], nodeset.domain) for i in interior]
    lo = np.array([b[0] for b in boxes])
    hi = np.array([b[1] for b in boxes])
    out[interior] = params.box_average(lo, hi)
    return out


# ---------------------------------------------------------------------------
# stencils and systems
# ---------------------------------------------------------------------------


def build_stencils(nodeset, k=2, weight_form="normalized", support=None, required=None):
    """GFD stencils at every interior node.

    An ill-conditioned stencil is rebuilt once from a wider ring with more
    neighbours before the error is allowed to propagate.
    """
    dim = nodeset.dim
    required = default_required(dim, k) if required is None else required
    centers = np.flatnonzero(nodeset.interior)
    lists = gfd_neighbor_select_all(nodeset, required, centers)
    retried = set()
    while True:
        try:
            return StencilSet(nodeset.positions, centers, lists, k, weight_form, support)
        except IllConditionedStencilError as err:
            if err.node is None or err.node in retried:
                raise
            retried.add(err.node)
            pos = int(np.searchsorted(centers, err.node))
            lists[pos] = gfd_neighbor_select(
                err.node, nodeset, required + 2**dim, min_ring=3
            )


def _identity_rows(nodeset):
    bd = np.flatnonzero(~nodeset.interior)
    n = len(nodeset)
    return sp.csr_matrix((np.ones(len(bd)), (bd, bd)), shape=(n, n))


def assemble_density_system(nodeset, operators, moments, rho_m, boundary_density=None):
    """``rho + sum_alpha a_alpha D_alpha rho = rho_M`` at interior nodes.

    ``operators`` are the GFD derivative matrices, ``moments`` the (n, p)
    moment table. Boundary rows pin the density to ``boundary_density``
    (zero when omitted).
    """
    interior = nodeset.interior.astype(float)
    B = sp.diags(interior)
    for a, D in enumerate(operators):
        coef = moments[:, a] * interior
        if np.any(coef):
            B = B + sp.diags(coef) @ D
    B = canonical(B + _identity_rows(nodeset))
    rhs = np.where(nodeset.interior, rho_m, 0.0)
    if boundary_density is not None:
        rhs = np.where(nodeset.interior, rhs, boundary_density)
    return SparseSystem(B, rhs.astype(float))


def laplacian_operator(operators, dim, k=2):
    alphas = multi_indices(dim, k)
    lap = None
    for d in range(dim):
        D = operators[alphas.index((d, d))]
        lap = D if lap is None else lap + D
    return lap


def assemble_poisson_system(nodeset, operators, rho, boundary_values, k=2):
    """GFD Laplacian rows at interior nodes, identity rows at boundary nodes."""
    lap = laplacian_operator(operators, nodeset.dim, k)
    A = canonical(sp.diags(nodeset.interior.astype(float)) @ lap + _identity_rows(nodeset))
    rhs = np.where(nodeset.interior, rho, boundary_values)
    return SparseSystem(A, rhs.astype(float))


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------


def node_derivatives(nodeset, operators, phi):
    """GFD derivatives of ``phi`` at every node, shape (n, p).

    Boundary nodes have no stencil; their derivatives are the owner's
    expansion moved to the boundary point.
    """
    dim = nodeset.dim
    derivs = np.column_stack([D @ phi for D in operators])
    bd = np.flatnonzero(~nodeset.interior)
    if bd.size:
        own = nodeset.owner[bd]
        delta = nodeset.positions[bd] - nodeset.positions[own]
        H = hessian(derivs[own], dim)
        derivs[bd] = derivs[own]
        derivs[bd, :dim] = derivs[own, :dim] + np.einsum("nij,nj->ni", H, delta)
    return derivs


def hessian(derivs, dim, k=2):
    alphas = multi_indices(dim, k)
    H = np.zeros((len(derivs), dim, dim))
    for a, alpha in enumerate(alphas):
        if len(alpha) == 2:
            H[:, alpha[0], alpha[1]] = H[:, alpha[1], alpha[0]] = derivs[:, a]
    return H


def interpolate_to_particles(nodeset, phi, derivs, positions, owner=None, k=2):
    """Taylor expansion about the owning node: order ``k`` for phi, first order for E."""
    positions = np.atleast_2d(positions)
    owner = nodeset.locate(positions) if owner is None else owner
    delta = positions - nodeset.positions[owner]
    d = derivs[owner]
    phi_p = phi[owner] + np.sum(vandermonde_rows(delta, k) * d, axis=1)
    E_p = d[:, : nodeset.dim] + np.einsum("nij,nj->ni", hessian(d, nodeset.dim, k), delta)
    return phi_p, E_p


@dataclass
class FieldSolution:
    """Node and particle fields of one solve plus its stage timings (seconds)."""

    nodes: object
    rho_m: np.ndarray
    rho: np.ndarray
    phi: np.ndarray
    E: np.ndarray
    derivs: np.ndarray
    positions: np.ndarray
    phi_particles: np.ndarray
    E_particles: np.ndarray
    timings: OrderedDict = field(default_factory=OrderedDict)
    residuals: dict = field(default_factory=dict)

    @property
    def total_time(self):
        return float(sum(self.timings.values()))

    def dump_nodes_csv(self, path):
        dim = self.nodes.dim
        header = list("xyz"[:dim]) + ["h", "rho", "phi"] + ["E" + c for c in "xyz"[:dim]]
        rows = np.column_stack([self.nodes.positions, self.nodes.h, self.rho, self.phi, self.E])
        write_csv(path, header, rows)

    def dump_particles_csv(self, path):
        dim = self.nodes.dim
        header = list("xyz"[:dim]) + ["phi"] + ["E" + c for c in "xyz"[:dim]]
        write_csv(path, header, np.column_stack([self.positions, self.phi_particles,
                                                 self.E_particles]))

    def dump_timing_csv(self, path):
        rows = [[k, v] for k, v in self.timings.items()]
        rows.append(["Total running time", self.total_time])
        write_csv(path, ["stage", "seconds"], rows)


class _Clock:
    def __init__(self, labels):
        self.labels = labels
        self.timings = OrderedDict((lab, 0.0) for lab in labels)
        self._t = time.perf_counter()

    def lap(self, i):
        now = time.perf_counter()
        self.timings[self.labels[i]] += now - self._t
        self._t = now


def solve_fields(nodeset, operators, density_system, boundary_values, k=2, tol=1e-10,
                 clock=None):
    """Solve the density then the Poisson system; return rho, phi, derivatives, residuals."""
    ops = operators
    rep_rho = krylov_solve(density_system.matrix, density_system.rhs, tol=tol,
                           stage="Solve linear system for rho")
    if clock:
        clock.lap(3)
    poisson = assemble_poisson_system(nodeset, ops, rep_rho.x, boundary_values, k)
    if clock:
        clock.lap(2)
    rep_phi = krylov_solve(poisson.matrix, poisson.rhs, tol=tol,
                           stage="Solve linear system for phi")
    if clock:
        clock.lap(4)
    derivs = node_derivatives(nodeset, ops, rep_phi.x)
    if clock:
        clock.lap(5)
    return rep_rho.x, rep_phi.x, derivs, {"rho": rep_rho.residual, "phi": rep_phi.residual}


def solve_apcloud(particles, domain, c, boundary, k=2, weight_form="normalized",
                  tol=1e-10, counter=None, refine=None, rho_m=None, boundary_density=None,
                  positions=None, nodeset=None):
    """Full pipeline from particles to particle fields.

    ``boundary`` maps node positions to Dirichlet potentials. ``counter``
    replaces the particle tree in node selection (e.g. expected counts),
    ``refine`` replaces the error-balance criterion, ``rho_m`` maps the
    node set to deposited densities (default: NGP from the particles) and
    ``positions`` are the evaluation points (default: the particles).
    """
    from apcloud.octree import RefinementConfig

    clock = _Clock(stage_labels(domain.dim))
    tree = build_octree(particles, domain) if len(particles) else None
    clock.lap(0)
    if nodeset is None:
        source = tree if counter is None else counter
        nodeset = select_nodes(source, RefinementConfig(c, k), domain, refine=refine)
    stencils = build_stencils(nodeset, k, weight_form)
    clock.lap(1)
    ops = stencils.operators(len(nodeset))
    rm = ngp_deposit(particles, nodeset) if rho_m is None else np.asarray(rho_m(nodeset))
    bd_rho = None if boundary_density is None else boundary_density(nodeset.positions)
    density = assemble_density_system(nodeset, ops, moment_table(nodeset, k), rm, bd_rho)
    bvals = np.asarray(boundary(nodeset.positions), dtype=float)
    clock.lap(2)
    rho, phi, derivs, res = solve_fields(nodeset, ops, density, bvals, k, tol, clock)
    pts = particles.positions if positions is None else np.atleast_2d(positions)
    phi_p, E_p = interpolate_to_particles(nodeset, phi, derivs, pts, k=k)
    clock.lap(6)
    return FieldSolution(nodeset, rm, rho, phi, derivs[:, : domain.dim].copy(), derivs, pts,
                         phi_p, E_p, clock.timings, res)
