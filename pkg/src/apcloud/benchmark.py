"""Reference solutions, error norms and the beam, convergence and self-force experiments."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from apcloud._csv import write_csv
from apcloud.geometry import BeamParams, Domain, Particles, sample_gaussian_beam
from apcloud.octree import (
    DistanceRefinement,
    ExpectedCounts,
    NestedRefinement,
    RefinementConfig,
    select_nodes,
)
from apcloud.pic import UniformGrid, cic_deposit_exact, solve_pic
from apcloud.solver import exact_cell_averages, solve_apcloud

R_OUTER = 2.0
RESULT_HEADER = ["method", "dim", "N", "n_nodes", "c", "seed", "err_phi", "err_gradx",
                 "wall_time_s"]


class ReferenceRangeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# radial reference
# ---------------------------------------------------------------------------


@dataclass
class RadialReference:
    """Radially symmetric solution of ``Laplace(phi) = rho`` on a disk/ball of radius 2."""

    radii: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray
    dim: int
    center: np.ndarray
    ddphi: np.ndarray = None

    def __post_init__(self):
        self._phi = CubicHermiteSpline(self.radii, self.phi, self.dphi)
        if self.ddphi is not None:
            self._dphi = CubicHermiteSpline(self.radii, self.dphi, self.ddphi)
        else:
            self._dphi = self._phi.derivative()

    def radius_of(self, points):
        points = np.atleast_2d(points)
        r = np.linalg.norm(points - self.center, axis=1)
        if np.any(r > self.radii[-1] * (1 + 1e-12)):
            raise ReferenceRangeError(
                f"point at radius {r.max():.6g} beyond reference radius {self.radii[-1]:g}"
            )
        return np.minimum(r, self.radii[-1])

    def phi_at(self, r):
        return self._phi(r)

    def dphi_at(self, r):
        return self._dphi(r)

    def evaluate(self, points):
        """Potential and gradient at ``points``."""
        points = np.atleast_2d(points)
        r = self.radius_of(points)
        phi = self._phi(r)
        dphi = self._dphi(r)
        off = points - self.center
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(r[:, None] > 0, off / r[:, None], 0.0)
        return phi, dphi[:, None] * unit


def radial_reference_solve(params, dim=None, points=100_000, r_outer=R_OUTER, order=8):
    """Integrate the radial Poisson equation with phi'(0) = 0 and phi(r_outer) = 0.

    The grid ``r_i = r_outer (i/points)^2`` clusters near the axis, each panel
    uses ``order``-point Gauss-Legendre quadrature, and the potential is
    written with integrations by parts so no 1/r singularity is integrated.
    """
    dim = params.dim if dim is None else dim
    if points < 10:
        raise ValueError("need at least 10 reference points")
    t = np.linspace(0.0, 1.0, points + 1)
    r = r_outer * t**2
    x, w = np.polynomial.legendre.leggauss(order)
    a, b = r[:-1], r[1:]
    half = 0.5 * (b - a)
    s = 0.5 * (a + b)[:, None] + half[:, None] * x[None, :]
    ws = half[:, None] * w[None, :]
    rho_s = params.radial(s)
    # cumulative enclosed charge M(r) = int_0^r rho s^(dim-1) ds
    M = np.concatenate([[0.0], np.cumsum(np.sum(ws * rho_s * s ** (dim - 1), axis=1))])
    if dim == 2:
        # phi(r) = -[M(R) ln R - M(r) ln r - int_r^R rho s ln s ds]
        with np.errstate(divide="ignore", invalid="ignore"):
            g = rho_s * s * np.log(s)
        J = np.concatenate([np.cumsum(np.sum(ws * g, axis=1)[::-1])[::-1], [0.0]])
        with np.errstate(divide="ignore", invalid="ignore"):
            mlog = np.where(r > 0, M * np.log(np.where(r > 0, r, 1.0)), 0.0)
        phi = -(M[-1] * math.log(r_outer) - mlog - J)
    elif dim == 3:
        # phi(r) = -[M(r)/r - M(R)/R + int_r^R rho s ds]
        J = np.concatenate([np.cumsum(np.sum(ws * rho_s * s, axis=1)[::-1])[::-1], [0.0]])
        with np.errstate(divide="ignore", invalid="ignore"):
            m_over_r = np.where(r > 0, M / np.where(r > 0, r, 1.0), 0.0)
        phi = -(m_over_r - M[-1] / r_outer + J)
    else:
        raise ValueError("dim must be 2 or 3")
    phi[-1] = 0.0
    rho_r = params.radial(r)
    with np.errstate(divide="ignore", invalid="ignore"):
        dphi = np.where(r > 0, M / np.where(r > 0, r, 1.0) ** (dim - 1), 0.0)
        ddphi = np.where(r > 0, rho_r - (dim - 1) * dphi / np.where(r > 0, r, 1.0), rho_r / dim)
    return RadialReference(r, phi, dphi, dim, params.center_array, ddphi)


def boundary_values(points, ref):
    """Potential of the radial reference at ``points`` (all within radius 2)."""
    return ref.phi_at(ref.radius_of(points))


# ---------------------------------------------------------------------------
# error norms
# ---------------------------------------------------------------------------


@dataclass
class ErrorReport:
    err_phi: float
    err_gradx: float
    n_nodes: int
    wall_time: float
    method: str
    dim: int = 2
    N: int = 0
    c: float = float("nan")
    seed: int = -1

    def row(self):
        return [self.method, self.dim, self.N, self.n_nodes,
                "" if math.isnan(self.c) else self.c, self.seed,
                self.err_phi, self.err_gradx, self.wall_time]


def normalized_rms(computed, reference):
    """RMS of the difference divided by the largest reference magnitude."""
    computed = np.asarray(computed, dtype=float)
    reference = np.asarray(reference, dtype=float)
    scale = np.max(np.abs(reference))
    return float(np.sqrt(np.mean((computed - reference) ** 2)) / scale)


def error_norms(phi, E, ref, positions, n_nodes=0, wall_time=0.0, method=""):
    """Normalized RMS errors of phi and of the x-component of its gradient."""
    phi_ref, grad_ref = ref.evaluate(positions)
    E = np.atleast_2d(E)
    return ErrorReport(
        normalized_rms(phi, phi_ref),
        normalized_rms(E[:, 0], grad_ref[:, 0]),
        int(n_nodes), float(wall_time), method, ref.dim,
    )


def write_results(path, reports, append=False):
    write_csv(path, RESULT_HEADER, [r.row() for r in reports], append=append)


# ---------------------------------------------------------------------------
# beam benchmarks
# ---------------------------------------------------------------------------


def beam_setup(dim, n, seed, reference_points=100_000):
    params = BeamParams.benchmark(dim)
    domain = Domain.cube(dim)
    particles = sample_gaussian_beam(params, n, seed, domain)
    ref = radial_reference_solve(params, dim, reference_points)
    return params, domain, particles, ref


def run_pic(particles, domain, ref, nodes_per_dim, seed=-1, rho=None):
    t0 = time.perf_counter()
    grid = UniformGrid.with_nodes(domain, nodes_per_dim)
    sol = solve_pic(particles, grid, lambda p: boundary_values(p, ref), rho=rho)
    wall = time.perf_counter() - t0
    rep = error_norms(sol.phi_particles, sol.E_particles, ref, particles.positions,
                      grid.n_nodes, wall, "pic")
    rep.N, rep.seed = len(particles), seed
    return rep, sol


def run_apcloud(particles, domain, ref, c, k=2, seed=-1, weight_form="normalized", **kw):
    t0 = time.perf_counter()
    sol = solve_apcloud(particles, domain, c, lambda p: boundary_values(p, ref), k=k,
                        weight_form=weight_form, **kw)
    wall = time.perf_counter() - t0
    rep = error_norms(sol.phi_particles, sol.E_particles, ref, sol.positions,
                      sol.nodes.n_interior, wall, "apcloud")
    rep.N, rep.seed, rep.c = len(particles), seed, c
    return rep, sol


def calibrate_c(source, domain, target, k=2, lo=1e-3, hi=10.0, iters=12):
    """Tuning parameter whose node selection has about ``target`` interior nodes.

    ``source`` is a particle tree or an expected-count model; the node count
    falls as ``c`` grows, so a bisection in ``log c`` suffices.
    """
    def count(c):
        return select_nodes(source, RefinementConfig(c, k), domain).n_interior

    best = None
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        n = count(mid)
        if best is None or abs(math.log(n / target)) < abs(math.log(best[1] / target)):
            best = (mid, n)
        if n > target:
            lo = mid
        else:
            hi = mid
    return best


# ---------------------------------------------------------------------------
# noise-free convergence
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceRow:
    n: int
    err_phi: float
    err_gradx: float
    order_phi: float = None
    order_gradx: float = None
    c: float = None

    def row(self):
        fmt = lambda v: "" if v is None else v  # noqa: E731
        return [self.n, self.err_phi, self.err_gradx, fmt(self.order_phi), fmt(self.order_gradx)]


CONVERGENCE_HEADER = ["n", "err_phi", "err_gradx", "order_phi", "order_gradx"]


def observed_order(n0, e0, n1, e1, dim):
    """Order from errors at node counts ``n0 < n1`` with ``h ~ n^(-1/dim)``."""
    return math.log(e0 / e1) / math.log((n1 / n0) ** (1.0 / dim))


def convergence_study_noise_free(params, c=0.4, levels=4, n_virtual=1_000_000, k=2,
                                 eval_points=None, ref=None, weight_form="normalized"):
    """AP-Cloud on a nested refinement ladder with exact cell averages as density.

    The first rung is the error-balance cloud for ``c`` under the expected
    counts of ``n_virtual`` particles; every further rung splits each node
    cell of the first one more time, so ``h`` halves everywhere and ``n``
    grows by ``2^dim``. Neither nodes nor densities carry sampling noise.
    Errors are measured at ``eval_points`` (default: a fixed beam sample).
    """
    dim = params.dim
    domain = Domain.cube(dim)
    ref = radial_reference_solve(params, dim) if ref is None else ref
    if eval_points is None:
        eval_points = sample_gaussian_beam(params, 20_000, 12345, domain).positions
    counter = ExpectedCounts(params, domain, n_virtual)
    base = select_nodes(counter, RefinementConfig(c, k), domain)
    empty = Particles(np.zeros((0, dim)), np.zeros(0))
    rows = []
    for shift in range(levels):
        nodes = base if shift == 0 else select_nodes(
            counter, None, domain, refine=NestedRefinement(base, shift))
        sol = solve_apcloud(empty, domain, c, lambda p: boundary_values(p, ref), k=k,
                            weight_form=weight_form, nodeset=nodes,
                            rho_m=lambda ns: exact_cell_averages(params, ns),
                            positions=eval_points)
        rep = error_norms(sol.phi_particles, sol.E_particles, ref, eval_points)
        row = ConvergenceRow(sol.nodes.n_interior, rep.err_phi, rep.err_gradx, c=c)
        if rows:
            prev = rows[-1]
            row.order_phi = observed_order(prev.n, prev.err_phi, row.n, row.err_phi, dim)
            row.order_gradx = observed_order(prev.n, prev.err_gradx, row.n, row.err_gradx, dim)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# self-force
# ---------------------------------------------------------------------------


@dataclass
class SelfForceResult:
    positions: np.ndarray
    apcloud: np.ndarray
    pic: np.ndarray
    field_scale: float
    n_nodes: np.ndarray


def _blob_fields_apcloud(params, domain, center, finest_level, ratio, ref):
    empty = Particles(np.zeros((0, params.dim)), np.zeros(0))
    refine = DistanceRefinement(tuple(center), finest_level, ratio)
    sol = solve_apcloud(
        empty, domain, 1.0, lambda p: boundary_values(p, ref), refine=refine,
        counter=ExpectedCounts(params, domain, 1), positions=np.atleast_2d(center),
        rho_m=lambda ns: exact_cell_averages(params, ns),
    )
    return sol


def blob_for_level(dim, finest_level, center, domain=None, cells=6):
    """Single Gaussian whose width spans ``cells`` finest-level cells."""
    domain = Domain.cube(dim) if domain is None else domain
    h = float(domain.extent[0]) / 2**finest_level
    return BeamParams.blob(cells * h, dim, center=center, domain=domain)


def self_force_scan(path, finest_level=6, ratio=0.5, pic_nodes=None, dim=2, cells=6):
    """Residual self-field at the blob centre along ``path`` for both methods.

    The blob's own radial solution, recentred at the blob, supplies the
    boundary values, so the exact self-field at the centre vanishes.
    """
    domain = Domain.cube(dim)
    pic_nodes = 2**finest_level + 1 if pic_nodes is None else pic_nodes
    grid = UniformGrid.with_nodes(domain, pic_nodes)
    ap, pc, nn = [], [], []
    scale = 0.0
    for center in np.atleast_2d(path):
        params = blob_for_level(dim, finest_level, center, domain, cells)
        ref = radial_reference_solve(params, dim, 20_000, r_outer=_outer_radius(domain, center))
        rr = np.linspace(0, ref.radii[-1], 2001)
        scale = max(scale, float(np.max(np.abs(ref.dphi_at(rr)))))
        sol = _blob_fields_apcloud(params, domain, center, finest_level, ratio, ref)
        ap.append(sol.E_particles[0])
        nn.append(sol.nodes.n_interior)
        empty = Particles(np.zeros((0, dim)), np.zeros(0))
        psol = solve_pic(empty, grid, lambda p: boundary_values(p, ref),
                         positions=np.atleast_2d(center), rho=cic_deposit_exact(params, grid))
        pc.append(psol.E_particles[0])
    return SelfForceResult(np.atleast_2d(path), np.array(ap), np.array(pc), scale, np.array(nn))


def _outer_radius(domain, center):
    corners = np.array(np.meshgrid(*[[lo, hi] for lo, hi in zip(domain.lo, domain.hi)]))
    corners = corners.reshape(domain.dim, -1).T
    return float(np.max(np.linalg.norm(corners - center, axis=1))) * 1.0001


def leapfrog(x0, v0, dt, steps, force):
    """Kick-drift-kick integration; ``force(x)`` returns the acceleration."""
    x = np.array(x0, dtype=float)
    v = np.array(v0, dtype=float)
    traj = [x.copy()]
    a = force(x)
    for _ in range(steps):
        v = v + 0.5 * dt * a
        x = x + dt * v
        a = force(x)
        v = v + 0.5 * dt * a
        traj.append(x.copy())
    return np.array(traj)


def jump_ratio(series):
    """Largest successive jump divided by the median jump."""
    jumps = np.abs(np.diff(np.asarray(series, dtype=float), axis=0))
    if jumps.ndim > 1:
        jumps = np.linalg.norm(jumps, axis=1)
    med = np.median(jumps)
    return float(np.max(jumps) / med) if med > 0 else (0.0 if np.max(jumps) == 0 else np.inf)


# ---------------------------------------------------------------------------
# Monte Carlo noise of the deposited density
# ---------------------------------------------------------------------------


@dataclass
class NoiseStudy:
    counts: np.ndarray
    std: np.ndarray
    mean: np.ndarray
    slope: float


def monte_carlo_noise(params, lo, hi, counts=(1_000, 10_000, 100_000, 1_000_000), seeds=100,
                      domain=None):
    """Spread of the NGP density of one fixed cell ``[lo, hi]`` over independent samples.

    ``slope`` is the least-squares slope of ``log std`` against ``log N``.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    vol = float(np.prod(hi - lo))
    std, mean = [], []
    for n in counts:
        vals = np.empty(seeds)
        for s in range(seeds):
            p = sample_gaussian_beam(params, n, seed=1_000_003 * s + n, domain=domain)
            inside = np.all((p.positions >= lo) & (p.positions < hi), axis=1)
            vals[s] = p.charges[inside].sum() / vol
        std.append(vals.std(ddof=1))
        mean.append(vals.mean())
    counts = np.asarray(counts, dtype=float)
    slope = float(np.polyfit(np.log(counts), np.log(std), 1)[0])
    return NoiseStudy(counts, np.array(std), np.array(mean), slope)
