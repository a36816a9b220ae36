"""Particle-in-cell on a uniform node-centred grid with cloud-in-cell weighting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np
import scipy.sparse as sp
from scipy.special import erf

from apcloud._csv import write_csv
from apcloud.sparse import canonical, krylov_solve


@dataclass(frozen=True)
class KernelSpec:
    """Charge assignment kernel; ``support`` is the radius in units of ``h``."""

    kind: str
    support: float

    def __call__(self, x):
        x = np.abs(np.asarray(x, dtype=float))
        if self.kind == "CIC":
            return np.prod(np.maximum(1.0 - x, 0.0), axis=-1)
        if self.kind == "NGP":
            return np.prod((x < 0.5).astype(float), axis=-1)
        raise ValueError(f"unknown kernel {self.kind!r}")


NGP = KernelSpec("NGP", 0.5)
CIC = KernelSpec("CIC", 1.0)


@dataclass(frozen=True)
class UniformGrid:
    """``cells`` intervals per dimension; nodes include the boundary."""

    domain: object
    cells: int

    def __post_init__(self):
        ext = self.domain.extent
        if not np.allclose(ext, ext[0]):
            raise ValueError("uniform grid needs equal spacing in every dimension")
        if self.cells < 2:
            raise ValueError("need at least two cells per dimension")

    @classmethod
    def with_nodes(cls, domain, nodes_per_dim):
        return cls(domain, nodes_per_dim - 1)

    @property
    def dim(self):
        return self.domain.dim

    @property
    def h(self):
        return float(self.domain.extent[0]) / self.cells

    @property
    def shape(self):
        return (self.cells + 1,) * self.dim

    @property
    def n_nodes(self):
        return (self.cells + 1) ** self.dim

    def axes(self):
        return [np.linspace(lo, hi, self.cells + 1) for lo, hi in zip(self.domain.lo, self.domain.hi)]

    def node_positions(self):
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def boundary_mask(self):
        mask = np.zeros(self.shape, dtype=bool)
        for d in range(self.dim):
            sl = [slice(None)] * self.dim
            sl[d] = 0
            mask[tuple(sl)] = True
            sl[d] = -1
            mask[tuple(sl)] = True
        return mask


def _cic_stencil(positions, grid):
    """Flat node indices and weights of the 2^dim CIC neighbours of each position."""
    u = (np.atleast_2d(positions) - grid.domain.lo_array) / grid.h
    base = np.clip(np.floor(u).astype(np.int64), 0, grid.cells - 1)
    frac = u - base
    n = grid.cells + 1
    idx, wts = [], []
    for corner in product((0, 1), repeat=grid.dim):
        corner = np.asarray(corner)
        w = np.prod(np.where(corner, frac, 1.0 - frac), axis=1)
        flat = np.ravel_multi_index(tuple((base + corner).T), (n,) * grid.dim)
        idx.append(flat)
        wts.append(w)
    return np.stack(idx, axis=1), np.stack(wts, axis=1)


def cic_deposit(particles, grid):
    """Charge density at grid nodes: ``(1/h^D) sum_i q_i Phi((p_i - y)/h)``."""
    idx, w = _cic_stencil(particles.positions, grid)
    rho = np.bincount(idx.ravel(), weights=(w * particles.charges[:, None]).ravel(),
                      minlength=grid.n_nodes)
    return rho.reshape(grid.shape) / grid.h**grid.dim


def _gauss_hat_1d(y, h, c, tau):
    """(1/h) * integral of exp(-(x-c)^2/(2 tau^2)) * max(1 - |x-y|/h, 0) dx."""
    s = tau * math.sqrt(2.0)

    def F0(a, b):
        return tau * math.sqrt(math.pi / 2.0) * (erf((b - c) / s) - erf((a - c) / s))

    def F1(a, b):  # integral of (x - c) g(x)
        return tau**2 * (np.exp(-((a - c) ** 2) / (2 * tau**2)) - np.exp(-((b - c) ** 2) / (2 * tau**2)))

    right = F0(y, y + h) - (F1(y, y + h) + (c - y) * F0(y, y + h)) / h
    left = F0(y - h, y) + (F1(y - h, y) + (c - y) * F0(y - h, y)) / h
    return (left + right) / h


def cic_deposit_exact(params, grid):
    """CIC-weighted averages of the analytic density (no sampling noise)."""
    axes = grid.axes()
    total = np.zeros(grid.shape)
    for amp, tau in ((1.0, params.tau1), (params.a2, params.tau2)):
        if amp == 0.0:
            continue
        parts = [_gauss_hat_1d(ax, grid.h, c, tau) for ax, c in zip(axes, params.center)]
        term = parts[0]
        for p in parts[1:]:
            term = np.multiply.outer(term, p)
        total += amp * term
    return params.a1 * total


def laplacian_matrix(grid):
    """5-point (2D) / 7-point (3D) Laplacian on the interior nodes."""
    m = grid.cells - 1
    main = -2.0 * np.ones(m)
    off = np.ones(m - 1)
    T = sp.diags([off, main, off], [-1, 0, 1], format="csr") / grid.h**2
    eye = sp.identity(m, format="csr")
    A = sp.csr_matrix((m**grid.dim, m**grid.dim))
    for d in range(grid.dim):
        factors = [eye] * grid.dim
        factors[d] = T
        term = factors[0]
        for f in factors[1:]:
            term = sp.kron(term, f, format="csr")
        A = A + term
    return canonical(A)


def fd_poisson_solve(grid, rho, boundary_values, tol=1e-10):
    """Solve ``Laplace(phi) = rho`` with Dirichlet data on the boundary nodes.

    ``boundary_values`` is an array over the full grid (only boundary entries
    are read) or a callable on node positions.
    """
    if callable(boundary_values):
        boundary_values = np.asarray(boundary_values(grid.node_positions())).reshape(grid.shape)
    phi = np.array(boundary_values, dtype=float).reshape(grid.shape)
    rho = np.asarray(rho, dtype=float).reshape(grid.shape)
    inner = (slice(1, -1),) * grid.dim
    rhs = rho[inner].copy()
    h2 = grid.h**2
    # known boundary values move to the right-hand side
    for d in range(grid.dim):
        for side, sl_b in ((0, 0), (-1, -1)):
            sl = [slice(1, -1)] * grid.dim
            sl[d] = sl_b
            face = phi[tuple(sl)]
            tgt = [slice(None)] * grid.dim
            tgt[d] = 0 if side == 0 else -1
            rhs[tuple(tgt)] -= face / h2
    A = laplacian_matrix(grid)
    report = krylov_solve(A, rhs.ravel(), tol=tol, stage="PIC Poisson")
    phi[inner] = report.x.reshape(rhs.shape)
    return phi


def grid_gradient(grid, phi):
    """Central differences inside, second-order one-sided at the boundary."""
    grads = np.gradient(phi, grid.h, edge_order=2)
    if grid.dim == 1:
        grads = [grads]
    return np.stack(grads, axis=-1)


def cic_gather(grid, field, positions):
    """Interpolate node values (shape ``grid.shape + extra``) to positions."""
    idx, w = _cic_stencil(positions, grid)
    flat = field.reshape(grid.n_nodes, -1)
    out = np.einsum("nk,nkc->nc", w, flat[idx])
    return out if field.ndim > grid.dim else out[:, 0]


def grid_gradient_and_gather(grid, phi, positions):
    return cic_gather(grid, grid_gradient(grid, phi), positions)


@dataclass
class PicSolution:
    grid: UniformGrid
    rho: np.ndarray
    phi: np.ndarray
    E: np.ndarray
    phi_particles: np.ndarray
    E_particles: np.ndarray

    def dump_csv(self, path):
        dim = self.grid.dim
        idx = np.indices(self.grid.shape).reshape(dim, -1).T
        pos = self.grid.node_positions()
        header = list("ijk"[:dim]) + list("xyz"[:dim]) + ["rho", "phi"] + [
            "E" + c for c in "xyz"[:dim]
        ]
        rows = np.column_stack([idx, pos, self.rho.ravel(), self.phi.ravel(),
                                self.E.reshape(-1, dim)])
        write_csv(path, header, ([int(v) for v in r[:dim]] + list(r[dim:]) for r in rows))


def solve_pic(particles, grid, boundary_values, positions=None, rho=None, tol=1e-10):
    """Deposit, solve and gather; ``rho`` overrides the particle deposit."""
    rho = cic_deposit(particles, grid) if rho is None else rho
    phi = fd_poisson_solve(grid, rho, boundary_values, tol=tol)
    E = grid_gradient(grid, phi)
    pts = particles.positions if positions is None else positions
    return PicSolution(grid, rho, phi, E, cic_gather(grid, phi, pts), cic_gather(grid, E, pts))
