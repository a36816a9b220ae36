"""Domains, particles, Morton keys and the Gaussian beam-with-halo model."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from apcloud._csv import write_csv

log = logging.getLogger(__name__)

#: deepest level representable in a 64-bit Morton key, per dimension
MAX_DEPTH = {2: 31, 3: 21}

# normalization constants quoted for the beam benchmarks
QUOTED_A1 = {2: 396.1, 3: 7677.0}


class OutOfDomainError(ValueError):
    pass


class KeyCapacityError(ValueError):
    pass


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box ``[lo, hi]``."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or len(lo) not in (2, 3):
            raise ValueError("domain must be 2D or 3D with matching bounds")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"degenerate domain {lo} .. {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, dim, half_width=1.0):
        return cls((-half_width,) * dim, (half_width,) * dim)

    @property
    def dim(self):
        return len(self.lo)

    @property
    def lo_array(self):
        return np.asarray(self.lo)

    @property
    def hi_array(self):
        return np.asarray(self.hi)

    @property
    def extent(self):
        return self.hi_array - self.lo_array

    @property
    def volume(self):
        return float(np.prod(self.extent))

    def contains(self, points):
        points = np.atleast_2d(points)
        return np.all((points >= self.lo_array) & (points <= self.hi_array), axis=1)


@dataclass
class Particles:
    """Macro-particles stored as arrays: ``positions`` (N, dim) and ``charges`` (N,)."""

    positions: np.ndarray
    charges: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 2:
            raise ValueError("positions must have shape (N, dim)")
        self.charges = np.broadcast_to(
            np.asarray(self.charges, dtype=float), (len(self.positions),)
        ).copy()

    def __len__(self):
        return len(self.positions)

    @property
    def dim(self):
        return self.positions.shape[1]

    @classmethod
    def uniform_charge(cls, positions):
        positions = np.asarray(positions, dtype=float)
        n = len(positions)
        return cls(positions, np.full(n, 1.0 / n) if n else np.zeros(0))

    def shifted(self, offset):
        return Particles(self.positions + np.asarray(offset), self.charges)

    def to_csv(self, path):
        names = "xyz"[: self.dim]
        header = list(names) + ["q"]
        write_csv(path, header, np.column_stack([self.positions, self.charges]))


# ---------------------------------------------------------------------------
# Morton keys
# ---------------------------------------------------------------------------

_SPREAD2 = [
    (16, 0x0000FFFF0000FFFF),
    (8, 0x00FF00FF00FF00FF),
    (4, 0x0F0F0F0F0F0F0F0F),
    (2, 0x3333333333333333),
    (1, 0x5555555555555555),
]
_SPREAD3 = [
    (32, 0x001F00000000FFFF),
    (16, 0x001F0000FF0000FF),
    (8, 0x100F00F00F00F00F),
    (4, 0x10C30C30C30C30C3),
    (2, 0x1249249249249249),
]


def _spread(v, dim):
    v = v.astype(np.uint64)
    if dim == 2:
        v &= np.uint64(0xFFFFFFFF)
        table = _SPREAD2
    else:
        v &= np.uint64(0x1FFFFF)
        table = _SPREAD3
    for shift, mask in table:
        v = (v | (v << np.uint64(shift))) & np.uint64(mask)
    return v


def _compact(v, dim):
    table = _SPREAD2 if dim == 2 else _SPREAD3
    base = 0xFFFFFFFF if dim == 2 else 0x1FFFFF
    masks = [base] + [m for _, m in table]
    v = v.astype(np.uint64) & np.uint64(masks[-1])
    for i in range(len(table) - 1, -1, -1):
        v = (v | (v >> np.uint64(table[i][0]))) & np.uint64(masks[i])
    return v


def interleave(indices):
    """Bit-interleave integer cell indices of shape (n, dim); dimension 0 is the low bit."""
    indices = np.atleast_2d(np.asarray(indices))
    dim = indices.shape[1]
    key = np.zeros(len(indices), dtype=np.uint64)
    for d in range(dim):
        key |= _spread(indices[:, d], dim) << np.uint64(d)
    return key


def deinterleave(keys, dim):
    keys = np.atleast_1d(np.asarray(keys, dtype=np.uint64))
    out = np.empty((len(keys), dim), dtype=np.int64)
    for d in range(dim):
        out[:, d] = _compact(keys >> np.uint64(d), dim).astype(np.int64)
    return out


def cell_indices(positions, domain, level):
    """Integer cell indices of ``positions`` at ``level``; the upper boundary clamps inward."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    if positions.shape[1] != domain.dim:
        raise ValueError("position dimension does not match domain")
    if level < 0 or level > MAX_DEPTH[domain.dim]:
        raise KeyCapacityError(
            f"level {level} exceeds the {MAX_DEPTH[domain.dim]}-level key capacity in {domain.dim}D"
        )
    inside = domain.contains(positions)
    if not np.all(inside):
        bad = positions[~inside][0]
        raise OutOfDomainError(f"position {bad.tolist()} outside domain {domain.lo}..{domain.hi}")
    scale = 2.0**level
    idx = np.floor((positions - domain.lo_array) / domain.extent * scale).astype(np.int64)
    return np.clip(idx, 0, (1 << level) - 1)


def morton_encode(positions, domain, level):
    """Morton keys of ``positions`` at ``level`` (uint64 array, or a scalar for one point)."""
    single = np.asarray(positions).ndim == 1
    keys = interleave(cell_indices(positions, domain, level))
    return int(keys[0]) if single else keys


# ---------------------------------------------------------------------------
# Gaussian beam with halo
# ---------------------------------------------------------------------------


def _gauss_box_mass(tau, domain):
    """Integral of exp(-|x|^2 / (2 tau^2)) over the domain box."""
    s = tau * math.sqrt(2.0)
    mass = 1.0
    for a, b in zip(domain.lo, domain.hi):
        mass *= tau * math.sqrt(math.pi / 2.0) * (math.erf(b / s) - math.erf(a / s))
    return mass


@dataclass(frozen=True)
class BeamParams:
    """Two radially symmetric Gaussians: a dense core plus a wide, faint halo.

    ``rho(x) = a1 * (exp(-|x|^2/(2 tau1^2)) + a2 * exp(-|x|^2/(2 tau2^2)))``,
    with ``a1`` normalizing the charge inside ``domain`` to one. ``center``
    shifts the whole profile (used by the single-blob self-force runs).
    """

    tau1: float
    tau2: float
    a2: float
    a1: float
    dim: int
    center: tuple = field(default=None)

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ValueError("Gaussian widths must be positive")
        if self.a2 < 0 or self.a1 <= 0:
            raise ValueError("need a2 >= 0 and a1 > 0")
        c = (0.0,) * self.dim if self.center is None else tuple(float(v) for v in self.center)
        if len(c) != self.dim:
            raise ValueError("center dimension mismatch")
        object.__setattr__(self, "center", c)

    @classmethod
    def normalized(cls, tau1, tau2, a2, dim, domain=None, center=None):
        """Build parameters with ``a1`` chosen so the charge inside ``domain`` is one."""
        domain = Domain.cube(dim) if domain is None else domain
        c = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
        shifted = Domain(tuple(domain.lo_array - c), tuple(domain.hi_array - c))
        mass = _gauss_box_mass(tau1, shifted) + a2 * _gauss_box_mass(tau2, shifted)
        return cls(tau1, tau2, a2, 1.0 / mass, dim, None if center is None else tuple(c))

    @classmethod
    def benchmark(cls, dim):
        """Beam-with-halo benchmark: core 0.02, halo width 0.3, halo intensity 1e-5."""
        params = cls.normalized(0.02, 0.3, 1e-5, dim)
        ref = QUOTED_A1[dim]
        log.info(
            "beam %dD: a1 = %.6g recomputed (quoted %.6g, relative deviation %.3g)",
            dim, params.a1, ref, params.a1 / ref - 1.0,
        )
        return params

    @classmethod
    def blob(cls, tau, dim, center=None, domain=None):
        """Single Gaussian charge cloud of unit charge inside ``domain``."""
        return cls.normalized(tau, tau, 0.0, dim, domain=domain, center=center)

    @property
    def center_array(self):
        return np.asarray(self.center)

    def component_masses(self):
        """Full-space masses of the core and halo components."""
        m1 = self.a1 * (2.0 * math.pi * self.tau1**2) ** (self.dim / 2)
        m2 = self.a1 * self.a2 * (2.0 * math.pi * self.tau2**2) ** (self.dim / 2)
        return m1, m2

    def radial(self, r):
        r2 = np.asarray(r, dtype=float) ** 2
        return self.a1 * (
            np.exp(-r2 / (2.0 * self.tau1**2)) + self.a2 * np.exp(-r2 / (2.0 * self.tau2**2))
        )

    def box_average(self, lo, hi):
        """Exact average of the density over boxes ``[lo, hi]`` (arrays of shape (n, dim))."""
        lo = np.atleast_2d(lo) - self.center_array
        hi = np.atleast_2d(hi) - self.center_array
        vol = np.prod(hi - lo, axis=1)
        total = np.zeros(len(lo))
        for amp, tau in ((1.0, self.tau1), (self.a2, self.tau2)):
            if amp == 0.0:
                continue
            s = tau * math.sqrt(2.0)
            part = np.prod(
                tau * math.sqrt(math.pi / 2.0) * (erf(hi / s) - erf(lo / s)), axis=1
            )
            total += amp * part
        return self.a1 * total / vol


def density_exact(x, params):
    """Analytic charge density at points ``x`` (shape (dim,) or (n, dim))."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x - params.center_array, axis=-1)
    return params.radial(r)


def sample_gaussian_beam(params, n, seed, domain=None):
    """Draw ``n`` i.i.d. particles from the beam density restricted to ``domain``.

    A mixture component is chosen in proportion to its mass, an isotropic
    Gaussian point is drawn from it, and points landing outside the domain
    are rejected. Every particle carries charge ``1/n``.
    """
    domain = Domain.cube(params.dim) if domain is None else domain
    rng = np.random.default_rng(seed)
    if n == 0:
        return Particles(np.zeros((0, params.dim)), np.zeros(0))
    m1, m2 = params.component_masses()
    p_core = m1 / (m1 + m2)
    chunks = []
    have = 0
    while have < n:
        batch = max(1024, int(1.1 * (n - have)) + 64)
        core = rng.random(batch) < p_core
        sigma = np.where(core, params.tau1, params.tau2)[:, None]
        pts = params.center_array + sigma * rng.standard_normal((batch, params.dim))
        pts = pts[domain.contains(pts)]
        chunks.append(pts)
        have += len(pts)
    pos = np.concatenate(chunks)[:n]
    return Particles(pos, np.full(n, 1.0 / n))
