"""Generalized finite differences on scattered nodes.

A node's derivatives up to order ``k`` are fitted to the value increments of
its stencil neighbours by weighted least squares on the scaled Vandermonde
matrix. Derivatives are ordered degree by degree, and within a degree by
sorted index tuples, e.g. ``[f_x, f_y, f_xx, f_xy, f_yy]`` in 2D.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np
import scipy.sparse as sp

from apcloud.sparse import canonical

WEIGHT_C = 4.0
COND_LIMIT = 1e12


class DegenerateStencilError(ValueError):
    pass


class IllConditionedStencilError(ValueError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


def multi_indices(dim, k=2):
    """Derivative index tuples up to total order ``k``."""
    out = []
    for order in range(1, k + 1):
        out.extend(combinations_with_replacement(range(dim), order))
    return out


def column_orders(dim, k=2):
    return np.array([len(a) for a in multi_indices(dim, k)])


def _taylor_factors(dim, k):
    """1/alpha! for every multi-index, and exponent arrays of shape (p, dim)."""
    alphas = multi_indices(dim, k)
    powers = np.zeros((len(alphas), dim), dtype=int)
    for i, a in enumerate(alphas):
        for d in a:
            powers[i, d] += 1
    fact = np.array([1.0 / np.prod([math.factorial(p) for p in row]) for row in powers])
    return powers, fact


def vandermonde_rows(xi, k=2):
    """Scaled Vandermonde rows for offsets ``xi`` of shape (..., dim)."""
    xi = np.asarray(xi, dtype=float)
    _, fact = _taylor_factors(xi.shape[-1], k)
    out = np.empty(xi.shape[:-1] + (len(fact),))
    for i, alpha in enumerate(multi_indices(xi.shape[-1], k)):
        col = fact[i] * xi[..., alpha[0]]
        for d in alpha[1:]:
            col = col * xi[..., d]
        out[..., i] = col
    return out


def build_scaled_vandermonde(center, neighbors, k=2):
    """Return ``(V0, h)`` for one stencil; ``h`` is the largest coordinate offset."""
    center = np.asarray(center, dtype=float)
    offsets = np.atleast_2d(np.asarray(neighbors, dtype=float)) - center
    if offsets.size == 0:
        raise DegenerateStencilError("stencil has no neighbours")
    h = float(np.max(np.abs(offsets)))
    if h == 0.0:
        raise DegenerateStencilError("all neighbours coincide with the centre")
    return vandermonde_rows(offsets / h, k), h


def gaussian_weight(r, r_max, form="normalized", c=WEIGHT_C):
    """Gaussian stencil weight, 1 at ``r = 0``.

    ``form="normalized"`` is ``(exp(-c r^2/r_max^2) - e^-c) / (1 - e^-c)`` and
    vanishes at ``r_max``; ``form="literal"`` keeps ``exp(-r^2/r_max^2)`` in
    the numerator and stays positive there.
    """
    r = np.asarray(r, dtype=float)
    if r_max <= 0:
        raise ValueError("r_max must be positive")
    if np.any(r < 0) or np.any(r > r_max * (1 + 1e-12)):
        raise ValueError("weight requested outside [0, r_max]")
    q = np.minimum(r / r_max, 1.0) ** 2
    ec = math.exp(-c)
    if form == "normalized":
        num = np.exp(-c * q)
    elif form == "literal":
        num = np.exp(-q)
    else:
        raise ValueError(f"unknown weight form {form!r}")
    return (num - ec) / (1.0 - ec)


# the normalized form with twice the farthest-neighbour distance as radius
# reproduces the literal form; with radius 1x it zeroes the outer neighbours
DEFAULT_SUPPORT = {"normalized": 2.0, "literal": 1.0}


def stencil_weights(offsets, form="normalized", support=None):
    r = np.linalg.norm(offsets, axis=-1)
    support = DEFAULT_SUPPORT[form] if support is None else support
    r_max = support * np.max(r, axis=-1, keepdims=True)
    q = (r / r_max) ** 2
    ec = math.exp(-WEIGHT_C)
    num = np.exp(-WEIGHT_C * q) if form == "normalized" else np.exp(-q)
    return (num - ec) / (1.0 - ec)


def _batched_pinv(V0, W, node_ids=None):
    sw = np.sqrt(W)
    A = sw[..., None] * V0
    U, S, Vt = np.linalg.svd(A, full_matrices=False)
    smin = S[..., -1]
    cond = np.where(smin > 0, S[..., 0] / np.where(smin > 0, smin, 1.0), np.inf)
    bad = np.flatnonzero(~(cond <= COND_LIMIT))
    if bad.size:
        node = None if node_ids is None else int(np.asarray(node_ids)[bad[0]])
        raise IllConditionedStencilError(
            f"stencil condition estimate {cond[bad[0]]:.3g} exceeds {COND_LIMIT:g}"
            + (f" at node {node}" if node is not None else ""),
            node=node,
        )
    pinv = np.swapaxes(Vt, -1, -2) @ (np.swapaxes(U, -1, -2) / S[..., None])
    return pinv * sw[..., None, :], cond


def wls_derivative_weights(V0, W, h, orders):
    """Map neighbour increments to unscaled derivatives, shape (p, m).

    Solves ``min ||W^(1/2) (V0 x - df)||`` through an SVD of the weighted
    matrix; ``orders`` gives the derivative order of each column.
    """
    V0 = np.asarray(V0, dtype=float)
    W = np.asarray(W, dtype=float)
    if V0.shape[0] < V0.shape[1]:
        raise DegenerateStencilError("fewer neighbours than unknowns")
    D, _ = _batched_pinv(V0[None], W[None])
    return D[0] / (h ** np.asarray(orders))[:, None]


def wls_normal_equations(V0, W, h, orders):
    """Normal-equations solution of the same problem; kept as a test oracle."""
    V0 = np.asarray(V0, dtype=float)
    M = V0.T @ (W[:, None] * V0)
    return np.linalg.solve(M, V0.T * W) / (h ** np.asarray(orders))[:, None]


@dataclass
class GfdStencil:
    center: int
    neighbors: np.ndarray
    h: float
    xi: np.ndarray
    weights: np.ndarray
    derivative_weights: np.ndarray

    def derivatives(self, values):
        """Apply the stencil to a global value array."""
        values = np.asarray(values, dtype=float)
        return self.derivative_weights @ (values[self.neighbors] - values[self.center])


def build_stencil(center, neighbors, positions, k=2, weight_form="normalized", support=None):
    positions = np.asarray(positions, dtype=float)
    neighbors = np.asarray(neighbors, dtype=int)
    V0, h = build_scaled_vandermonde(positions[center], positions[neighbors], k)
    offsets = positions[neighbors] - positions[center]
    W = stencil_weights(offsets, weight_form, support)
    orders = column_orders(positions.shape[1], k)
    if V0.shape[0] < V0.shape[1]:
        raise DegenerateStencilError(f"node {center}: fewer neighbours than unknowns")
    D, _ = _batched_pinv(V0[None], W[None], node_ids=[center])
    D = D[0] / (h**orders)[:, None]
    return GfdStencil(center, neighbors, h, offsets / h, W, D)


class StencilSet:
    """Derivative weights for many nodes, computed in batches of equal stencil size.

    ``operators[i]`` is the sparse matrix taking nodal values to the ``i``-th
    derivative at every node listed in ``centers`` (other rows are empty).
    """

    def __init__(self, positions, centers, neighbor_lists, k=2, weight_form="normalized",
                 support=None):
        self.positions = np.asarray(positions, dtype=float)
        self.dim = self.positions.shape[1]
        self.k = k
        self.alphas = multi_indices(self.dim, k)
        self.centers = np.asarray(centers, dtype=int)
        self.neighbor_lists = [np.asarray(nb, dtype=int) for nb in neighbor_lists]
        self.weight_form = weight_form
        self.support = support
        self.h = np.zeros(len(self.centers))
        self._weights = [None] * len(self.centers)
        self._compute()

    def _compute(self):
        orders = column_orders(self.dim, self.k)
        p = len(orders)
        sizes = np.array([len(nb) for nb in self.neighbor_lists])
        for m in np.unique(sizes):
            sel = np.flatnonzero(sizes == m)
            if m < p:
                raise DegenerateStencilError(
                    f"node {int(self.centers[sel[0]])}: {m} neighbours for {p} unknowns"
                )
            nb = np.stack([self.neighbor_lists[i] for i in sel])
            offsets = self.positions[nb] - self.positions[self.centers[sel]][:, None, :]
            h = np.max(np.abs(offsets), axis=(1, 2))
            if np.any(h == 0):
                raise DegenerateStencilError(
                    f"node {int(self.centers[sel[h == 0][0]])}: neighbours coincide with centre"
                )
            V0 = vandermonde_rows(offsets / h[:, None, None], self.k)
            W = stencil_weights(offsets, self.weight_form, self.support)
            D, _ = _batched_pinv(V0, W, node_ids=self.centers[sel])
            D = D / (h[:, None] ** orders[None, :])[..., None]
            self.h[sel] = h
            for row, i in enumerate(sel):
                self._weights[i] = D[row]

    def stencil(self, i):
        nb = self.neighbor_lists[i]
        c = self.centers[i]
        offsets = self.positions[nb] - self.positions[c]
        return GfdStencil(int(c), nb, float(self.h[i]), offsets / self.h[i],
                          stencil_weights(offsets, self.weight_form, self.support),
                          self._weights[i])

    def operators(self, n=None):
        """One sparse (n x n) matrix per derivative multi-index."""
        n = len(self.positions) if n is None else n
        p = len(self.alphas)
        rows, cols, vals = [], [], [[] for _ in range(p)]
        for i, c in enumerate(self.centers):
            nb = self.neighbor_lists[i]
            D = self._weights[i]
            rows.append(np.full(len(nb) + 1, c))
            cols.append(np.concatenate([nb, [c]]))
            for a in range(p):
                vals[a].append(np.concatenate([D[a], [-D[a].sum()]]))
        rows = np.concatenate(rows) if rows else np.zeros(0, int)
        cols = np.concatenate(cols) if cols else np.zeros(0, int)
        return [
            canonical(sp.coo_matrix((np.concatenate(v) if v else np.zeros(0), (rows, cols)),
                                    shape=(n, n)))
            for v in vals
        ]

    def index(self, alpha):
        return self.alphas.index(tuple(sorted(alpha)))


def taylor_interpolate(target, node, value, derivs, k=2):
    """Evaluate the order-``k`` Taylor expansion about ``node`` at ``target``.

    Works on single points or on arrays: ``target``/``node`` of shape (n, dim),
    ``value`` (n,), ``derivs`` (n, p).
    """
    target = np.asarray(target, dtype=float)
    node = np.asarray(node, dtype=float)
    delta = target - node
    terms = vandermonde_rows(delta, k)
    return np.asarray(value) + np.sum(terms * np.asarray(derivs), axis=-1)
