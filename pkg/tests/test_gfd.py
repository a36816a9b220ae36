import math

import numpy as np
import pytest

from apcloud.gfd import (
    DegenerateStencilError,
    IllConditionedStencilError,
    StencilSet,
    build_scaled_vandermonde,
    build_stencil,
    column_orders,
    gaussian_weight,
    multi_indices,
    stencil_weights,
    taylor_interpolate,
    vandermonde_rows,
    wls_derivative_weights,
    wls_normal_equations,
)
from apcloud.octree import default_required, gfd_neighbor_select_all


def quad(x, dim):
    """Generic quadratic and its derivatives in the module's column order."""
    A = np.array([[1.3, -0.4, 0.25], [-0.4, -0.7, 0.6], [0.25, 0.6, 0.9]])[:dim, :dim]
    g = np.array([0.3, -1.1, 0.5])[:dim]
    val = 0.7 + x @ g + 0.5 * np.einsum("...i,ij,...j->...", x, A, x)
    grad = g + x @ A
    hess = [A[a] for a in multi_indices(dim, 2) if len(a) == 2]
    return val, grad, np.array(hess)


def test_multi_index_order():
    assert multi_indices(2) == [(0,), (1,), (0, 0), (0, 1), (1, 1)]
    assert len(multi_indices(3)) == 9
    assert column_orders(2).tolist() == [1, 1, 2, 2, 2]


def test_vandermonde_rows_have_taylor_factors():
    row = vandermonde_rows(np.array([2.0, 3.0]))
    assert row.tolist() == [2.0, 3.0, 2.0, 6.0, 4.5]
    rows3 = vandermonde_rows(np.ones((4, 5, 3)), 3)
    assert rows3.shape == (4, 5, 19)


def test_weight_forms():
    r = np.linspace(0, 1, 11)
    wn = gaussian_weight(r, 1.0, "normalized")
    wl = gaussian_weight(r, 1.0, "literal")
    assert wn[0] == wl[0] == 1.0
    assert wn[-1] == pytest.approx(0.0, abs=1e-15)
    assert wl[-1] > 0
    assert np.all(np.diff(wn) < 0) and np.all(np.diff(wl) < 0)
    with pytest.raises(ValueError):
        gaussian_weight([1.5], 1.0)
    with pytest.raises(ValueError):
        gaussian_weight([0.5], 1.0, "cubic")


def test_literal_weight_equals_normalized_with_double_support(rng):
    off = rng.normal(size=(7, 9, 2))
    assert np.allclose(stencil_weights(off, "literal"), stencil_weights(off, "normalized", 2.0),
                       rtol=0, atol=1e-15)
    r = np.linalg.norm(off, axis=-1)
    w = (np.exp(-(r / r.max(-1, keepdims=True)) ** 2) - math.exp(-4)) / (1 - math.exp(-4))
    assert np.allclose(stencil_weights(off, "literal"), w, atol=1e-15)


def test_svd_weights_match_normal_equations(rng):
    center = np.zeros(2)
    nb = rng.uniform(-1, 1, size=(10, 2)) * 0.05
    V0, h = build_scaled_vandermonde(center, nb)
    W = stencil_weights(nb - center)
    D = wls_derivative_weights(V0, W, h, column_orders(2))
    Dn = wls_normal_equations(V0, W, h, column_orders(2))
    assert np.allclose(D, Dn, rtol=1e-9, atol=1e-9 * np.abs(Dn).max())


@pytest.mark.parametrize("dim,m", [(2, 8), (2, 12), (3, 17)])
@pytest.mark.parametrize("form", ["normalized", "literal"])
def test_quadratics_are_differentiated_exactly(rng, dim, m, form):
    pos = np.vstack([np.zeros(dim) + 0.1, 0.1 + rng.uniform(-0.03, 0.03, size=(m, dim))])
    st = build_stencil(0, np.arange(1, m + 1), pos, weight_form=form)
    val, grad, hess = quad(pos, dim)
    d = st.derivatives(val)
    assert np.allclose(d[:dim], grad[0], atol=1e-9)
    assert np.allclose(d[dim:], hess, atol=1e-7)


def test_collinear_stencil_is_ill_conditioned():
    pos = np.column_stack([np.linspace(0, 1, 9), np.zeros(9)])
    with pytest.raises(IllConditionedStencilError):
        build_stencil(0, np.arange(1, 9), pos)


def test_too_few_neighbours():
    pos = np.random.default_rng(0).normal(size=(4, 2))
    with pytest.raises(DegenerateStencilError):
        build_stencil(0, [1, 2, 3], pos)
    with pytest.raises(DegenerateStencilError):
        build_scaled_vandermonde([0.0, 0.0], [[0.0, 0.0]])


def test_taylor_interpolation_exact_for_quadratics(rng):
    node = rng.normal(size=(50, 2))
    tgt = node + 0.1 * rng.normal(size=(50, 2))
    val, grad, hess = quad(node, 2)
    derivs = np.column_stack([grad, np.tile(hess, (50, 1))])
    assert np.allclose(taylor_interpolate(tgt, node, val, derivs), quad(tgt, 2)[0], atol=1e-12)


@pytest.mark.parametrize("name", ["beam-2d", "nested-2d", "distance-3d"])
def test_stencil_set_operators(nodesets, name):
    ns = nodesets[name]
    centers = np.flatnonzero(ns.interior)
    lists = gfd_neighbor_select_all(ns, default_required(ns.dim), centers)
    ss = StencilSet(ns.positions, centers, lists)
    ops = ss.operators(len(ns))
    val, grad, hess = quad(ns.positions, ns.dim)
    for a, D in enumerate(ops):
        assert np.allclose(np.asarray(D.sum(axis=1)).ravel(), 0.0, atol=1e-8 * abs(D).max())
        got = (D @ val)[centers]
        want = grad[centers, a] if a < ns.dim else np.full(len(centers), hess[a - ns.dim])
        assert np.allclose(got, want, rtol=0, atol=1e-8 * max(1.0, np.abs(want).max()))
    assert ss.index((1, 0)) == ss.index((0, 1)) == ns.dim + 1
    st = ss.stencil(3)
    assert np.allclose(st.derivatives(val), np.array([D[centers[3]] @ val for D in ops]).ravel())
