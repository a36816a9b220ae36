import numpy as np
import pytest

from apcloud.geometry import Domain, Particles, sample_gaussian_beam
from apcloud.octree import ExpectedCounts, RefinementConfig, select_nodes
from apcloud.pic import CIC, NGP
from apcloud.solver import (
    STAGES_2D,
    STAGES_3D,
    PartitionError,
    assemble_density_system,
    assemble_poisson_system,
    build_stencils,
    exact_cell_averages,
    interpolate_to_particles,
    laplacian_operator,
    moment_coefficients,
    moment_table,
    ngp_deposit,
    node_derivatives,
    solve_apcloud,
    stage_labels,
)


def quadratic(x):
    """phi = 1 + x - 2y + x^2 + xy + 1.5 y^2 (+ z^2 - yz in 3D); Laplace(phi) = 5 (+2)."""
    v = 1 + x[:, 0] - 2 * x[:, 1] + x[:, 0] ** 2 + x[:, 0] * x[:, 1] + 1.5 * x[:, 1] ** 2
    g = np.column_stack([1 + 2 * x[:, 0] + x[:, 1], -2 + x[:, 0] + 3 * x[:, 1]])
    if x.shape[1] == 3:
        v = v + x[:, 2] ** 2 - x[:, 1] * x[:, 2]
        g = np.column_stack([g[:, 0], g[:, 1] - x[:, 2], 2 * x[:, 2] - x[:, 1]])
        return v, g, 7.0
    return v, g, 5.0


def test_ngp_moments():
    m = moment_coefficients(0.3, NGP, 2, 2)
    assert m.a0 == 1.0
    assert np.all(m.a1 == 0)
    assert m.a2[0, 0] == pytest.approx(0.3**2 / 24)
    assert m.a2[0, 1] == 0.0
    assert m.vector.tolist() == pytest.approx([0, 0, 0.09 / 24, 0, 0.09 / 24])
    m3 = moment_coefficients(1.0, NGP, 4, 3)
    # fourth moment of the unit box is 1/80, divided by 4!
    assert m3.vector[-1] == pytest.approx(1 / 80 / 24)
    with pytest.raises(ValueError):
        moment_coefficients(0.1, CIC)
    with pytest.raises(ValueError):
        moment_coefficients(0.1, NGP, k=1)


def test_moment_table_scales_with_h(nodesets):
    ns = nodesets["beam-2d"]
    tab = moment_table(ns)
    assert np.allclose(tab[:, 2], ns.h**2 / 24)
    assert np.all(tab[:, [0, 1, 3]] == 0)


def test_stage_labels():
    assert len(STAGES_2D) == 7 and STAGES_2D[0] == "Build quadtree"
    assert stage_labels(3)[0] == "Build octree"
    assert STAGES_3D[1:] == STAGES_2D[1:]


def test_ngp_deposit_conserves_charge(nodesets, beam2):
    ns = nodesets["beam-2d"]
    parts = sample_gaussian_beam(beam2, 100_000, seed=4)
    rho = ngp_deposit(parts, ns)
    assert abs(np.sum(rho * ns.h**2) - parts.charges.sum()) < 1e-12
    assert np.all(rho[~ns.interior] == 0)
    with pytest.raises(PartitionError):
        ngp_deposit(parts, ns, owner=np.full(len(parts), int(np.flatnonzero(~ns.interior)[0])))


def test_exact_cell_averages_integrate_to_one(nodesets, beam2):
    ns = nodesets["beam-2d"]
    avg = exact_cell_averages(beam2, ns)
    assert np.sum(avg * ns.h**2) == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("name", ["beam-2d", "sampled-2d", "beam-3d"])
def test_system_row_sums(nodesets, name):
    ns = nodesets[name]
    ops = build_stencils(ns).operators(len(ns))
    B = assemble_density_system(ns, ops, moment_table(ns), np.ones(len(ns))).matrix
    assert np.allclose(np.asarray(B.sum(axis=1)).ravel(), 1.0, atol=1e-10)
    L = laplacian_operator(ops, ns.dim)
    scale = np.abs(L).max(axis=1).toarray().ravel() + 1.0
    assert np.all(np.abs(np.asarray(L.sum(axis=1)).ravel()) / scale < 1e-10)


def test_boundary_rows_are_identity(nodesets):
    ns = nodesets["distance-2d"]
    ops = build_stencils(ns).operators(len(ns))
    bvals = np.arange(len(ns), dtype=float)
    sys = assemble_poisson_system(ns, ops, np.zeros(len(ns)), bvals)
    bd = np.flatnonzero(~ns.interior)
    dense = sys.matrix[bd].toarray()
    assert np.array_equal(dense, np.eye(len(ns))[bd])
    assert np.array_equal(sys.rhs[bd], bvals[bd])


@pytest.mark.parametrize("name", ["beam-2d", "nested-2d", "beam-3d"])
def test_end_to_end_quadratic_exactness(nodesets, name, rng):
    ns = nodesets[name]
    dim = ns.dim
    empty = Particles(np.zeros((0, dim)), np.zeros(0))
    pts = rng.uniform(-1, 1, size=(2000, dim))
    _, _, lap = quadratic(pts)
    sol = solve_apcloud(empty, ns.domain, 1.0, lambda p: quadratic(p)[0], nodeset=ns,
                        rho_m=lambda s: np.where(s.interior, lap, 0.0),
                        boundary_density=lambda p: np.full(len(p), lap), positions=pts)
    v, g, _ = quadratic(pts)
    assert np.max(np.abs(sol.phi_particles - v)) <= 1e-8 * np.max(np.abs(v))
    assert np.max(np.abs(sol.E_particles - g)) <= 1e-8 * np.max(np.abs(g))
    assert np.allclose(sol.rho[ns.interior], lap)
    assert sol.residuals["phi"] <= 1e-10


def test_boundary_derivatives_follow_owner(nodesets):
    ns = nodesets["beam-2d"]
    ops = build_stencils(ns).operators(len(ns))
    v, g, _ = quadratic(ns.positions)
    d = node_derivatives(ns, ops, v)
    assert np.allclose(d[:, :2], g, atol=1e-8)
    phi_p, E_p = interpolate_to_particles(ns, v, d, ns.positions[:5])
    assert np.allclose(phi_p, v[:5]) and np.allclose(E_p, g[:5])


def test_solve_from_particles_and_dumps(tmp_path, beam2):
    d = Domain.cube(2)
    parts = sample_gaussian_beam(beam2, 20_000, seed=8)
    sol = solve_apcloud(parts, d, 0.6, lambda p: np.zeros(len(p)))
    assert list(sol.timings) == list(STAGES_2D)
    assert sol.total_time == pytest.approx(sum(sol.timings.values()))
    assert sol.phi_particles.shape == (20_000,) and sol.E_particles.shape == (20_000, 2)
    # a positive charge blob gives a potential minimum near its centre
    assert sol.phi[np.argmin(sol.phi)] < 0
    sol.dump_nodes_csv(tmp_path / "n.csv")
    sol.dump_particles_csv(tmp_path / "p.csv")
    sol.dump_timing_csv(tmp_path / "t.csv")
    assert (tmp_path / "n.csv").read_text().splitlines()[0] == "x,y,h,rho,phi,Ex,Ey"
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "x,y,phi,Ex,Ey"
    timing = (tmp_path / "t.csv").read_text().splitlines()
    assert timing[0] == "stage,seconds" and timing[-1].startswith("Total running time,")
    assert len(timing) == 9


def test_literal_and_normalized_weights_agree(beam2):
    d = Domain.cube(2)
    ns = select_nodes(ExpectedCounts(beam2, d, 1_000_000), RefinementConfig(1.0), d)
    a = build_stencils(ns, weight_form="literal").operators(len(ns))
    b = build_stencils(ns, weight_form="normalized").operators(len(ns))
    for A, B in zip(a, b):
        assert abs(A - B).max() <= 1e-9 * abs(B).max()
