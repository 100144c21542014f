import math

import numpy as np
import pytest

from conftest import disk_basis, disk_mesh, identity_field
from mono_eit.coefficients import MatrixField
from mono_eit.fem import (
    ForwardSystem,
    NumericalError,
    build_basis,
    energy_integral,
    neumann_load,
    solve_basis,
    solve_neumann,
    virtual_measurement,
)
from mono_eit.mesh import mark_gamma
from mono_eit.nd import nd_matrix
from mono_eit.random_fields import random_field


def test_basis_is_orthonormal_and_mean_free():
    basis = disk_basis(0.1, 16)
    np.testing.assert_allclose(basis.gram, np.eye(16), atol=1e-12)
    means = np.einsum("eq,eqk->k", basis.quad_weights, basis.values)
    np.testing.assert_allclose(means, 0.0, atol=1e-12)


def test_basis_is_nested():
    mesh = disk_mesh(0.1)
    big, small = build_basis(mesh, 16), build_basis(mesh, 8)
    np.testing.assert_allclose(big.truncate(8).values, small.values, atol=1e-12)


def test_basis_first_pair_is_cos_sin_of_angle():
    # on the full circle arclength is proportional to the polar angle
    basis = disk_basis(0.05, 4)
    p = basis.quad_points.reshape(-1, 2)
    theta = np.arctan2(p[:, 1], p[:, 0])
    f = basis.values.reshape(-1, 4)
    L = basis.gamma_length
    assert np.corrcoef(f[:, 0], np.cos(theta))[0, 1] > 1 - 1e-4
    assert np.corrcoef(f[:, 1], np.sin(theta))[0, 1] > 1 - 1e-4
    np.testing.assert_allclose(np.max(np.abs(f[:, 0])), math.sqrt(2 / L), rtol=1e-3)


def test_basis_on_partial_arc():
    mesh = mark_gamma(disk_mesh(0.1), 0.0, math.pi)
    basis = build_basis(mesh, 8)
    np.testing.assert_allclose(basis.gram, np.eye(8), atol=1e-12)
    assert basis.gamma_length == pytest.approx(mesh.gamma_length)


@pytest.mark.parametrize("K", [0, 3, 10_000])
def test_basis_rejects_bad_sizes(K):
    with pytest.raises(ValueError):
        build_basis(disk_mesh(0.2), K)


def test_non_elliptic_coefficient_is_rejected():
    mesh = disk_mesh(0.2)
    with pytest.raises(NumericalError):
        ForwardSystem(MatrixField.constant(mesh, np.diag([1.0, -1.0])), mesh)


def _harmonic_trace_error(h, k=2):
    """Trace error of the solution for ``f = cos(k theta)`` against ``r^k cos(k theta) / k``."""
    mesh = disk_mesh(h)
    basis = disk_basis(h, 8)
    system = ForwardSystem(identity_field(mesh), mesh)

    def f(p):
        return np.cos(k * np.arctan2(p[:, 1], p[:, 0]))

    sol = solve_neumann(system, f, basis)
    b = np.unique(mesh.boundary_edges)
    v = mesh.vertices[b]
    exact = np.cos(k * np.arctan2(v[:, 1], v[:, 0])) / k
    return np.abs(sol.values[b] - exact).max() / np.abs(exact).max()


def test_trace_converges_quadratically():
    e1, e2 = _harmonic_trace_error(0.1), _harmonic_trace_error(0.05)
    assert e1 < 0.05
    assert e1 / e2 >= 3.0


def test_gauge_and_projection_of_callable_data():
    mesh = disk_mesh(0.1)
    basis = disk_basis(0.1, 8)
    system = ForwardSystem(identity_field(mesh), mesh)
    sol = solve_neumann(system, lambda p: 1.0 + p[:, 0], basis)
    assert sol.projected
    np.testing.assert_allclose(system.gauge @ sol.values, 0.0, atol=1e-12)
    _, flag = neumann_load(mesh, basis, np.eye(8)[0])
    assert not flag


def test_stiffness_is_positive_on_gauged_space():
    mesh = disk_mesh(0.2)
    A = random_field("real_anisotropic", mesh, np.random.default_rng(0))
    S = ForwardSystem(A, mesh).stiffness.toarray()
    ev = np.linalg.eigvalsh(0.5 * (S + S.T))
    assert abs(ev[0]) < 1e-10 * ev[-1]  # constants
    assert ev[1] > 1e-6


def test_coercivity_of_complex_energy():
    mesh = disk_mesh(0.2)
    rng = np.random.default_rng(1)
    A = random_field("complex_anisotropic", mesh, rng)
    c = np.linalg.eigvalsh(A.real_part)[:, 0].min()
    S = ForwardSystem(A, mesh).stiffness
    L = ForwardSystem(identity_field(mesh), mesh).stiffness
    for _ in range(20):
        v = rng.standard_normal(mesh.n_vertices) + 1j * rng.standard_normal(mesh.n_vertices)
        energy = np.vdot(v, S.T @ v)  # sum_c A grad v . conj(grad v)
        assert energy.real >= c * np.vdot(v, L @ v).real * (1 - 1e-12)


@pytest.mark.parametrize("family", ["complex_isotropic", "complex_anisotropic"])
def test_reciprocity(family):
    mesh = disk_mesh(0.1)
    basis = disk_basis(0.1, 8)
    A = random_field(family, mesh, np.random.default_rng(2))
    N = nd_matrix(A, mesh, basis).entries
    N_adj = nd_matrix(A.adjoint(), mesh, basis).entries
    np.testing.assert_allclose(N, N_adj.conj().T, atol=1e-12 * np.abs(N).max())


def test_energy_integral_matches_matrix_entries():
    mesh = disk_mesh(0.1)
    basis = disk_basis(0.1, 6)
    A = random_field("complex_anisotropic", mesh, np.random.default_rng(3))
    sols = solve_basis(ForwardSystem(A, mesh), basis)
    E = sols.energy_matrix(A)
    full = mesh.full_mask()
    for i, j in [(0, 0), (1, 3), (4, 2)]:
        assert energy_integral(A, sols.solution(i), sols.solution(j), full, mesh) == pytest.approx(E[i, j], rel=1e-12)


def test_virtual_measurement_reproduces_solution():
    # with F = grad u on the whole domain and A = I, the virtual solution is u itself
    mesh = disk_mesh(0.1)
    basis = disk_basis(0.1, 6)
    A = identity_field(mesh)
    sol = solve_neumann(ForwardSystem(A, mesh), np.eye(6)[2], basis)
    full = mesh.full_mask()
    w = virtual_measurement(A, full, sol.gradients(mesh), mesh)
    np.testing.assert_allclose(w.values, sol.values, atol=1e-10)
