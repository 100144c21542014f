import cmath

import numpy as np
import pytest

from conftest import disk_basis, disk_mesh
from mono_eit.coefficients import CoefficientError
from mono_eit.fem import ForwardSystem, energy_integral, solve_neumann
from mono_eit.inequalities import kappa_terms, sandwich_check, verify_general_inequalities
from mono_eit.nd import Measurement
from mono_eit.random_fields import FAMILIES, random_ordered_pair, random_pair

H, K = 0.2, 8
KAPPAS = (1.0, -1j, cmath.exp(1j * cmath.pi / 8))


def _admissible(family, kappa):
    return not (family == "real_anisotropic" and kappa == -1j)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("kappa", KAPPAS, ids=["1", "-i", "e^{i pi/8}"])
def test_bounds_hold(family, kappa):
    mesh = disk_mesh(H)
    A1, A2 = random_pair(family, mesh, np.random.default_rng(11))
    if not _admissible(family, kappa):
        # -i A1 has zero Hermitian part for real A1, so the hypothesis fails
        with pytest.raises(CoefficientError, match="not uniformly elliptic"):
            verify_general_inequalities(A1, A2, kappa, 50, mesh, disk_basis(H, K), seed=1)
        return
    rep = verify_general_inequalities(A1, A2, kappa, 50, mesh, disk_basis(H, K), seed=1)
    assert rep.passed, rep.failures[:3]
    assert rep.failures == []
    # the bounds hold on the whole span, not just on sampled currents
    assert rep.matrix_margin_lower >= -1e-10 * rep.scale
    assert rep.matrix_margin_upper >= -1e-10 * rep.scale


def test_bracket_vanishes_for_isotropic():
    mesh = disk_mesh(H)
    A1, A2 = random_pair("complex_isotropic", mesh, np.random.default_rng(12))
    for kappa in KAPPAS:
        assert np.abs(kappa_terms(A1, A2, kappa).bracket).max() <= 1e-12


def test_bracket_is_nonzero_for_anisotropic():
    mesh = disk_mesh(H)
    A1, A2 = random_pair("complex_anisotropic", mesh, np.random.default_rng(13))
    assert np.abs(kappa_terms(A1, A2, 1.0).bracket).max() > 1e-3


def test_real_family_terms_reduce_to_product():
    mesh = disk_mesh(H)
    A1, A2 = random_pair("real_anisotropic", mesh, np.random.default_rng(14))
    t = kappa_terms(A1, A2, 1.0)
    a1, a2 = A1.values.real, A2.values.real
    np.testing.assert_allclose(t.lower, a2 - a1, atol=1e-14)
    np.testing.assert_allclose(t.upper, a2 @ np.linalg.inv(a1) @ (a2 - a1), atol=1e-12)
    assert np.abs(t.B).max() < 1e-15 and np.abs(t.C).max() < 1e-15


def test_non_elliptic_kappa_is_rejected():
    mesh = disk_mesh(H)
    A1, A2 = random_pair("real_anisotropic", mesh, np.random.default_rng(15))
    with pytest.raises(CoefficientError):
        kappa_terms(A1, A2, -1j)


def test_single_current_by_direct_solves():
    # independent evaluation of one current: boundary pairings and energies
    mesh = disk_mesh(H)
    basis = disk_basis(H, K)
    rng = np.random.default_rng(16)
    A1, A2 = random_pair("complex_anisotropic", mesh, rng)
    kappa = cmath.exp(1j * cmath.pi / 8)
    c = rng.standard_normal(K) + 1j * rng.standard_normal(K)
    u1 = solve_neumann(ForwardSystem(A1, mesh), c, basis)
    u2 = solve_neumann(ForwardSystem(A2, mesh), c, basis)
    # <f, Lambda f> with the pairing linear in f: c^T <f_k, trace conj(u)>
    pair1 = basis.trace_inner(c, u1.values)
    pair2 = basis.trace_inner(c, u2.values)
    full = mesh.full_mask()
    assert pair1 == pytest.approx(energy_integral(A1, u1, u1, full, mesh), rel=1e-9)
    lhs = (kappa * (pair1 - pair2)).real
    t = kappa_terms(A1, A2, kappa)
    lower = energy_integral(t.lower, u2, u2, full, mesh).real
    upper = energy_integral(t.upper, u2, u2, full, mesh).real
    assert lower <= lhs + 1e-10 and lhs <= upper + 1e-10


def test_harness_detects_swapped_data():
    mesh = disk_mesh(H)
    basis = disk_basis(H, K)
    A1, A2 = random_ordered_pair(mesh, np.random.default_rng(17))
    m1, m2 = Measurement(A1, mesh, basis), Measurement(A2, mesh, basis)
    rep = verify_general_inequalities(A1, A2, 1.0, 20, mesh, basis, measurements=(m2, m1))
    assert not rep.passed and rep.failures


def test_sandwich_on_ordered_and_reversed_pairs():
    mesh = disk_mesh(H)
    basis = disk_basis(H, K)
    A1, A2 = random_ordered_pair(mesh, np.random.default_rng(18))
    rep = sandwich_check(A1, A2, mesh, basis, trials=50)
    assert rep.passed and rep.nd_min_eig > 0
    rev = sandwich_check(A2, A1, mesh, basis, trials=50)
    # the integral bounds still hold but the ND difference is now negative
    assert rev.lower_violation <= 1e-8 * rev.scale and rev.upper_violation <= 1e-8 * rev.scale
    assert rev.nd_min_eig < 0 and not rev.passed


def test_sandwich_needs_self_adjoint():
    mesh = disk_mesh(H)
    A1, A2 = random_pair("complex_isotropic", mesh, np.random.default_rng(19))
    with pytest.raises(CoefficientError):
        sandwich_check(A1, A2, mesh, disk_basis(H, K))
