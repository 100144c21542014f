"""Acceptance criteria, each at its committed tolerance.

Every test prints one ``CRITERION n: PASS/FAIL`` line; the lines are
repeated in the terminal summary.
"""

import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from conftest import disk_basis, disk_mesh, identity_field, record_criterion
from mono_eit.coefficients import MatrixField, RadialShear, ScalarBounds, product_bound_check
from mono_eit.inequalities import kappa_terms, sandwich_check, verify_general_inequalities
from mono_eit.coefficients import CoefficientError
from mono_eit.locpot import localization_spectrum, energy_form_pair, simultaneous_localization_check
from mono_eit.mesh import RegionMask, dilate_mask, outer_shape_closure, rasterize_region
from mono_eit.monotonicity import (
    inner_inclusion_test,
    inner_reconstruction_sweep,
    outer_inclusion_test,
    outer_reconstruction_sweep,
    support_hausdorff,
)
from mono_eit.nd import Measurement, NdMatrix, OuterTests, inner_test_matrices, outer_test_matrices
from mono_eit.phantoms import add_noise, build_phantom, load_spec, pushforward_twin
from mono_eit.random_fields import FAMILIES, random_hpd, random_ordered_pair, random_pair

SCENARIOS = Path(__file__).parent.parent / "scenarios"
KS = (8, 16, 32)
TAU = 1e-9


def _elapsed(t0):
    return time.perf_counter() - t0


def _mode_indices(n):
    return 2 * n - 2, 2 * n - 1  # cos n, sin n


# ---------------------------------------------------------------------------
# 1, 2: analytic oracles


def _disk_mode_errors(h, K=16, n_max=8):
    mesh = disk_mesh(h)
    N = Measurement(identity_field(mesh), mesh, disk_basis(h, K)).nd().entries
    errs = []
    for n in range(1, n_max + 1):
        for i in _mode_indices(n):
            errs.append(abs(N[i, i].real - 1 / n) * n)
    return N, max(errs)


def test_criterion_1_disk_oracle():
    t0 = time.perf_counter()
    N, err = _disk_mode_errors(0.02)
    runtime = _elapsed(t0)
    _, err_fine = _disk_mode_errors(0.01)
    off = np.abs(N - np.diag(np.diag(N))).sum(axis=1)
    dominant = bool(np.all(np.abs(np.diag(N)) > off))
    ok = err <= 0.02 and err_fine <= 0.5 * err and dominant and runtime <= 30
    record_criterion(
        1, ok, f"max rel err {err:.2e} (h=0.02), {err_fine:.2e} (h=0.01), diag dominant {dominant}, {runtime:.1f}s"
    )
    assert ok


def _two_region_oracle(n, k, rho):
    """Solve the interface conditions for u = a r^n inside and
    b r^n + c r^-n outside with unit Neumann flux of mode n; return u(1)."""
    M = np.array(
        [
            [rho**n, -(rho**n), -(rho**-n)],  # continuity
            [k * rho**n, -(rho**n), rho**-n],  # flux continuity (times rho / n)
            [0.0, n, -n],  # du/dr = 1 on r = 1
        ]
    )
    a, b, c = np.linalg.solve(M, [0.0, 0.0, 1.0])
    return b + c


def test_criterion_2_concentric_oracle():
    k, rho, h = 2.0, 0.5, 0.02
    q = (1 - k) / (1 + k)
    closed = [(1 / n) * (1 + q * rho ** (2 * n)) / (1 - q * rho ** (2 * n)) for n in range(1, 7)]
    solved = [_two_region_oracle(n, k, rho) for n in range(1, 7)]
    np.testing.assert_allclose(solved, closed, rtol=1e-13)
    mesh = disk_mesh(h)
    A = identity_field(mesh).override(rasterize_region(mesh, f"disk(0,0,{rho})"), k * np.eye(2))
    N = Measurement(A, mesh, disk_basis(h, 32)).nd().entries
    err = max(abs(N[i, i].real - solved[n - 1]) / solved[n - 1] for n in range(1, 7) for i in _mode_indices(n))
    ok = err <= 0.03
    record_criterion(2, ok, f"max rel err {err:.2e} for n <= 6")
    assert ok


# ---------------------------------------------------------------------------
# 3, 4, 5: inequalities


def test_criterion_3_sandwich():
    t0 = time.perf_counter()
    mesh, basis = disk_mesh(0.1), disk_basis(0.1, 16)
    rng = np.random.default_rng(3)
    worst_bound, worst_eig = -np.inf, -np.inf
    ok = True
    for trial in range(50):
        A1, A2 = random_ordered_pair(mesh, rng)
        rep = sandwich_check(A1, A2, mesh, basis, trials=100, seed=trial)
        worst_bound = max(worst_bound, rep.lower_violation / rep.scale, rep.upper_violation / rep.scale)
        worst_eig = max(worst_eig, -rep.nd_min_eig / rep.scale)
        ok &= rep.passed
    runtime = _elapsed(t0)
    ok = ok and worst_bound <= 1e-8 and worst_eig <= 1e-9 and runtime <= 120
    record_criterion(
        3, ok, f"worst bound violation {worst_bound:.1e}*scale, worst -min eig {worst_eig:.1e}*scale, {runtime:.1f}s"
    )
    assert ok


KAPPAS = (1.0, -1j, np.exp(1j * np.pi / 8))


def test_criterion_4_complex_kappa():
    mesh, basis = disk_mesh(0.1), disk_basis(0.1, 16)
    rng = np.random.default_rng(4)
    trials = violations = 0
    skipped = set()
    bracket_iso = 0.0
    for family in FAMILIES:
        for _ in range(4):
            A1, A2 = random_pair(family, mesh, rng)
            ms = (Measurement(A1, mesh, basis), Measurement(A2, mesh, basis))
            for kappa in KAPPAS:
                try:
                    terms = kappa_terms(A1, A2, kappa)
                except CoefficientError:
                    skipped.add((family, str(kappa)))
                    continue
                rep = verify_general_inequalities(A1, A2, kappa, 35, mesh, basis, seed=trials, measurements=ms)
                trials += rep.trials
                violations += len(rep.failures)
                if family == "complex_isotropic":
                    bracket_iso = max(bracket_iso, float(np.abs(terms.bracket).max()))
    ok = trials >= 1000 and violations == 0 and bracket_iso <= 1e-12
    record_criterion(
        4,
        ok,
        f"{trials} trials, {violations} violations, isotropic bracket {bracket_iso:.1e}, "
        f"skipped {sorted(skipped)}",
    )
    # kappa = -i has a vanishing Hermitian part on real coefficients
    assert skipped == {("real_anisotropic", str(-1j))}
    assert ok


def test_criterion_5_product_bounds():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    V = RegionMask(np.ones(1, dtype=bool), "pair")
    field = lambda m: MatrixField(m[None], "pair")
    worst = np.inf
    n = 10_000
    for k in range(n):
        alpha = rng.uniform(0.1, 2.0)
        beta = alpha + rng.uniform(0.5, 5.0)
        c = rng.uniform(0.01, 0.45) * (beta - alpha)
        if k % 2 == 0:
            # A2 - A1 >= c I
            a1 = random_hpd(rng, 1, alpha, beta)[0]
            a2 = a1 + c * np.eye(2) + random_hpd(rng, 1, 0.0, rng.uniform(0, 3))[0]
            bounds = ScalarBounds(alpha, beta, c)
            rep = product_bound_check(field(a1), field(a2), V, bounds, tol=1e-12)
            assert rep.margins["gap"] >= c * (1 - 1e-12)
            worst = min(worst, rep.margins["claim_i"])
            ok = rep.claim_i_holds
        else:
            # A2 - A1 <= -c I
            a2 = random_hpd(rng, 1, alpha, beta - c)[0]
            top = np.linalg.eigvalsh(a2)[-1]
            a1 = a2 + c * np.eye(2) + random_hpd(rng, 1, 0.0, beta - c - top)[0]
            bounds = ScalarBounds(alpha, beta, c)
            rep = product_bound_check(field(a1), field(a2), V, bounds, tol=1e-12)
            assert rep.margins["reverse_gap"] >= c * (1 - 1e-12)
            worst = min(worst, rep.margins["claim_ii"])
            ok = rep.claim_ii_holds
        if not ok:
            break
    runtime = _elapsed(t0)
    ok = ok and worst >= -1e-12 and runtime <= 5
    record_criterion(5, ok, f"{n} pairs, worst margin {worst:.2e}, {runtime:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 6, 7, 12: test operators on disk phantoms


@pytest.fixture(scope="module")
def posdef_phantom():
    t0 = time.perf_counter()
    p = build_phantom(load_spec(SCENARIOS / "disk_posdef.ini"))
    bg = Measurement(p.A0, p.mesh, p.basis)
    N_D = Measurement(p.A_D, p.mesh, p.basis).nd()
    bg.nd()
    return p, bg, N_D, _elapsed(t0)


def _truncate(tests: OuterTests, K):
    return OuterTests(*(m.truncate(K) for m in (tests.L_minus, tests.L_plus, tests.DL_minus, tests.DL_plus)))


def _outer_verdicts(N_D, N0, tests, K, tau=TAU):
    t = _truncate(tests, K)
    nd, n0 = N_D.truncate(K), N0.truncate(K)
    return (
        outer_inclusion_test(nd, t, "nonlinear", tau),
        outer_inclusion_test(nd, t, "linear", tau, N0=n0),
    )


@pytest.fixture(scope="module")
def outer_operator_runs(posdef_phantom):
    p, bg, N_D, setup = posdef_phantom
    t0 = time.perf_counter()
    supersets = [p.D_mask, rasterize_region(p.mesh, "disk(0.3,0,0.3)")]
    disjoint = rasterize_region(p.mesh, "disk(-0.3,0,0.2)")
    assert not (disjoint & p.D_mask).data.any()
    ops = lambda C: outer_test_matrices(p.A0, C, p.spec.bounds, p.mesh, p.basis, background=bg)
    return [ops(C) for C in supersets], ops(disjoint), setup + _elapsed(t0)


def test_criterion_6_outer_tests_both_directions(posdef_phantom, outer_operator_runs):
    p, bg, N_D, _ = posdef_phantom
    superset_tests, disjoint_tests, elapsed = outer_operator_runs
    t0 = time.perf_counter()
    N0 = bg.nd()
    passes = [v.passed for t in superset_tests for v in _outer_verdicts(N_D, N0, t, 32)]
    margins = np.array([[v.min_eig_margin for v in _outer_verdicts(N_D, N0, disjoint_tests, K)] for K in KS])
    decreasing = bool(np.all(np.diff(margins, axis=0) < 0))
    runtime = elapsed + _elapsed(t0)
    ok = all(passes) and decreasing and bool(np.all(margins[-1] < -1e-3)) and runtime <= 120
    record_criterion(
        6,
        ok,
        f"(a) {sum(passes)}/{len(passes)} pass at tau 1e-9; (b) margins over K {KS} "
        f"nonlinear {margins[:, 0].tolist()}, linear {margins[:, 1].tolist()}, {runtime:.1f}s",
    )
    assert ok


def _inner_margins(bg, N_D, B, bounds, variant):
    tests = inner_test_matrices(bg, B, bounds)
    N0 = bg.nd()
    out = []
    for K in KS:
        trunc = tuple(m.truncate(K) for m in tests)
        out.append(inner_inclusion_test(N_D.truncate(K), N0.truncate(K), trunc, variant, TAU))
    return out


def test_criterion_7_inner_tests_both_directions():
    h, K = 0.02, 32
    mesh, basis = disk_mesh(h), disk_basis(h, K)
    D = rasterize_region(mesh, "disk(0.3,0,0.2)")
    inside = rasterize_region(mesh, "disk(0.3,0,0.1)")
    outside = rasterize_region(mesh, "disk(-0.3,0,0.2)")
    bounds = ScalarBounds(1.0, 2.0, 1.0)
    cases = {
        "pos": (identity_field(mesh), identity_field(mesh).override(D, 2 * np.eye(2))),
        "neg": (identity_field(mesh, 2.0), identity_field(mesh, 2.0).override(D, np.eye(2))),
    }
    ok = True
    parts = []
    for variant, (A0, A_D) in cases.items():
        bg = Measurement(A0, mesh, basis)
        N_D = Measurement(A_D, mesh, basis).nd()
        passed = _inner_margins(bg, N_D, inside, bounds, variant)[-1].passed
        fails = [v.min_eig_margin for v in _inner_margins(bg, N_D, outside, bounds, variant)]
        good = passed and bool(np.all(np.diff(fails) < 0)) and fails[-1] < -1e-3
        ok &= good
        parts.append(f"{variant}: B in D passes {passed}, B outside margins {[f'{m:.7g}' for m in fails]}")
    record_criterion(7, ok, "; ".join(parts))
    assert ok


def test_criterion_12_noise_robust_verdicts(posdef_phantom, outer_operator_runs):
    p, bg, N_D, _ = posdef_phantom
    superset_tests, disjoint_tests, _ = outer_operator_runs
    N0 = bg.nd()
    delta = 1e-4
    tau = 2 * delta * N_D.norm
    clean = [[v.passed for v in _outer_verdicts(N_D, N0, t, 32)] for t in superset_tests + [disjoint_tests]]
    changed = 0
    for seed in range(20):
        noisy = add_noise(N_D, delta, seed)
        got = [[v.passed for v in _outer_verdicts(noisy, N0, t, 32, tau)] for t in superset_tests + [disjoint_tests]]
        changed += got != clean
    ok = changed == 0 and clean == [[True, True], [True, True], [False, False]]
    record_criterion(12, ok, f"verdicts changed in {changed}/20 seeds at delta 1e-4, tau {tau:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 8, 9: sweeps


def _cell_points(mesh, mask):
    return mesh.vertices[np.unique(mesh.triangles[mask.data])]


def _hull(points):
    return points[ConvexHull(points).vertices]


@pytest.fixture(scope="module")
def halfspace_sweep(posdef_phantom):
    p, bg, N_D, _ = posdef_phantom
    t0 = time.perf_counter()
    res = outer_reconstruction_sweep(N_D, p.A0, p.spec.bounds, p.mesh, p.basis, "halfspace", background=bg)
    return res, _elapsed(t0)


def test_criterion_8_outer_sweep_geometry(posdef_phantom, halfspace_sweep):
    p, bg, N_D, setup = posdef_phantom
    res, t_half = halfspace_sweep
    t0 = time.perf_counter()
    pix = outer_reconstruction_sweep(N_D, p.A0, p.spec.bounds, p.mesh, p.basis, "pixel_exclusion", background=bg)
    runtime = setup + t_half + _elapsed(t0)
    R = 1.0
    pixel = 2 * R / 32
    hull = _hull(_cell_points(p.mesh, p.D_mask))
    dist = support_hausdorff(res.polygon(R), hull)
    hits_ok = pix.pixel_hits.issubset(dilate_mask(p.mesh, p.D_mask, pixel))
    ok = dist <= 2 * pixel and hits_ok and runtime <= 180
    record_criterion(
        8,
        ok,
        f"Hausdorff {dist:.4f} (2 pixels = {2 * pixel:.4f}), {len(pix.pixel_hits)} pixel hits inside dilated D "
        f"{hits_ok}, {runtime:.1f}s",
    )
    assert ok


@pytest.mark.xfail(
    strict=True,
    reason="finite-K margins of cuts through the rim of D are below 1e-6, so those cuts pass and cut into D",
)
def test_halfspace_bound_contains_inclusion_at_tau_1e6(posdef_phantom):
    p, bg, N_D, _ = posdef_phantom
    res = outer_reconstruction_sweep(N_D, p.A0, p.spec.bounds, p.mesh, p.basis, "halfspace", tau=1e-6, background=bg)
    assert p.D_mask.issubset(res.upper_bound)


def _within_one_cell(mask, target, mesh, spacing):
    return target.issubset(dilate_mask(mesh, mask, spacing)) and mask.issubset(dilate_mask(mesh, target, spacing))


def test_criterion_9_inner_sweep_geometry(posdef_phantom):
    p, bg, N_D, _ = posdef_phantom
    grid = 24
    spacing = 2.0 / grid
    # the inner test weight is c (alpha/beta)^2; use the tight bounds of A0 = I, A_D = 2I
    tight = ScalarBounds(1.0, 2.0, 1.0)
    mask, _ = inner_reconstruction_sweep(N_D, p.A0, tight, p.mesh, p.basis, "pos", grid, background=bg)
    disk_ok = _within_one_cell(mask, p.D_mask, p.mesh, spacing)
    ring = build_phantom(load_spec(SCENARIOS / "annulus.ini"))
    ring_bg = Measurement(ring.A0, ring.mesh, ring.basis)
    ring_N = Measurement(ring.A_D, ring.mesh, ring.basis).nd()
    ring_mask, _ = inner_reconstruction_sweep(
        ring_N, ring.A0, ring.spec.bounds, ring.mesh, ring.basis, "pos", grid, background=ring_bg
    )
    closure = outer_shape_closure(ring.D_mask, ring.mesh)
    ring_ok = not ring_mask.is_empty() and ring_mask.issubset(dilate_mask(ring.mesh, closure, spacing))
    ok = disk_ok and ring_ok
    record_criterion(
        9,
        ok,
        f"disk within one grid cell ({spacing:.4f}) {disk_ok}; annulus result ({len(ring_mask)} cells) "
        f"inside closure {ring_ok}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 10: push-forward twin


@pytest.fixture(scope="module")
def twin_runs():
    spec = load_spec(SCENARIOS / "twin_demo.ini")
    phi = RadialShear.cubic(0.3)
    out = {}
    for h in (0.02, 0.01):
        p = build_phantom(replace(spec, h=h))
        tw = pushforward_twin(p, phi)
        N_D = Measurement(p.A_D, p.mesh, p.basis).nd()
        N_T = Measurement(tw.A_twin, p.mesh, p.basis).nd()
        out[h] = (p, N_D, N_T)
    return out


def test_criterion_10_twin_nd_agreement(twin_runs):
    mism = {h: np.linalg.norm(N_T.entries - N_D.entries) / np.linalg.norm(N_D.entries) for h, (_, N_D, N_T) in twin_runs.items()}
    ratio = mism[0.02] / mism[0.01]
    ok = mism[0.02] <= 0.02 and ratio >= 1.6
    record_criterion(10, ok, f"ND mismatch {mism[0.02]:.2e} (h=0.02), {mism[0.01]:.2e} (h=0.01), ratio {ratio:.2f}")
    assert ok


@pytest.mark.xfail(
    strict=True,
    reason="centroid push-forward leaves a 1e-3 relative ND mismatch, far above tau; "
    "the cut offsets respond to it and the two bounds separate by several pixels",
)
def test_criterion_10_twin_upper_bounds(twin_runs):
    p, N_D, N_T = twin_runs[0.02]
    bg = Measurement(p.A0, p.mesh, p.basis)
    args = (p.A0, p.spec.bounds, p.mesh, p.basis, "halfspace")
    r1 = outer_reconstruction_sweep(N_D, *args, background=bg)
    r2 = outer_reconstruction_sweep(N_T, *args, background=bg)
    dist = support_hausdorff(r1.polygon(1.0), r2.polygon(1.0))
    pixel = 2.0 / 32
    ok = dist <= pixel
    record_criterion(10, ok, f"(upper bounds) phantom vs twin Hausdorff {dist:.4f}, 1 pixel = {pixel:.4f}")
    assert ok


# ---------------------------------------------------------------------------
# 11: localized potentials


def test_criterion_11_localized_potentials():
    from mono_eit.phantoms import read_config

    cp = read_config(SCENARIOS / "half_disk_locpot.ini")
    spec = load_spec(SCENARIOS / "half_disk_locpot.ini")
    p = build_phantom(spec)
    sec = cp["locpot"]
    B = rasterize_region(p.mesh, sec["b"])
    U = rasterize_region(p.mesh, sec["u"])
    A2 = p.A0.override(rasterize_region(p.mesh, sec["a2_region"]), p.A0.values[0] + np.eye(2))
    pair = energy_form_pair(p.A0, B, U, p.basis, p.mesh)
    lam = [localization_spectrum(pair.truncate(K), 1)[0][0] for K in KS]
    increasing = bool(np.all(np.diff(lam) > 0))
    rep = simultaneous_localization_check(p.A0, A2, B, U, p.basis, p.mesh, 3, list(KS))
    ok = increasing and lam[-1] / lam[0] >= 5 and rep.passed
    record_criterion(
        11,
        ok,
        f"lambda1 {[f'{x:.4g}' for x in lam]}, growth {lam[-1] / lam[0]:.1f}, "
        f"A2 ratios {[f'{x:.4g}' for x in rep.ratios_A2[:, 0]]}, simultaneous {rep.passed}",
    )
    assert ok
