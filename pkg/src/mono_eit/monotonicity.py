"""Loewner-order inclusion tests and reconstruction sweeps."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import eigh

from .coefficients import MatrixField, ScalarBounds
from .fem import NumericalError, cell_energy_form
from .mesh import Mesh, RegionMask
from .nd import BasisMismatch, Measurement, NdMatrix, check_linearized_bounds

DEFAULT_REL_TAU = 1e-9


@dataclass(frozen=True, eq=False)
class TestVerdict:
    """Outcome of one semidefiniteness test.

    ``witness`` holds basis coefficients ``c`` of the current ``f`` with the
    most negative quadratic form ``<f, M f> = min_eig_margin`` (unit norm).
    """

    __test__ = False  # not a pytest class

    passed: bool
    min_eig_margin: float
    tau: float
    witness: np.ndarray | None = None
    sides: dict = field(default_factory=dict)


def _hermitian(M) -> np.ndarray:
    e = M.entries if isinstance(M, NdMatrix) else np.asarray(M)
    scale = max(float(np.abs(e).max(initial=0.0)), 1e-300)
    asym = float(np.abs(e - e.conj().T).max(initial=0.0))
    if asym > 1e-8 * scale * max(1, len(e)):
        raise NumericalError(f"matrix is not Hermitian (asymmetry {asym:.3g})")
    return 0.5 * (e + e.conj().T)


def psd_margin(M, return_vector: bool = False):
    """Smallest eigenvalue of the Hermitian part of ``M``."""
    h = _hermitian(M)
    if len(h) == 0:
        return (0.0, None) if return_vector else 0.0
    try:
        w, v = eigh(h, subset_by_index=[0, 0])
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolver failed: {exc}") from None
    if return_vector:
        return float(w[0]), np.conj(v[:, 0])
    return float(w[0])


def default_tau(N_D: NdMatrix, noise_level: float = 0.0) -> float:
    """``1e-9 ||N_D||`` for clean data, ``2 delta ||N_D||`` for noise level ``delta``."""
    if noise_level > 0:
        return 2 * noise_level * N_D.norm
    return DEFAULT_REL_TAU * N_D.norm


def _verdict(sides: dict[str, np.ndarray], tau: float) -> TestVerdict:
    margins = {}
    worst, witness = math.inf, None
    for name, mat in sides.items():
        m, v = psd_margin(mat, return_vector=True)
        margins[name] = m
        if m < worst:
            worst, witness = m, v
    return TestVerdict(worst >= -tau, worst, tau, witness, margins)


def _check(*mats):
    ref = mats[0]
    for m in mats[1:]:
        if m is None:
            continue
        if m.K != ref.K or (ref.basis_id and m.basis_id and ref.basis_id != m.basis_id):
            raise BasisMismatch("test matrices refer to different measurement bases")


OUTER_VARIANTS = ("nonlinear", "linear", "plus_only", "minus_only")


def outer_inclusion_test(
    N_D: NdMatrix,
    tests,
    variant: str = "linear",
    tau: float | None = None,
    N0: NdMatrix | None = None,
    linearized: bool | None = None,
) -> TestVerdict:
    """Check ``L_minus >= N_D >= L_plus`` (nonlinear) or
    ``DL_minus >= N_D - N0 >= DL_plus`` (linear) up to tolerance ``tau``.

    ``plus_only``/``minus_only`` check a single side; they use the linearized
    operators when ``N0`` is supplied (or ``linearized`` is set).
    """
    if variant not in OUTER_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    tau = default_tau(N_D) if tau is None else tau
    if linearized is None:
        linearized = variant == "linear" or (variant != "nonlinear" and N0 is not None)
    if linearized:
        if N0 is None:
            raise ValueError("linearized test needs the background ND matrix N0")
        _check(N_D, N0, tests.DL_minus, tests.DL_plus)
        data = N_D.entries - N0.entries
        minus = tests.DL_minus.entries - data
        plus = data - tests.DL_plus.entries
    else:
        if tests.L_minus is None or tests.L_plus is None:
            raise ValueError("nonlinear test needs L_minus and L_plus")
        _check(N_D, tests.L_minus, tests.L_plus)
        minus = tests.L_minus.entries - N_D.entries
        plus = N_D.entries - tests.L_plus.entries
    sides = {}
    if variant != "plus_only":
        sides["minus"] = minus
    if variant != "minus_only":
        sides["plus"] = plus
    return _verdict(sides, tau)


def inner_inclusion_test(
    N_D: NdMatrix,
    N0: NdMatrix,
    tests: tuple[NdMatrix, NdMatrix],
    variant: str = "pos",
    tau: float | None = None,
) -> TestVerdict:
    """``pos``: ``DLhat_plus >= N_D - N0``; ``neg``: ``N_D - N0 >= DLhat_minus``."""
    dl_plus, dl_minus = tests
    _check(N_D, N0, dl_plus, dl_minus)
    tau = default_tau(N_D) if tau is None else tau
    data = N_D.entries - N0.entries
    if variant == "pos":
        return _verdict({"pos": dl_plus.entries - data}, tau)
    if variant == "neg":
        return _verdict({"neg": data - dl_minus.entries}, tau)
    raise ValueError(f"unknown inner variant {variant!r}")


# ---------------------------------------------------------------------------
# sweeps


@dataclass(eq=False)
class ReconstructionResult:
    pixel_hits: RegionMask
    upper_bound: RegionMask
    metadata: dict
    cuts: list = field(default_factory=list)  # (direction, offset) pairs
    pixel_grid: np.ndarray | None = None  # (ny, nx) bool, True = hit
    margins: list = field(default_factory=list)  # (set_id, margin, tau, passed)

    def polygon(self, radius: float) -> np.ndarray:
        return halfspace_polygon([c[0] for c in self.cuts], [c[1] for c in self.cuts], radius)


class LinearizedTester:
    """Evaluates linearized outer/inner tests from one background solve."""

    def __init__(self, background: Measurement, N_D: NdMatrix, bounds: ScalarBounds):
        self.background = background
        self.mesh = background.mesh
        self.bounds = bounds
        self.N_D = N_D
        self.N0 = background.nd()
        _check(N_D, self.N0)
        self.data = N_D.entries - self.N0.entries
        a0 = background.A.values
        eye = np.eye(2)
        b = bounds
        # Frechet form is -int B^* ...; fold the sign in here
        self._plus_field = -np.conj(np.swapaxes(b.beta * eye - a0, 1, 2))
        self._minus_field = -np.conj(np.swapaxes(a0 - (b.beta**2 / b.alpha) * eye, 1, 2))
        self._full = None

    def _form(self, field_values, cells) -> np.ndarray:
        sol = self.background.solutions
        g = sol.gradients[cells]
        return cell_energy_form(field_values[cells], g, g, self.mesh.cell_areas[cells])

    def outer_matrices(self, cells) -> tuple[np.ndarray, np.ndarray]:
        return self._form(self._minus_field, cells), self._form(self._plus_field, cells)

    def full(self):
        if self._full is None:
            self._full = self.outer_matrices(np.arange(self.mesh.n_cells))
        return self._full

    def outer_test(self, cells, variant: str, tau: float, complement: bool = False) -> TestVerdict:
        dm, dp = self.outer_matrices(cells)
        if complement:
            fm, fp = self.full()
            dm, dp = fm - dm, fp - dp
        sides = {}
        if variant != "plus_only":
            sides["minus"] = dm - self.data
        if variant != "minus_only":
            sides["plus"] = self.data - dp
        return _verdict(sides, tau)


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _domain_radius(mesh: Mesh) -> float:
    return float(np.hypot(*mesh.vertices.T).max())


def outer_reconstruction_sweep(
    N_D: NdMatrix,
    A0: MatrixField,
    bounds: ScalarBounds,
    mesh: Mesh,
    basis,
    family: str = "halfspace",
    tau: float | None = None,
    variant: str = "linear",
    n_directions: int = 40,
    resolution: float | None = None,
    grid: int = 32,
    background: Measurement | None = None,
    workers: int = 1,
) -> ReconstructionResult:
    """Outer reconstruction by half-space cuts or pixel exclusion.

    ``halfspace``: for each direction, bisect for the smallest offset ``s``
    whose test set ``{x . w <= s}`` passes; the upper bound is the
    intersection of the passing cuts. ``pixel_exclusion``: each grid pixel
    whose complement fails the test is certified to meet the inclusion.
    ``variant`` is ``linear``, ``plus_only`` or ``minus_only`` (linearized
    operators, one background factorization) or ``nonlinear`` (two
    factorizations per test set).
    """
    if family not in ("halfspace", "pixel_exclusion"):
        raise ValueError(f"unknown sweep family {family!r}")
    if variant not in OUTER_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if n_directions < 1 or grid < 1:
        raise ValueError("n_directions and grid must be positive")
    check_linearized_bounds(A0, bounds)
    tau = default_tau(N_D) if tau is None else tau
    background = background or Measurement(A0, mesh, basis)
    tester = LinearizedTester(background, N_D, bounds)
    R = _domain_radius(mesh)
    resolution = 1e-3 * R if resolution is None else resolution
    cent = mesh.cell_centroids
    all_cells = np.ones(mesh.n_cells, dtype=bool)

    def run(cells_mask: np.ndarray, complement: bool = False) -> TestVerdict:
        if variant == "nonlinear":
            from .nd import outer_test_matrices

            C = RegionMask(~cells_mask if complement else cells_mask, mesh.mesh_id)
            tests = outer_test_matrices(A0, C, bounds, mesh, basis, background=background)
            return outer_inclusion_test(N_D, tests, "nonlinear", tau)
        return tester.outer_test(np.flatnonzero(cells_mask), variant, tau, complement)

    meta = {"family": family, "variant": variant, "tau": tau, "K": N_D.K}
    margins = []
    if family == "halfspace":

        def search(l):
            angle = 2 * math.pi * l / n_directions
            w = np.array([math.cos(angle), math.sin(angle)])
            proj = cent @ w
            lo, hi = -R, R
            low_v = run(proj <= lo)
            if low_v.passed:
                return w, lo, low_v.min_eig_margin
            high_v = run(proj <= hi)
            if not high_v.passed:
                return w, hi, high_v.min_eig_margin
            m_hi = high_v.min_eig_margin
            while hi - lo > resolution:
                mid = 0.5 * (lo + hi)
                v = run(proj <= mid)
                if v.passed:
                    hi, m_hi = mid, v.min_eig_margin
                else:
                    lo = mid
            return w, hi, m_hi

        cuts = _map(search, range(n_directions), workers)
        upper = all_cells.copy()
        for l, (w, s, m) in enumerate(cuts):
            upper &= cent @ w <= s
            margins.append((f"cut{l}", m, tau, True))
        meta.update(n_directions=n_directions, resolution=resolution)
        return ReconstructionResult(
            RegionMask(np.zeros(mesh.n_cells, dtype=bool), mesh.mesh_id),
            RegionMask(upper, mesh.mesh_id),
            meta,
            cuts=[(tuple(float(x) for x in w), float(s)) for w, s, _ in cuts],
            margins=margins,
        )

    edges = np.linspace(-R, R, grid + 1)
    ix = np.clip(np.searchsorted(edges, cent[:, 0], side="right") - 1, 0, grid - 1)
    iy = np.clip(np.searchsorted(edges, cent[:, 1], side="right") - 1, 0, grid - 1)
    pixel_of = iy * grid + ix
    occupied = np.unique(pixel_of)

    def test_pixel(p):
        return run(pixel_of == p, complement=True)

    verdicts = _map(test_pixel, occupied, workers)
    hits_grid = np.zeros(grid * grid, dtype=bool)
    hits = np.zeros(mesh.n_cells, dtype=bool)
    for p, v in zip(occupied, verdicts):
        margins.append((f"pixel{p // grid}_{p % grid}", v.min_eig_margin, tau, v.passed))
        if not v.passed:
            hits_grid[p] = True
            hits |= pixel_of == p
    meta.update(grid=grid, pixel_size=2 * R / grid)
    return ReconstructionResult(
        RegionMask(hits, mesh.mesh_id),
        RegionMask(all_cells, mesh.mesh_id),
        meta,
        pixel_grid=hits_grid.reshape(grid, grid),
        margins=margins,
    )


def ball_grid(mesh: Mesh, grid: int, radius_factor: float = math.sqrt(0.5)):
    """Ball centres on a ``grid x grid`` lattice over the bounding box, with
    radius ``radius_factor * spacing``; yields ``(centre, cell indices)``."""
    R = _domain_radius(mesh)
    spacing = 2 * R / grid
    centres = -R + spacing * (np.arange(grid) + 0.5)
    rad = radius_factor * spacing
    cent = mesh.cell_centroids
    out = []
    for y in centres:
        for x in centres:
            if math.hypot(x, y) >= R:
                continue
            d2 = (cent[:, 0] - x) ** 2 + (cent[:, 1] - y) ** 2
            cells = np.flatnonzero(d2 <= rad**2)
            if len(cells):
                out.append(((x, y), cells))
    return out, spacing


def inner_reconstruction_sweep(
    N_D: NdMatrix,
    A0: MatrixField,
    bounds: ScalarBounds,
    mesh: Mesh,
    basis,
    variant: str = "pos",
    grid: int = 24,
    tau: float | None = None,
    radius_factor: float = math.sqrt(0.5),
    background: Measurement | None = None,
    workers: int = 1,
) -> tuple[RegionMask, list]:
    """Union of grid balls whose inner test passes, plus per-ball margins."""
    if variant not in ("pos", "neg"):
        raise ValueError(f"unknown inner variant {variant!r}")
    if bounds.c <= 0:
        raise ValueError("inner sweep needs c > 0")
    tau = default_tau(N_D) if tau is None else tau
    background = background or Measurement(A0, mesh, basis)
    N0 = background.nd()
    _check(N_D, N0)
    data = N_D.entries - N0.entries
    sol = background.solutions
    if variant == "pos":
        weight = -bounds.c * (bounds.alpha / bounds.beta) ** 2
    else:
        weight = bounds.c  # Frechet form of -c chi_B I
    balls, _ = ball_grid(mesh, grid, radius_factor)
    eye = np.broadcast_to(np.eye(2), (mesh.n_cells, 2, 2))

    def test_ball(item):
        _, cells = item
        g = sol.gradients[cells]
        dl = weight * cell_energy_form(eye[cells], g, g, mesh.cell_areas[cells])
        mat = dl - data if variant == "pos" else data - dl
        return _verdict({variant: mat}, tau)

    verdicts = _map(test_ball, balls, workers)
    result = np.zeros(mesh.n_cells, dtype=bool)
    margins = []
    for k, ((centre, cells), v) in enumerate(zip(balls, verdicts)):
        margins.append((f"ball{k}@{centre[0]:.4f},{centre[1]:.4f}", v.min_eig_margin, tau, v.passed))
        if v.passed:
            result[cells] = True
    return RegionMask(result, mesh.mesh_id), margins


# ---------------------------------------------------------------------------
# geometry of half-space bounds


def halfspace_polygon(directions, offsets, radius: float, n_circle: int = 720) -> np.ndarray:
    """Vertices of ``disk(radius) ∩ {x . w_l <= s_l}`` (Sutherland-Hodgman clip)."""
    t = 2 * math.pi * np.arange(n_circle) / n_circle
    poly = radius * np.column_stack([np.cos(t), np.sin(t)])
    for w, s in zip(directions, offsets):
        w = np.asarray(w, dtype=float)
        if len(poly) == 0:
            break
        d = poly @ w - s
        out = []
        for i in range(len(poly)):
            p, q = poly[i], poly[(i + 1) % len(poly)]
            dp, dq = d[i], d[(i + 1) % len(poly)]
            if dp <= 0:
                out.append(p)
            if (dp <= 0) != (dq <= 0):
                out.append(p + (q - p) * dp / (dp - dq))
        poly = np.asarray(out).reshape(-1, 2)
    return poly


def support_hausdorff(a: np.ndarray, b: np.ndarray, n_dirs: int = 3600) -> float:
    """Hausdorff distance between the convex hulls of two point sets
    (``inf`` when exactly one of them is empty)."""
    a, b = np.asarray(a).reshape(-1, 2), np.asarray(b).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        return 0.0 if len(a) == len(b) else math.inf
    t = 2 * math.pi * np.arange(n_dirs) / n_dirs
    w = np.column_stack([np.cos(t), np.sin(t)])
    return float(np.abs((a @ w.T).max(axis=0) - (b @ w.T).max(axis=0)).max())


# ---------------------------------------------------------------------------
# export


def save_mask_grid(grid: np.ndarray, path) -> None:
    ny, nx = grid.shape
    lines = [f"mask v1 {nx} {ny}"] + [" ".join(str(int(v)) for v in row) for row in grid]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mask_grid(path) -> np.ndarray:
    rows = Path(path).read_text().split("\n")
    head = rows[0].split()
    if head[:2] != ["mask", "v1"]:
        raise ValueError(f"{path}: not a 'mask v1' file")
    nx, ny = int(head[2]), int(head[3])
    return np.array([r.split() for r in rows[1 : 1 + ny]], dtype=int).astype(bool).reshape(ny, nx)


def cell_mask_to_grid(mesh: Mesh, mask: RegionMask, grid: int) -> np.ndarray:
    """Rasterize a cell mask onto a ``grid x grid`` image of the bounding box
    (a pixel is set when any cell centroid inside it is in the mask)."""
    R = _domain_radius(mesh)
    edges = np.linspace(-R, R, grid + 1)
    cent = mesh.cell_centroids[mask.data]
    ix = np.clip(np.searchsorted(edges, cent[:, 0], side="right") - 1, 0, grid - 1)
    iy = np.clip(np.searchsorted(edges, cent[:, 1], side="right") - 1, 0, grid - 1)
    out = np.zeros((grid, grid), dtype=bool)
    out[iy, ix] = True
    return out


def save_margins_csv(margins, path) -> None:
    lines = ["set_id,margin,tau,passed"]
    lines += [f"{sid},{m!r},{t!r},{int(bool(p))}" for sid, m, t, p in margins]
    Path(path).write_text("\n".join(lines) + "\n")
