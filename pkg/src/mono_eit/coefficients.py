"""Matrix-valued conductivity coefficients, piecewise constant per cell."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from numpy.polynomial import Polynomial

from .mesh import Mesh, MeshError, RegionMask, locate_points

SA_TOL = 1e-14


class CoefficientError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MatrixField:
    """Per-cell 2x2 complex matrices ``values[c]`` on the mesh ``mesh_id``."""

    values: np.ndarray
    mesh_id: str = ""
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or v.shape[1:] != (2, 2):
            raise CoefficientError(f"field values must have shape (nt, 2, 2), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise CoefficientError("field has non-finite entries")
        object.__setattr__(self, "values", v.astype(complex, copy=False))

    @classmethod
    def constant(cls, mesh: Mesh, matrix, label: str = "") -> "MatrixField":
        m = np.asarray(matrix, dtype=complex)
        if m.ndim == 0:
            m = m * np.eye(2)
        return cls(np.broadcast_to(m, (mesh.n_cells, 2, 2)).copy(), mesh.mesh_id, label)

    @classmethod
    def scalar(cls, mesh: Mesh, values, label: str = "") -> "MatrixField":
        s = np.broadcast_to(np.asarray(values, dtype=complex), (mesh.n_cells,))
        return cls(s[:, None, None] * np.eye(2), mesh.mesh_id, label)

    @property
    def n_cells(self) -> int:
        return len(self.values)

    @property
    def real_part(self) -> np.ndarray:
        """Hermitian part ``(A + A^*)/2`` per cell."""
        return 0.5 * (self.values + _adj(self.values))

    @property
    def imag_part(self) -> np.ndarray:
        """``(A - A^*)/(2i)`` per cell, Hermitian."""
        return (self.values - _adj(self.values)) / 2j

    @property
    def norm(self) -> float:
        """``max_x ||A(x)||_2``."""
        return float(np.linalg.norm(self.values, ord=2, axis=(1, 2)).max(initial=0.0))

    @property
    def self_adjoint(self) -> bool:
        asym = np.abs(self.values - _adj(self.values)).max(initial=0.0)
        return bool(asym <= SA_TOL * max(self.norm, 1e-300))

    @property
    def is_real(self) -> bool:
        return not np.any(self.values.imag)

    def adjoint(self) -> "MatrixField":
        return MatrixField(_adj(self.values), self.mesh_id, self.label)

    def check(self, mesh: Mesh) -> None:
        if self.mesh_id and self.mesh_id != mesh.mesh_id:
            raise MeshError("field belongs to a different mesh")
        if self.n_cells != mesh.n_cells:
            raise MeshError("field size does not match mesh")

    def _wrap(self, values, label=""):
        return MatrixField(values, self.mesh_id, label)

    def __add__(self, other):
        return self._wrap(self.values + _vals(other))

    def __sub__(self, other):
        return self._wrap(self.values - _vals(other))

    def __rsub__(self, other):
        return self._wrap(_vals(other) - self.values)

    def __mul__(self, scalar):
        return self._wrap(self.values * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self._wrap(-self.values)

    def restrict(self, mask: RegionMask) -> "MatrixField":
        """Zero the field outside ``mask``."""
        return self._wrap(np.where(mask.data[:, None, None], self.values, 0))

    def override(self, mask: RegionMask, other) -> "MatrixField":
        """``other`` on the cells of ``mask``, this field elsewhere."""
        return self._wrap(np.where(mask.data[:, None, None], _vals(other), self.values))


def _vals(x):
    return x.values if isinstance(x, MatrixField) else np.asarray(x)


def _adj(v: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(v, -1, -2))


def eigvalsh2(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form eigenvalues ``(low, high)`` of Hermitian 2x2 matrices."""
    a = h[..., 0, 0].real
    d = h[..., 1, 1].real
    b = h[..., 0, 1]
    mean = 0.5 * (a + d)
    rad = np.hypot(0.5 * (a - d), np.abs(b))
    return mean - rad, mean + rad


def hermitian_split(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return 0.5 * (v + _adj(v)), (v - _adj(v)) / 2j


def spectral_norm2(m: np.ndarray) -> np.ndarray:
    """Largest singular value of each 2x2 matrix, in closed form."""
    fro2 = np.sum(np.abs(m) ** 2, axis=(-2, -1))
    det = np.abs(m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0])
    disc = np.sqrt(np.maximum(fro2**2 - 4 * det**2, 0.0))
    return np.sqrt(0.5 * (fro2 + disc))


class ValidationReport(NamedTuple):
    in_H: bool
    in_HSA: bool  # in_H and self-adjoint
    min_real_eig: float
    self_adjoint: bool  # Hermitian per cell, regardless of c


def validate_coefficient(A: MatrixField, c: float) -> ValidationReport:
    """Check ``Re A >= c I`` cellwise and whether ``A`` is self-adjoint."""
    low, _ = eigvalsh2(A.real_part)
    min_eig = float(low.min())
    in_h = min_eig >= c
    imag = float(spectral_norm2(A.imag_part).max(initial=0.0))
    sa = imag <= SA_TOL * A.norm
    return ValidationReport(bool(in_h), bool(in_h and sa), min_eig, bool(sa))


def _require_hermitian(A: MatrixField, name: str):
    if not A.self_adjoint:
        raise CoefficientError(f"{name} must be self-adjoint")


def loewner_gap(A1: MatrixField, A2: MatrixField, V: RegionMask) -> float:
    """Smallest eigenvalue of ``A2 - A1`` over the cells of ``V``."""
    _require_hermitian(A1, "A1")
    _require_hermitian(A2, "A2")
    if V.is_empty():
        raise CoefficientError("empty region")
    diff = (A2.values - A1.values)[V.data]
    low, _ = eigvalsh2(0.5 * (diff + _adj(diff)))
    return float(low.min())


@dataclass(frozen=True)
class ScalarBounds:
    alpha: float
    beta: float
    c: float = 0.0

    def __post_init__(self):
        if not 0 < self.alpha < self.beta:
            raise CoefficientError(f"need 0 < alpha < beta, got {self.alpha}, {self.beta}")
        if self.c < 0:
            raise CoefficientError(f"c must be nonnegative, got {self.c}")


class ProductBoundReport(NamedTuple):
    claim_i_holds: bool
    claim_ii_holds: bool
    margins: dict


def product_matrix(a1: np.ndarray, a2: np.ndarray) -> np.ndarray:
    """Symmetrized ``A2 A1^{-1} (A2 - A1)`` per cell."""
    m = a2 @ np.linalg.solve(a1, a2 - a1)
    return 0.5 * (m + _adj(m))


def product_bound_check(
    A1: MatrixField, A2: MatrixField, V: RegionMask, bounds: ScalarBounds, tol: float = 1e-12
) -> ProductBoundReport:
    """Check both sign-transfer claims for ``A2 A1^{-1}(A2 - A1)`` on ``V``.

    Claim (i): ``A2 - A1 >= c`` implies the product is ``>= c``.
    Claim (ii): ``A2 - A1 <= -c`` implies the product is ``<= -c (alpha/beta)^2``.
    A claim whose hypothesis does not hold is reported as holding (vacuous).
    """
    _require_hermitian(A1, "A1")
    _require_hermitian(A2, "A2")
    if V.is_empty():
        raise CoefficientError("empty region")
    a1 = A1.values[V.data]
    a2 = A2.values[V.data]
    lo1, hi1 = eigvalsh2(a1)
    lo2, _ = eigvalsh2(a2)
    if hi1.max() > bounds.beta * (1 + 1e-12):
        raise CoefficientError(f"A1 <= beta I violated (max eigenvalue {hi1.max():.6g})")
    if lo2.min() < bounds.alpha * (1 - 1e-12):
        raise CoefficientError(f"A2 >= alpha I violated (min eigenvalue {lo2.min():.6g})")
    cond = hi1 / lo1
    if np.any(lo1 <= 0) or cond.max() > 1e14:
        raise CoefficientError("A1 is singular in some cell")

    m = product_matrix(a1, a2)
    mlo, mhi = eigvalsh2(m)
    gap_up = loewner_gap(A1, A2, V)
    gap_down = loewner_gap(A2, A1, V)
    c = bounds.c
    margins = {
        "gap": gap_up,
        "reverse_gap": gap_down,
        "min_eig": float(mlo.min()),
        "max_eig": float(mhi.max()),
    }
    claim_i = True
    if gap_up >= c:
        margins["claim_i"] = float(mlo.min()) - c
        claim_i = margins["claim_i"] >= -tol
    claim_ii = True
    if gap_down >= c:
        margins["claim_ii"] = -c * (bounds.alpha / bounds.beta) ** 2 - float(mhi.max())
        claim_ii = margins["claim_ii"] >= -tol
    return ProductBoundReport(bool(claim_i), bool(claim_ii), margins)


def make_test_coefficient(
    A0: MatrixField, C: RegionMask, side: str, bounds: ScalarBounds
) -> MatrixField:
    """``alpha I`` (side ``minus``) or ``beta I`` (side ``plus``) on ``C``, ``A0`` elsewhere."""
    _require_hermitian(A0, "A0")
    if side == "minus":
        value = bounds.alpha
    elif side == "plus":
        value = bounds.beta
    else:
        raise CoefficientError(f"side must be 'minus' or 'plus', got {side!r}")
    out = np.where(C.data[:, None, None], value * np.eye(2), A0.values)
    return MatrixField(out, A0.mesh_id, f"test_{side}")


# ---------------------------------------------------------------------------
# push-forward by boundary-fixing diffeomorphisms


class RadialShear:
    """``Phi(x) = R g(|x|/R) x/|x|`` with a polynomial profile ``g``.

    ``g(0) = 0``, ``g(1) = 1`` and ``g' > 0`` on ``[0, 1]`` are enforced, so
    ``Phi`` is a bijection of the disk of radius ``R`` fixing its boundary.
    """

    def __init__(self, profile, radius: float = 1.0):
        g = profile if isinstance(profile, Polynomial) else Polynomial(profile)
        # negligible top coefficients would wreck the companion-matrix roots
        g = g.trim(1e-15 * max(np.abs(g.coef).max(), 1.0))
        if abs(g(0.0)) > 1e-14 or abs(g(1.0) - 1.0) > 1e-14:
            raise CoefficientError("radial profile must satisfy g(0) = 0 and g(1) = 1")
        dg = g.deriv()
        probe = np.concatenate([[0.0, 1.0], np.linspace(0, 1, 201)])
        crit = dg.deriv().roots() if dg.degree() > 1 else np.array([])
        crit = crit[np.isreal(crit)].real if len(crit) else crit
        probe = np.concatenate([probe, crit[(crit >= 0) & (crit <= 1)]])
        if np.min(dg(probe)) <= 0:
            raise CoefficientError("radial profile is not strictly increasing on [0, 1]")
        self.g = g
        self.dg = dg
        self.radius = float(radius)

    @classmethod
    def cubic(cls, a: float, b: float = 0.0, radius: float = 1.0) -> "RadialShear":
        """``g(r) = r + r (1 - r) (a + b r)``."""
        r = Polynomial([0.0, 1.0])
        return cls(r + r * (1 - r) * (a + b * r), radius)

    @classmethod
    def identity(cls, radius: float = 1.0) -> "RadialShear":
        return cls(Polynomial([0.0, 1.0]), radius)

    def compose(self, inner: "RadialShear") -> "RadialShear":
        """The map ``self o inner``."""
        if inner.radius != self.radius:
            raise CoefficientError("cannot compose shears on different radii")
        return RadialShear(self.g(inner.g), self.radius)

    def _polar(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, 2)
        r = np.hypot(x[:, 0], x[:, 1])
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(r[:, None] > 0, x / r[:, None], 0.0)
        return r / self.radius, unit

    def __call__(self, x):
        rho, unit = self._polar(x)
        return self.radius * self.g(rho)[:, None] * unit

    def inverse(self, y):
        rho_y, unit = self._polar(y)
        lo = np.zeros_like(rho_y)
        hi = np.ones_like(rho_y)
        target = np.clip(rho_y, 0.0, 1.0)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            below = self.g(mid) < target
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        rho = 0.5 * (lo + hi)
        for _ in range(2):
            rho = rho - (self.g(rho) - target) / self.dg(rho)
        return self.radius * rho[:, None] * unit

    def jacobian(self, x):
        rho, unit = self._polar(x)
        gp = self.dg(rho)
        with np.errstate(invalid="ignore", divide="ignore"):
            tangential = np.where(rho > 0, self.g(rho) / np.where(rho > 0, rho, 1), self.dg(0.0))
        radial = np.einsum("ni,nj->nij", unit, unit)
        eye = np.broadcast_to(np.eye(2), radial.shape)
        zero = rho == 0
        radial[zero] = 0.5 * np.eye(2)  # direction-free at the origin
        return gp[:, None, None] * radial + tangential[:, None, None] * (eye - radial)

    def check_fixes_boundary(self, mesh: Mesh, tol: float = 1e-10) -> None:
        """Check ``Phi = id`` at boundary vertices and boundary arc midpoints."""
        v = mesh.vertices
        e = mesh.boundary_edges
        mid = 0.5 * (v[e[:, 0]] + v[e[:, 1]])
        mid = self.radius * mid / np.hypot(mid[:, 0], mid[:, 1])[:, None]
        pts = np.concatenate([v[e[:, 0]], mid])
        err = np.abs(self(pts) - pts).max()
        if err > tol * self.radius:
            raise CoefficientError(f"map does not fix the boundary (deviation {err:.3g})")


CoefficientFunction = Callable[[np.ndarray], np.ndarray]


def field_sampler(A: MatrixField, mesh: Mesh) -> CoefficientFunction:
    """Turn a per-cell field into a point function by cell lookup."""
    A.check(mesh)

    def sample(points):
        return A.values[locate_points(mesh, points)]

    return sample


def pushforward_function(A: CoefficientFunction, phi) -> CoefficientFunction:
    """``y -> [DPhi A DPhi^T / |det DPhi|](Phi^{-1}(y))``."""

    def pushed(y):
        x = phi.inverse(y)
        J = phi.jacobian(x)
        det = np.abs(np.linalg.det(J))
        if np.any(det < 1e-12):
            raise CoefficientError("push-forward map has a singular Jacobian")
        return J @ A(x) @ np.swapaxes(J, 1, 2) / det[:, None, None]

    return pushed


def pushforward_coefficient(A, phi, mesh: Mesh) -> MatrixField:
    """Push ``A`` forward by ``phi`` and sample the result at cell centroids.

    ``A`` is either a :class:`MatrixField` (looked up cellwise) or a callable
    mapping points ``(n, 2)`` to matrices ``(n, 2, 2)``.
    """
    phi.check_fixes_boundary(mesh)
    func = field_sampler(A, mesh) if isinstance(A, MatrixField) else A
    values = pushforward_function(func, phi)(mesh.cell_centroids)
    label = getattr(A, "label", "") + "_pushed" if isinstance(A, MatrixField) else "pushed"
    return MatrixField(values, mesh.mesh_id, label)


# ---------------------------------------------------------------------------
# text serialization


def save_field(A: MatrixField, path) -> None:
    v = A.values.reshape(-1, 4)
    rows = np.empty((len(v), 8))
    rows[:, 0::2] = v.real
    rows[:, 1::2] = v.imag
    lines = [f"field v1 {len(v)}"] + [" ".join(repr(float(x)) for x in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def load_field(path, mesh_id: str = "") -> MatrixField:
    rows = Path(path).read_text().split("\n")
    head = rows[0].split()
    if head[:2] != ["field", "v1"] or len(head) != 3:
        raise CoefficientError(f"{path}: not a 'field v1' file")
    n = int(head[2])
    data = np.array([r.split() for r in rows[1 : 1 + n]], dtype=float)
    values = (data[:, 0::2] + 1j * data[:, 1::2]).reshape(n, 2, 2)
    return MatrixField(values, mesh_id)


def pushforward_on_mapped_mesh(A: MatrixField, phi, mesh: Mesh) -> tuple[Mesh, MatrixField]:
    """Move the mesh vertices by ``phi`` and push ``A`` forward cellwise with
    the Jacobian of the piecewise-affine interpolant of ``phi``.

    P1 spaces are mapped onto each other exactly, so the discrete ND maps of
    ``(mesh, A)`` and the returned pair coincide up to rounding whenever
    ``phi`` fixes the boundary vertices.
    """
    from .mesh import mesh_from_arrays

    A.check(mesh)
    phi.check_fixes_boundary(mesh)
    moved = mesh_from_arrays(phi(mesh.vertices), mesh.triangles, mesh.gamma)

    def edges(m):
        p = m.vertices[m.triangles]
        return np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], -1)

    J = edges(moved) @ np.linalg.inv(edges(mesh))
    det = np.linalg.det(J)
    if np.any(det <= 0):
        raise CoefficientError("mapped mesh has inverted cells")
    values = J @ A.values @ np.swapaxes(J, 1, 2) / det[:, None, None]
    return moved, MatrixField(values, moved.mesh_id, A.label + "_pushed")
