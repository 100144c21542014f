"""Galerkin matrices of ND maps, Frechet derivatives and test operators.

Convention: ``entries[i, j] = <f_i, X f_j>`` with the L2(Gamma) inner product
antilinear in the second slot. For ``f = sum_k c_k f_k`` the quadratic form
``<f, X f>`` equals ``d^H X d`` with ``d = conj(c)``, so Loewner tests on
the matrix are Loewner tests of the compressed operator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coefficients import CoefficientError, MatrixField, ScalarBounds, make_test_coefficient
from .fem import ForwardSystem, NeumannBasis, SolutionSet, solve_basis
from .mesh import Mesh, RegionMask

KINDS = ("nd", "frechet", "test_minus", "test_plus", "inner_plus", "inner_minus", "difference")
BINARY_MAGIC = b"NDMATv1\0"


class BasisMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NdMatrix:
    entries: np.ndarray
    basis_id: str = ""
    label: str = ""
    kind: str = "nd"

    def __post_init__(self):
        e = np.asarray(self.entries)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValueError(f"NdMatrix entries must be square, got {e.shape}")
        object.__setattr__(self, "entries", e.astype(complex, copy=False))

    @property
    def K(self) -> int:
        return len(self.entries)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.entries, 2))

    def is_hermitian(self, rtol: float = 1e-10) -> bool:
        e = self.entries
        return bool(np.abs(e - e.conj().T).max(initial=0) <= rtol * max(self.norm, 1e-300))

    def quadratic_form(self, coeffs) -> complex:
        """``<f, X f>`` for ``f = sum_k c_k f_k``."""
        c = np.asarray(coeffs)
        return complex(c @ self.entries @ np.conj(c))

    def _same_basis(self, other: "NdMatrix"):
        if self.K != other.K or (self.basis_id and other.basis_id and self.basis_id != other.basis_id):
            raise BasisMismatch("matrices refer to different measurement bases")

    def __add__(self, other: "NdMatrix") -> "NdMatrix":
        self._same_basis(other)
        return NdMatrix(self.entries + other.entries, self.basis_id or other.basis_id, kind="difference")

    def __sub__(self, other: "NdMatrix") -> "NdMatrix":
        self._same_basis(other)
        return NdMatrix(self.entries - other.entries, self.basis_id or other.basis_id, kind="difference")

    def __neg__(self):
        return NdMatrix(-self.entries, self.basis_id, self.label, self.kind)

    def scaled(self, s: complex) -> "NdMatrix":
        return NdMatrix(s * self.entries, self.basis_id, self.label, self.kind)

    def truncate(self, K: int) -> "NdMatrix":
        return NdMatrix(self.entries[:K, :K], "", self.label, self.kind)


def hermitian_parts(N: NdMatrix) -> tuple[NdMatrix, NdMatrix]:
    """``(N_R, N_I)`` with ``N = N_R + i N_I``, both Hermitian."""
    e = N.entries
    return (
        NdMatrix(0.5 * (e + e.conj().T), N.basis_id, N.label + "_R", N.kind),
        NdMatrix((e - e.conj().T) / 2j, N.basis_id, N.label + "_I", N.kind),
    )


class Measurement:
    """Basis solutions for a coefficient, sharing one factorization.

    Every matrix built from the same ``Measurement`` (ND map, Frechet
    derivatives in any direction, linearized test operators) reuses the
    same ``K`` solves.
    """

    def __init__(self, A: MatrixField, mesh: Mesh, basis: NeumannBasis):
        self.A = A
        self.mesh = mesh
        self.basis = basis
        self.system = ForwardSystem(A, mesh)
        self.solutions: SolutionSet = solve_basis(self.system, basis)

    def nd(self) -> NdMatrix:
        E = self.solutions.energy_matrix(self.A)
        return NdMatrix(E, self.basis.basis_id, self.A.label, "nd")

    def frechet(self, B, support: RegionMask | None = None, kind: str = "frechet") -> NdMatrix:
        """``entries[i, j] = -int B^* grad u_i . conj(grad u_j)``.

        This is the derivative of ``<f_i, Lambda(A + tB) f_j>`` at ``t = 0``;
        its diagonal is the quadratic form ``-int B^* grad u . conj(grad u)``.
        """
        if not self.A.self_adjoint:
            raise CoefficientError("Frechet derivative requires a self-adjoint base coefficient")
        b = B.values if isinstance(B, MatrixField) else np.asarray(B)
        if b.ndim == 3:
            b_adj = np.conj(np.swapaxes(b, 1, 2))
        elif b.ndim == 2:
            b_adj = b.conj().T
        else:
            b_adj = np.conj(b)
        E = self.solutions.energy_matrix(b_adj, support)
        return NdMatrix(-E, self.basis.basis_id, getattr(B, "label", ""), kind)


def nd_matrix(A: MatrixField, mesh: Mesh, basis: NeumannBasis) -> NdMatrix:
    """``entries[i, j] = <f_i, Lambda(A) f_j> = int A grad u_i . conj(grad u_j)``."""
    return Measurement(A, mesh, basis).nd()


def frechet_matrix(
    A: MatrixField, B: MatrixField, mesh: Mesh, basis: NeumannBasis, support: RegionMask | None = None
) -> NdMatrix:
    """Frechet derivative of the ND map at ``A`` in direction ``B``."""
    return Measurement(A, mesh, basis).frechet(B, support)


@dataclass(frozen=True, eq=False)
class OuterTests:
    L_minus: NdMatrix | None
    L_plus: NdMatrix | None
    DL_minus: NdMatrix
    DL_plus: NdMatrix


def check_linearized_bounds(A0: MatrixField, bounds: ScalarBounds) -> None:
    from .coefficients import eigvalsh2

    lo, hi = eigvalsh2(A0.real_part)
    if lo.min() < bounds.alpha * (1 - 1e-12) or hi.max() > bounds.beta * (1 + 1e-12):
        raise CoefficientError(
            f"linearized tests need alpha <= A0 <= beta; A0 eigenvalues span "
            f"[{lo.min():.6g}, {hi.max():.6g}], bounds [{bounds.alpha}, {bounds.beta}]"
        )


def linearized_outer(
    background: Measurement, C: RegionMask, bounds: ScalarBounds
) -> tuple[NdMatrix, NdMatrix]:
    """``(DL_minus, DL_plus)`` for test set ``C`` from the background solutions."""
    a0 = background.A.values
    eye = np.eye(2)
    plus_dir = bounds.beta * eye - a0
    minus_dir = a0 - (bounds.beta**2 / bounds.alpha) * eye
    dl_plus = background.frechet(plus_dir, C, "test_plus")
    dl_minus = background.frechet(minus_dir, C, "test_minus")
    return dl_minus, dl_plus


def outer_test_matrices(
    A0: MatrixField,
    C: RegionMask,
    bounds: ScalarBounds,
    mesh: Mesh,
    basis: NeumannBasis,
    nonlinear: bool = True,
    background: Measurement | None = None,
) -> OuterTests:
    """Test operators for the outer inclusion test on ``C``.

    ``L_minus``/``L_plus`` are ND maps of the test coefficients (one new
    factorization each, skipped when ``nonlinear`` is false);
    ``DL_minus``/``DL_plus`` are Frechet derivatives at ``A0`` in directions
    ``(A0 - beta^2/alpha I) chi_C`` and ``(beta I - A0) chi_C``.
    """
    if not A0.self_adjoint:
        raise CoefficientError("A0 must be self-adjoint")
    check_linearized_bounds(A0, bounds)
    background = background or Measurement(A0, mesh, basis)
    dl_minus, dl_plus = linearized_outer(background, C, bounds)
    L_minus = L_plus = None
    if nonlinear:
        L_minus = nd_matrix(make_test_coefficient(A0, C, "minus", bounds), mesh, basis)
        L_plus = nd_matrix(make_test_coefficient(A0, C, "plus", bounds), mesh, basis)
        L_minus = NdMatrix(L_minus.entries, basis.basis_id, "L_minus", "test_minus")
        L_plus = NdMatrix(L_plus.entries, basis.basis_id, "L_plus", "test_plus")
    return OuterTests(L_minus, L_plus, dl_minus, dl_plus)


def inner_test_matrices(
    background: Measurement, B: RegionMask, bounds: ScalarBounds
) -> tuple[NdMatrix, NdMatrix]:
    """``(DLhat_plus, DLhat_minus)`` for ball ``B``.

    Directions are ``c (alpha/beta)^2 chi_B I`` and ``-c chi_B I``.
    """
    if bounds.c <= 0:
        raise CoefficientError("inner tests need a definiteness constant c > 0")
    plus = background.frechet(bounds.c * (bounds.alpha / bounds.beta) ** 2, B, "inner_plus")
    minus = background.frechet(-bounds.c, B, "inner_minus")
    return plus, minus


# ---------------------------------------------------------------------------
# export


def save_ndmatrix(N: NdMatrix, path) -> None:
    e = N.entries
    lines = [f"ndmat v1 {N.K}"]
    for row in e:
        inter = np.empty(2 * len(row))
        inter[0::2] = row.real
        inter[1::2] = row.imag
        lines.append(" ".join(repr(float(x)) for x in inter))
    Path(path).write_text("\n".join(lines) + "\n")


def load_ndmatrix(path) -> NdMatrix:
    rows = Path(path).read_text().split("\n")
    head = rows[0].split()
    if head[:2] != ["ndmat", "v1"] or len(head) != 3:
        raise ValueError(f"{path}: not an 'ndmat v1' file")
    K = int(head[2])
    data = np.array([r.split() for r in rows[1 : 1 + K]], dtype=float)
    return NdMatrix(data[:, 0::2] + 1j * data[:, 1::2])


def save_ndmatrix_binary(N: NdMatrix, path) -> None:
    """16-byte header (8-byte magic, little-endian uint64 K) then Re/Im pairs row-major."""
    body = np.empty((N.K, N.K, 2), dtype="<f8")
    body[..., 0] = N.entries.real
    body[..., 1] = N.entries.imag
    Path(path).write_bytes(BINARY_MAGIC + struct.pack("<Q", N.K) + body.tobytes())


def load_ndmatrix_binary(path) -> NdMatrix:
    raw = Path(path).read_bytes()
    if raw[:8] != BINARY_MAGIC:
        raise ValueError(f"{path}: bad magic")
    (K,) = struct.unpack("<Q", raw[8:16])
    body = np.frombuffer(raw[16:], dtype="<f8").reshape(K, K, 2)
    return NdMatrix(body[..., 0] + 1j * body[..., 1])


def save_vector(v, path, header: str = "vec") -> None:
    """Coefficient vector in the ND text layout: ``ndvec v1 K`` then Re/Im per line."""
    v = np.asarray(v, dtype=complex)
    lines = [f"ndvec v1 {len(v)}"] + [f"{x.real!r} {x.imag!r}" for x in v]
    Path(path).write_text("\n".join(lines) + "\n")
