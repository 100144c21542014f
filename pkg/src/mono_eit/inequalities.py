"""Energy-integral bounds on differences of ND maps.

For coefficients ``A1, A2`` and a complex weight ``kappa`` with
``kappa A1`` uniformly elliptic, the real part of
``kappa <f, (Lambda1 - Lambda2) f>`` is bracketed by two integrals of the
solution ``u2`` for ``A2``:

    int ([kappa(A2-A1)]^R - B_k) grad u2 . conj(grad u2)
        <= Re kappa <f, (Lambda1 - Lambda2) f>
        <= int ((kappa A2)^R [(kappa A1)^R]^-1 [kappa(A2-A1)]^R + C_k) grad u2 . conj(grad u2)

with ``B_k``/``C_k`` built from the Hermitian parts below. Both bounds
follow from completing a square in the energy form, so they hold exactly
for Galerkin solutions; the checks here are therefore sharp up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientError, MatrixField, eigvalsh2, hermitian_split
from .fem import NeumannBasis
from .mesh import Mesh
from .nd import Measurement

VIOLATION_RTOL = 1e-8


def _herm(v: np.ndarray) -> np.ndarray:
    return 0.5 * (v + np.conj(np.swapaxes(v, 1, 2)))


@dataclass(frozen=True)
class KappaTerms:
    """Per-cell matrices entering the two bounds."""

    lower: np.ndarray  # [kappa(A2-A1)]^R - B_k
    upper: np.ndarray  # (kA2)^R [(kA1)^R]^-1 [kappa(A2-A1)]^R + C_k
    B: np.ndarray
    C: np.ndarray
    bracket: np.ndarray  # commutator-like term multiplying i in C_k


def kappa_terms(A1: MatrixField, A2: MatrixField, kappa: complex) -> KappaTerms:
    ka1_r, ka1_i = hermitian_split(kappa * A1.values)
    ka2_r, ka2_i = hermitian_split(kappa * A2.values)
    lo, _ = eigvalsh2(ka1_r)
    if lo.min() <= 0:
        raise CoefficientError(
            f"kappa*A1 is not uniformly elliptic (min eigenvalue of its Hermitian part {lo.min():.3g})"
        )
    inv = np.linalg.inv(ka1_r)
    B = ka1_i @ inv @ ka1_i
    bracket = ka2_r @ inv @ ka2_i - ka2_i @ inv @ ka2_r
    C = ka2_i @ inv @ ka2_i + 1j * bracket
    diff_r = _herm(kappa * (A2.values - A1.values))
    lower = diff_r - B
    upper = ka2_r @ inv @ diff_r + C
    return KappaTerms(lower, upper, B, C, bracket)


@dataclass
class InequalityReport:
    kappa: complex
    trials: int
    lhs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    scale: float
    max_violation_lower: float  # max over trials of lower - lhs (positive = violated)
    max_violation_upper: float  # max over trials of lhs - upper
    matrix_margin_lower: float  # min eig over the whole span, normalized to unit coefficients
    matrix_margin_upper: float
    bracket_norm: float
    b_norm: float
    c_norm: float
    failures: list = field(default_factory=list)  # (trial, which, amount)

    @property
    def passed(self) -> bool:
        tol = VIOLATION_RTOL * self.scale
        return self.max_violation_lower <= tol and self.max_violation_upper <= tol


def _form(mat: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Quadratic forms ``c^T M conj(c)`` for each row ``c`` of ``coeffs``."""
    return np.einsum("ti,ij,tj->t", coeffs, mat, np.conj(coeffs))


def _min_eig(mat: np.ndarray) -> float:
    # c^T M conj(c) is the Hermitian form of M^T in the variable conj(c)
    h = 0.5 * (mat.T + mat.conj())
    return float(np.linalg.eigvalsh(h)[0])


def verify_general_inequalities(
    A1: MatrixField,
    A2: MatrixField,
    kappa: complex,
    trials: int,
    mesh: Mesh,
    basis: NeumannBasis,
    seed: int | None = 0,
    measurements: tuple[Measurement, Measurement] | None = None,
) -> InequalityReport:
    """Evaluate both bounds on ``trials`` random currents in the basis span.

    Failures are recorded per trial in the report rather than raised.
    ``measurements`` may pass precomputed ``(Measurement(A1), Measurement(A2))``.
    """
    for name, A in (("A1", A1), ("A2", A2)):
        A.check(mesh)
        lo, _ = eigvalsh2(A.real_part)
        if lo.min() <= 0:
            raise CoefficientError(f"{name} is not uniformly elliptic (min eigenvalue {lo.min():.3g})")
    terms = kappa_terms(A1, A2, kappa)
    m1, m2 = measurements or (Measurement(A1, mesh, basis), Measurement(A2, mesh, basis))
    n1, n2 = m1.nd().entries, m2.nd().entries
    sol2 = m2.solutions
    E_low = sol2.energy_matrix(terms.lower)
    E_up = sol2.energy_matrix(terms.upper)
    lhs_mat = kappa * (n1 - n2)

    rng = np.random.default_rng(seed)
    K = basis.K
    coeffs = rng.standard_normal((trials, K)) + 1j * rng.standard_normal((trials, K))
    coeffs /= np.linalg.norm(coeffs, axis=1, keepdims=True)
    lhs = _form(lhs_mat, coeffs).real
    lower = _form(E_low, coeffs).real
    upper = _form(E_up, coeffs).real

    scale = max(float(np.abs(n1).max()), float(np.abs(n2).max()), float(np.abs(E_up).max()), 1e-300)
    v_low = lower - lhs
    v_up = lhs - upper
    tol = VIOLATION_RTOL * scale
    failures = [(t, "lower", float(v)) for t, v in enumerate(v_low) if v > tol]
    failures += [(t, "upper", float(v)) for t, v in enumerate(v_up) if v > tol]
    return InequalityReport(
        kappa=kappa,
        trials=trials,
        lhs=lhs,
        lower=lower,
        upper=upper,
        scale=scale,
        max_violation_lower=float(v_low.max(initial=-np.inf)),
        max_violation_upper=float(v_up.max(initial=-np.inf)),
        matrix_margin_lower=_min_eig(lhs_mat - E_low),
        matrix_margin_upper=_min_eig(E_up - lhs_mat),
        bracket_norm=float(np.abs(terms.bracket).max(initial=0.0)),
        b_norm=float(np.abs(terms.B).max(initial=0.0)),
        c_norm=float(np.abs(terms.C).max(initial=0.0)),
        failures=failures,
    )


@dataclass
class SandwichReport:
    lower_violation: float
    upper_violation: float
    nd_min_eig: float
    scale: float

    @property
    def passed(self) -> bool:
        return (
            self.lower_violation <= VIOLATION_RTOL * self.scale
            and self.upper_violation <= VIOLATION_RTOL * self.scale
            and self.nd_min_eig >= -1e-9 * self.scale
        )


def sandwich_check(
    A1: MatrixField, A2: MatrixField, mesh: Mesh, basis: NeumannBasis, trials: int = 100, seed: int | None = 0
) -> SandwichReport:
    """Self-adjoint case ``kappa = 1``: the lower integrand is ``A2 - A1`` and
    the upper one ``A2 A1^-1 (A2 - A1)``; for ``A1 <= A2`` the ND difference
    ``Lambda1 - Lambda2`` is also reported as a matrix (smallest eigenvalue)."""
    if not (A1.self_adjoint and A2.self_adjoint):
        raise CoefficientError("sandwich check needs self-adjoint coefficients")
    m1, m2 = Measurement(A1, mesh, basis), Measurement(A2, mesh, basis)
    rep = verify_general_inequalities(A1, A2, 1.0, trials, mesh, basis, seed, (m1, m2))
    diff = m1.nd().entries - m2.nd().entries
    return SandwichReport(
        rep.max_violation_lower,
        rep.max_violation_upper,
        float(np.linalg.eigvalsh(0.5 * (diff + diff.conj().T))[0]),
        rep.scale,
    )
