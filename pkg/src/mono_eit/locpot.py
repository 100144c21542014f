"""Localized potentials as generalized eigenvectors of region energies.

For a target set ``B`` inside a connecting set ``U`` that reaches the
measurement boundary, currents whose solutions carry much energy on ``B``
and little outside ``U`` are found by maximizing the Rayleigh quotient
``<f, E_B f> / <f, E_out f>`` over the span of the Neumann basis. Growth of
the top quotient with the basis size is the discrete signature of
localization.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import eigh
from scipy.sparse.csgraph import connected_components

from .coefficients import MatrixField
from .fem import NeumannBasis, NumericalError
from .mesh import Mesh, RegionMask
from .nd import Measurement

EPS_REL = 1e-12


class LocalizationError(ValueError):
    """A hypothesis on the localization sets is violated."""


@dataclass(frozen=True, eq=False)
class EnergyFormPair:
    """``E_B[i, j] = int_B grad u_j . conj(grad u_i)`` and the same over the
    complement of ``U``; with this orientation ``<f, E f> = c^H E c`` for
    ``f = sum_k c_k f_k``."""

    E_B: np.ndarray
    E_out: np.ndarray
    label: str
    B: RegionMask
    U: RegionMask

    @property
    def K(self) -> int:
        return len(self.E_B)

    def truncate(self, K: int) -> "EnergyFormPair":
        return EnergyFormPair(self.E_B[:K, :K], self.E_out[:K, :K], self.label, self.B, self.U)


def check_localization_sets(B: RegionMask, U: RegionMask, mesh: Mesh) -> None:
    """Raise ``LocalizationError`` naming the first violated hypothesis."""
    B.check(mesh)
    U.check(mesh)
    if B.is_empty():
        raise LocalizationError("B is empty")
    if not B.issubset(U):
        raise LocalizationError("B is not contained in U")
    if B == U:
        raise LocalizationError("B must be a strict subset of U")
    if U.data.all():
        raise LocalizationError("complement of U is empty")
    idx = U.cells
    n_comp, _ = connected_components(mesh.cell_adjacency[idx][:, idx], directed=False)
    if n_comp != 1:
        raise LocalizationError(f"U is not edge-connected ({n_comp} components)")
    if not U.data[mesh.edge_cells[mesh.gamma]].any():
        raise LocalizationError("U does not touch the measurement boundary")


def _region_form(measurement: Measurement, V: RegionMask) -> np.ndarray:
    # energy_matrix is int grad u_i . conj(grad u_j); transpose for E_V
    return measurement.solutions.energy_matrix(np.eye(2), V).T


def energy_form_pair(
    A: MatrixField,
    B: RegionMask,
    U: RegionMask,
    basis: NeumannBasis,
    mesh: Mesh,
    measurement: Measurement | None = None,
) -> EnergyFormPair:
    check_localization_sets(B, U, mesh)
    m = measurement or Measurement(A, mesh, basis)
    return EnergyFormPair(_region_form(m, B), _region_form(m, ~U), A.label, B, U)


def _regularized(pair: EnergyFormPair) -> np.ndarray:
    K = pair.K
    eps = EPS_REL * float(np.trace(pair.E_out).real) / K
    return 0.5 * (pair.E_out + pair.E_out.conj().T) + eps * np.eye(K)


def localization_spectrum(pair: EnergyFormPair, n: int = 3) -> list[tuple[float, np.ndarray]]:
    """Top ``n`` pairs ``(lambda, c)`` of ``E_B c = lambda (E_out + eps I) c``,
    sorted descending, with ``c`` of unit norm (unit ``L2(Gamma)`` current)."""
    E_B = 0.5 * (pair.E_B + pair.E_B.conj().T)
    if not np.any(E_B) and not np.any(pair.E_out):
        raise NumericalError("both energy forms vanish")
    n = min(n, pair.K)
    try:
        w, v = eigh(E_B, _regularized(pair), subset_by_index=[pair.K - n, pair.K - 1])
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"generalized eigensolver failed: {exc}") from None
    out = []
    for k in range(n - 1, -1, -1):
        c = v[:, k] / np.linalg.norm(v[:, k])
        out.append((float(w[k]), c))
    return out


def rayleigh_ratio(pair: EnergyFormPair, c: np.ndarray) -> float:
    c = np.asarray(c)[: pair.K]
    num = np.vdot(c, pair.E_B @ c).real
    den = np.vdot(c, _regularized(pair) @ c).real
    return float(num / den)


@dataclass
class SimultaneousReport:
    Ks: list
    ratios_A1: np.ndarray  # (len(Ks), n)
    ratios_A2: np.ndarray
    constant: float  # max ratio_A1 / ratio_A2 over the run

    @property
    def growing(self) -> bool:
        """Top ratio under A2 strictly increases with K (needs >= 2 sizes)."""
        top = self.ratios_A2[:, 0]
        return bool(len(top) > 1 and np.all(np.diff(top) > 0))

    @property
    def passed(self) -> bool:
        return bool(np.all(self.ratios_A2 >= self.ratios_A1 / self.constant * (1 - 1e-12))) and (
            len(self.Ks) < 2 or self.growing
        )


def simultaneous_localization_check(
    A1: MatrixField,
    A2: MatrixField,
    B: RegionMask,
    U: RegionMask,
    basis: NeumannBasis,
    mesh: Mesh,
    n: int = 3,
    Ks=None,
) -> SimultaneousReport:
    """Evaluate the top ``n`` localizing currents of ``A1`` under ``A2``.

    ``A2`` may differ from ``A1`` only outside ``U``. ``Ks`` lists nested
    basis sizes (default: only the full basis).
    """
    diff = np.abs(A1.values - A2.values).max(axis=(1, 2)) > 0
    overlap = int(np.count_nonzero(diff & U.data))
    if overlap:
        raise LocalizationError(f"A1 and A2 differ on {overlap} cells inside U")
    Ks = sorted(Ks or [basis.K])
    p1 = energy_form_pair(A1, B, U, basis, mesh)
    p2 = energy_form_pair(A2, B, U, basis, mesh)
    r1, r2 = [], []
    for K in Ks:
        q1, q2 = p1.truncate(K), p2.truncate(K)
        spec = localization_spectrum(q1, n)
        r1.append([lam for lam, _ in spec])
        r2.append([rayleigh_ratio(q2, c) for _, c in spec])
    r1, r2 = np.array(r1), np.array(r2)
    constant = float(np.max(r1 / np.maximum(r2, 1e-300)))
    return SimultaneousReport(Ks, r1, r2, constant)


def save_spectrum_csv(rows, path) -> None:
    """``rows`` are ``(K, [lambda_1, ..., lambda_n])``."""
    n = max(len(r[1]) for r in rows)
    lines = ["K," + ",".join(f"lambda{k + 1}" for k in range(n))]
    lines += [f"{K}," + ",".join(repr(float(x)) for x in lams) for K, lams in rows]
    Path(path).write_text("\n".join(lines) + "\n")
