"""Random per-cell coefficient families for property checks."""

from __future__ import annotations

import numpy as np

from .coefficients import MatrixField
from .mesh import Mesh

FAMILIES = ("real_anisotropic", "complex_isotropic", "complex_anisotropic")


def random_rotations(rng, n: int) -> np.ndarray:
    t = rng.uniform(0, np.pi, n)
    c, s = np.cos(t), np.sin(t)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def random_spd(rng, n: int, lo: float, hi: float) -> np.ndarray:
    """Real symmetric matrices with eigenvalues drawn from ``[lo, hi]``."""
    Q = random_rotations(rng, n)
    lam = rng.uniform(lo, hi, (n, 2))
    return Q @ (lam[:, :, None] * np.swapaxes(Q, 1, 2))


def random_hpd(rng, n: int, lo: float, hi: float) -> np.ndarray:
    """Complex Hermitian matrices with eigenvalues in ``[lo, hi]``."""
    U = random_rotations(rng, n).astype(complex)
    phase = np.exp(1j * rng.uniform(0, 2 * np.pi, n))
    U[:, :, 1] *= phase[:, None]
    lam = rng.uniform(lo, hi, (n, 2))
    return U @ (lam[:, :, None] * np.conj(np.swapaxes(U, 1, 2)))


def random_field(family: str, mesh: Mesh, rng) -> MatrixField:
    """One coefficient of the given family.

    Real parts have eigenvalues in ``[0.5, 3]`` and imaginary parts (when
    present) are positive definite with eigenvalues in ``[0.2, 1]``, so that
    ``kappa A`` stays elliptic for ``kappa`` in ``{1, -i, exp(i pi/8)}``
    wherever the family allows it.
    """
    n = mesh.n_cells
    if family == "real_anisotropic":
        v = random_spd(rng, n, 0.5, 3.0).astype(complex)
    elif family == "complex_isotropic":
        v = (rng.uniform(0.5, 3.0, n) + 1j * rng.uniform(0.2, 1.0, n))[:, None, None] * np.eye(2)
    elif family == "complex_anisotropic":
        v = random_spd(rng, n, 0.5, 3.0) + 1j * random_hpd(rng, n, 0.2, 1.0)
    else:
        raise ValueError(f"unknown family {family!r}")
    return MatrixField(v, mesh.mesh_id, family)


def random_pair(family: str, mesh: Mesh, rng) -> tuple[MatrixField, MatrixField]:
    return random_field(family, mesh, rng), random_field(family, mesh, rng)


def random_ordered_pair(mesh: Mesh, rng) -> tuple[MatrixField, MatrixField]:
    """Self-adjoint ``A1 <= A2`` pointwise (difference has eigenvalues in ``[0, 2]``)."""
    n = mesh.n_cells
    a1 = random_spd(rng, n, 0.5, 3.0)
    a2 = a1 + random_spd(rng, n, 0.0, 2.0)
    return MatrixField(a1.astype(complex), mesh.mesh_id, "A1"), MatrixField(a2.astype(complex), mesh.mesh_id, "A2")
