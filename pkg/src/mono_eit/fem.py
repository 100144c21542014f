"""P1 finite element solver for the Neumann problem with mean-free gauge.

The discrete unknown lives in ``{u : int_Gamma u ds = 0}``; the constraint is
imposed by a single Lagrange multiplier appended to the stiffness matrix.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import sparse
from scipy.sparse.linalg import splu

from .coefficients import MatrixField, validate_coefficient
from .mesh import Mesh, MeshError, RegionMask, gamma_chain

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10


class NumericalError(RuntimeError):
    """Linear solver or eigensolver breakdown."""


def _gauss01(n: int = 4):
    x, w = leggauss(n)
    return 0.5 * (x + 1), 0.5 * w


# ---------------------------------------------------------------------------
# geometry helpers


def gradient_operators(mesh: Mesh):
    """Sparse ``(Dx, Dy)`` mapping nodal values to per-cell gradients."""
    cached = mesh.__dict__.get("_grad_ops")
    if cached is not None:
        return cached
    G = local_gradients(mesh)
    nt = mesh.n_cells
    rows = np.repeat(np.arange(nt), 3)
    cols = mesh.triangles.ravel()
    shape = (nt, mesh.n_vertices)
    Dx = sparse.csr_matrix((G[:, :, 0].ravel(), (rows, cols)), shape=shape)
    Dy = sparse.csr_matrix((G[:, :, 1].ravel(), (rows, cols)), shape=shape)
    mesh.__dict__["_grad_ops"] = (Dx, Dy)
    return Dx, Dy


def local_gradients(mesh: Mesh) -> np.ndarray:
    """``(nt, 3, 2)`` gradients of the three barycentric hat functions."""
    p = mesh.vertices[mesh.triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    if np.any(det <= 0):
        raise MeshError("degenerate or inverted triangle")
    # rows of inv([e1 e2]) are the gradients of lambda_1, lambda_2
    g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
    g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
    return np.stack([-g1 - g2, g1, g2], axis=1)


def element_matrices(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """``K_e[i, j] = area * grad(phi_i) . A grad(phi_j)``."""
    G = local_gradients(mesh)
    return mesh.cell_areas[:, None, None] * np.einsum("cia,cab,cjb->cij", G, values, G)


def boundary_mass_vector(mesh: Mesh) -> np.ndarray:
    """``m_i = int_Gamma phi_i ds``."""
    e = mesh.gamma_edges
    half = 0.5 * mesh.edge_lengths[mesh.gamma]
    m = np.zeros(mesh.n_vertices)
    np.add.at(m, e[:, 0], half)
    np.add.at(m, e[:, 1], half)
    return m


# ---------------------------------------------------------------------------
# Neumann basis on Gamma


@dataclass(frozen=True, eq=False)
class NeumannBasis:
    """Orthonormal, mean-free trigonometric currents on Gamma.

    Functions are ``cos``/``sin`` of ``2 pi k s / |Gamma|`` in the arclength
    ``s`` along Gamma, ordered ``cos 1, sin 1, cos 2, ...``, made mean-free
    and orthonormalized in order (so the first ``K'`` functions of a size-K
    basis form the size-K' basis).
    """

    K: int
    mesh_id: str
    edge_index: np.ndarray  # boundary edge ids along Gamma
    arclength: np.ndarray  # (ne, 2) start/end arclength of each Gamma edge
    quad_points: np.ndarray  # (ne, q, 2)
    quad_weights: np.ndarray  # (ne, q), includes edge lengths
    quad_shape: np.ndarray  # (ne, q, 2) trace hat values of edge endpoints
    edge_vertices: np.ndarray  # (ne, 2)
    values: np.ndarray  # (ne, q, K)
    gram: np.ndarray
    n_vertices: int

    @cached_property
    def basis_id(self) -> str:
        h = hashlib.sha1(f"{self.mesh_id}:{self.K}".encode())
        h.update(self.edge_index.tobytes())
        return h.hexdigest()[:16]

    @property
    def gamma_length(self) -> float:
        return float(self.quad_weights.sum())

    @cached_property
    def load_matrix(self) -> np.ndarray:
        """``(nv, K)``: column ``k`` is ``<f_k, phi_i>`` for all nodes ``i``."""
        return self.project_to_nodes(self.values)

    def project_to_nodes(self, vals: np.ndarray) -> np.ndarray:
        """Integrate quadrature values against the nodal hat functions."""
        vals = np.asarray(vals)
        squeeze = vals.ndim == 2
        if squeeze:
            vals = vals[..., None]
        out = np.zeros((self.n_vertices, vals.shape[-1]), dtype=vals.dtype)
        for end in range(2):
            contrib = np.einsum("eq,eq,eqk->ek", self.quad_weights, self.quad_shape[:, :, end], vals)
            np.add.at(out, self.edge_vertices[:, end], contrib)
        return out[:, 0] if squeeze else out

    def evaluate(self, coeffs) -> np.ndarray:
        """Quadrature-point values of ``sum_k c_k f_k``."""
        return self.values @ np.asarray(coeffs)

    def trace_inner(self, coeffs, nodal) -> complex:
        """``<f, w|_Gamma>`` in L2(Gamma), antilinear in ``w``."""
        return complex(np.asarray(coeffs) @ (self.load_matrix.T @ np.conj(nodal)))

    def truncate(self, K: int) -> "NeumannBasis":
        if K > self.K or K % 2:
            raise ValueError(f"cannot truncate size-{self.K} basis to {K}")
        from dataclasses import replace

        return replace(self, K=K, values=self.values[:, :, :K].copy(), gram=self.gram[:K, :K])


def build_basis(mesh: Mesh, K: int, quad_order: int = 4) -> NeumannBasis:
    if K < 2 or K % 2:
        raise ValueError(f"basis size K must be a positive even number, got {K}")
    chain = gamma_chain(mesh)
    edges = mesh.boundary_edges[chain]
    lengths = mesh.edge_lengths[chain]
    s0 = np.concatenate([[0.0], np.cumsum(lengths)[:-1]])
    L = float(lengths.sum())
    if K // 2 > len(chain) // 2:
        raise ValueError(f"K={K} is too large for {len(chain)} Gamma edges")
    t, w = _gauss01(quad_order)
    a = mesh.vertices[edges[:, 0]]
    b = mesh.vertices[edges[:, 1]]
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    weights = lengths[:, None] * w[None, :]
    s = s0[:, None] + t[None, :] * lengths[:, None]
    freq = np.arange(1, K // 2 + 1)
    phase = 2 * math.pi * s[..., None] * freq / L
    raw = np.empty(s.shape + (K,))
    raw[..., 0::2] = np.cos(phase)
    raw[..., 1::2] = np.sin(phase)
    raw -= np.einsum("eq,eqk->k", weights, raw) / L
    gram_raw = np.einsum("eq,eqi,eqj->ij", weights, raw, raw)
    chol = np.linalg.cholesky(gram_raw)
    vals = np.linalg.solve(chol, raw.reshape(-1, K).T).T.reshape(raw.shape)
    gram = np.einsum("eq,eqi,eqj->ij", weights, vals, vals)
    shape = np.stack([1 - t, t], axis=-1)
    return NeumannBasis(
        K=K,
        mesh_id=mesh.mesh_id,
        edge_index=chain,
        arclength=np.column_stack([s0, s0 + lengths]),
        quad_points=pts,
        quad_weights=weights,
        quad_shape=np.broadcast_to(shape, (len(chain),) + shape.shape).copy(),
        edge_vertices=edges,
        values=vals,
        gram=gram,
        n_vertices=mesh.n_vertices,
    )


# ---------------------------------------------------------------------------
# linear system


@dataclass(frozen=True)
class DiscreteSolution:
    """Nodal values of a gauged P1 solution."""

    values: np.ndarray
    multiplier: complex
    mesh_id: str
    source: str = ""
    residual: float = 0.0
    projected: bool = False

    def gradients(self, mesh: Mesh) -> np.ndarray:
        Dx, Dy = gradient_operators(mesh)
        return np.column_stack([Dx @ self.values, Dy @ self.values])


class ForwardSystem:
    """Factorized gauged stiffness system for one coefficient."""

    def __init__(self, A: MatrixField, mesh: Mesh, c: float | None = None):
        A.check(mesh)
        report = validate_coefficient(A, 0.0 if c is None else c)
        if report.min_real_eig <= 0 or (c is not None and not report.in_H):
            raise NumericalError(
                f"coefficient is not uniformly elliptic (min eig of Re A = {report.min_real_eig:.3g})"
            )
        self.A = A
        self.mesh = mesh
        self.real = A.is_real
        values = A.values.real if self.real else A.values
        Ke = element_matrices(mesh, values)
        tri = mesh.triangles
        rows = np.repeat(tri, 3, axis=1).ravel()
        cols = np.tile(tri, (1, 3)).ravel()
        n = mesh.n_vertices
        self.stiffness = sparse.csr_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))
        self.gauge = boundary_mass_vector(mesh)
        g = sparse.csr_matrix(self.gauge[None, :])
        self.matrix = sparse.bmat([[self.stiffness, g.T], [g, None]], format="csc")
        try:
            self._lu = splu(self.matrix)
        except RuntimeError as exc:
            raise NumericalError(f"factorization failed: {exc}") from None

    @property
    def n(self) -> int:
        return self.mesh.n_vertices

    def solve_loads(self, loads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Solve for one or many load columns; returns nodal values and multipliers."""
        loads = np.asarray(loads)
        squeeze = loads.ndim == 1
        B = loads[:, None] if squeeze else loads
        rhs = np.vstack([B, np.zeros((1, B.shape[1]), dtype=B.dtype)])
        if not self.real:
            rhs = rhs.astype(complex)
        x = self._apply_inverse(rhs)
        res = self._residual(x, rhs)
        if res > RESIDUAL_TOL:
            x = x + self._apply_inverse(rhs - self.matrix @ x)
            res = self._residual(x, rhs)
        if not np.all(np.isfinite(x)) or res > RESIDUAL_TOL:
            raise NumericalError(
                f"linear solve residual {res:.3g} exceeds {RESIDUAL_TOL} "
                f"(1-norm condition estimate {self.condition_estimate():.3g})"
            )
        self.last_residual = res
        u, lam = x[:-1], x[-1]
        return (u[:, 0], lam[0]) if squeeze else (u, lam)

    def _apply_inverse(self, rhs):
        if self.real and np.iscomplexobj(rhs):
            return self._lu.solve(np.ascontiguousarray(rhs.real)) + 1j * self._lu.solve(
                np.ascontiguousarray(rhs.imag)
            )
        return self._lu.solve(rhs)

    def _residual(self, x, rhs) -> float:
        r = np.linalg.norm(self.matrix @ x - rhs, axis=0)
        scale = np.maximum(np.linalg.norm(rhs, axis=0), 1e-300)
        return float(np.max(np.where(np.linalg.norm(rhs, axis=0) > 0, r / scale, r)))

    def condition_estimate(self) -> float:
        from scipy.sparse.linalg import onenormest, LinearOperator

        n = self.matrix.shape[0]
        inv = LinearOperator(
            (n, n), matvec=self._lu.solve, rmatvec=lambda v: self._lu.solve(v, trans="H"),
            dtype=self.matrix.dtype,
        )
        return float(onenormest(self.matrix) * onenormest(inv))


def assemble_system(A: MatrixField, mesh: Mesh) -> ForwardSystem:
    return ForwardSystem(A, mesh)


def neumann_load(mesh: Mesh, basis: NeumannBasis, f) -> tuple[np.ndarray, bool]:
    """Load vector ``<f, phi_i>`` for basis coefficients or a point function.

    Point functions are evaluated at the Gamma quadrature points and projected
    to mean-free data when needed; the flag reports whether that happened.
    """
    if callable(f):
        vals = np.asarray(f(basis.quad_points.reshape(-1, 2))).reshape(basis.quad_weights.shape)
        w = basis.quad_weights
        mean = np.sum(w * vals)
        norm = math.sqrt(float(np.sum(w * np.abs(vals) ** 2)) * basis.gamma_length)
        projected = abs(mean) > 1e-12 * norm
        if projected:
            log.warning("Neumann data has nonzero mean %.3g; projecting to mean-free", abs(mean))
            vals = vals - mean / basis.gamma_length
        return basis.project_to_nodes(vals), projected
    coeffs = np.asarray(f)
    if coeffs.shape != (basis.K,):
        raise ValueError(f"expected {basis.K} basis coefficients, got shape {coeffs.shape}")
    return basis.load_matrix @ coeffs, False


def solve_neumann(system: ForwardSystem, f, basis: NeumannBasis) -> DiscreteSolution:
    load, projected = neumann_load(system.mesh, basis, f)
    u, lam = system.solve_loads(load)
    source = "callable" if callable(f) else "basis"
    return DiscreteSolution(u, complex(lam), system.mesh.mesh_id, source, system.last_residual, projected)


# ---------------------------------------------------------------------------
# energies


def _field_values(M, n_cells) -> np.ndarray:
    if isinstance(M, MatrixField):
        return M.values
    m = np.asarray(M)
    if m.ndim == 0:
        return np.broadcast_to(m * np.eye(2), (n_cells, 2, 2))
    if m.shape == (2, 2):
        return np.broadcast_to(m, (n_cells, 2, 2))
    return m


def cell_energy_form(M, gu: np.ndarray, gv: np.ndarray, areas: np.ndarray) -> np.ndarray:
    """``sum_c area_c (M_c grad u_i) . conj(grad v_j)`` for gradient stacks.

    ``gu`` and ``gv`` have shape ``(n, 2, K)``; returns the ``(Ku, Kv)`` matrix.
    """
    m = _field_values(M, len(areas))
    if not np.iscomplexobj(m) or not np.any(m.imag):
        m = np.real(m)
    w1 = areas[:, None] * (m[:, 0, 0, None] * gu[:, 0] + m[:, 0, 1, None] * gu[:, 1])
    w2 = areas[:, None] * (m[:, 1, 0, None] * gu[:, 0] + m[:, 1, 1, None] * gu[:, 1])
    return w1.T @ np.conj(gv[:, 0]) + w2.T @ np.conj(gv[:, 1])


def energy_integral(M, u: DiscreteSolution, v: DiscreteSolution, V: RegionMask, mesh: Mesh) -> complex:
    """``int_V M grad u . conj(grad v) dx`` (exact for P1)."""
    V.check(mesh)
    if u.mesh_id != mesh.mesh_id or v.mesh_id != mesh.mesh_id:
        raise MeshError("solution belongs to a different mesh")
    idx = V.cells
    if len(idx) == 0:
        return 0j
    gu = u.gradients(mesh)[idx][:, :, None]
    gv = v.gradients(mesh)[idx][:, :, None]
    m = _field_values(M, mesh.n_cells)[idx]
    return complex(cell_energy_form(m, gu, gv, mesh.cell_areas[idx])[0, 0])


@dataclass(eq=False)
class SolutionSet:
    """Solutions for every basis function under one coefficient."""

    system: ForwardSystem
    basis: NeumannBasis
    values: np.ndarray  # (nv, K)
    multipliers: np.ndarray
    _grads: np.ndarray | None = field(default=None, repr=False)

    @property
    def mesh(self) -> Mesh:
        return self.system.mesh

    @property
    def gradients(self) -> np.ndarray:
        """``(nt, 2, K)`` per-cell gradients."""
        if self._grads is None:
            Dx, Dy = gradient_operators(self.mesh)
            self._grads = np.stack([Dx @ self.values, Dy @ self.values], axis=1)
        return self._grads

    def solution(self, k: int) -> DiscreteSolution:
        return DiscreteSolution(
            self.values[:, k], complex(self.multipliers[k]), self.mesh.mesh_id, f"basis[{k}]"
        )

    def energy_matrix(self, M, mask: RegionMask | None = None) -> np.ndarray:
        """``E[i, j] = int_mask M grad u_i . conj(grad u_j)``."""
        g = self.gradients
        areas = self.mesh.cell_areas
        m = _field_values(M, self.mesh.n_cells)
        if mask is not None:
            mask.check(self.mesh)
            idx = mask.cells
            g, areas, m = g[idx], areas[idx], m[idx]
        if len(areas) == 0:
            K = self.basis.K
            return np.zeros((K, K))
        return cell_energy_form(m, g, g, areas)

    def trace_matrix(self) -> np.ndarray:
        """``T[i, j] = <f_i, u_j|_Gamma>`` from boundary traces."""
        return self.basis.load_matrix.T @ np.conj(self.values)


def solve_basis(system: ForwardSystem, basis: NeumannBasis) -> SolutionSet:
    if basis.mesh_id != system.mesh.mesh_id:
        raise MeshError("basis belongs to a different mesh")
    u, lam = system.solve_loads(basis.load_matrix)
    return SolutionSet(system, basis, u, lam)


# ---------------------------------------------------------------------------
# virtual measurements


def virtual_adjoint(A: MatrixField, V: RegionMask, f, basis: NeumannBasis, mesh: Mesh) -> np.ndarray:
    """``grad u_f^A`` restricted to the cells of ``V`` (shape ``(|V|, 2)``)."""
    V.check(mesh)
    sol = solve_neumann(ForwardSystem(A, mesh), f, basis)
    return sol.gradients(mesh)[V.data]


def virtual_measurement(A: MatrixField, V: RegionMask, F: np.ndarray, mesh: Mesh) -> DiscreteSolution:
    """Solve ``int A^* grad w . conj(grad v) = int_V F . conj(grad v)`` for all ``v``.

    ``F`` holds one constant vector per cell of ``V``; the trace of the
    returned ``w`` on Gamma is the virtual measurement of ``F``.
    """
    V.check(mesh)
    F = np.asarray(F)
    idx = V.cells
    if F.shape != (len(idx), 2):
        raise ValueError(f"F must have shape ({len(idx)}, 2)")
    G = local_gradients(mesh)[idx]  # (n, 3, 2)
    contrib = mesh.cell_areas[idx, None] * np.einsum("ca,cia->ci", F, G)
    load = np.zeros(mesh.n_vertices, dtype=np.result_type(F.dtype, float))
    np.add.at(load, mesh.triangles[idx].ravel(), contrib.ravel())
    system = ForwardSystem(A.adjoint(), mesh)
    w, lam = system.solve_loads(load)
    return DiscreteSolution(w, complex(lam), mesh.mesh_id, "virtual", system.last_residual)
