"""Triangular meshes of the disk, boundary markers and cell masks."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay

from .regions import Region, parse_region

MAX_TRIANGLES = 10_000_000


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming P1 triangulation.

    ``boundary_edges`` is ordered as a counter-clockwise loop, each edge
    oriented so the domain lies to its left. ``gamma`` flags the edges that
    belong to the measurement boundary.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    gamma: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.triangles)

    @cached_property
    def mesh_id(self) -> str:
        h = hashlib.sha1()
        h.update(np.ascontiguousarray(self.vertices, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.triangles, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]

    @cached_property
    def cell_areas(self) -> np.ndarray:
        return 0.5 * _signed_double_area(self.vertices, self.triangles)

    @cached_property
    def cell_centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def gamma_edges(self) -> np.ndarray:
        return self.boundary_edges[self.gamma]

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        """Lengths of the boundary edges."""
        d = self.vertices[self.boundary_edges[:, 1]] - self.vertices[self.boundary_edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @cached_property
    def normals(self) -> np.ndarray:
        """Outward unit normal of every boundary edge."""
        d = self.vertices[self.boundary_edges[:, 1]] - self.vertices[self.boundary_edges[:, 0]]
        return np.column_stack([d[:, 1], -d[:, 0]]) / self.edge_lengths[:, None]

    @cached_property
    def neighbors(self) -> np.ndarray:
        """``(nt, 3)`` array; entry ``k`` is the cell across the edge opposite local vertex ``k`` or -1."""
        tri = self.triangles
        nt = len(tri)
        local = [(1, 2), (2, 0), (0, 1)]
        edges = np.concatenate([np.sort(tri[:, list(p)], axis=1) for p in local])
        owner = np.tile(np.arange(nt), 3)
        slot = np.repeat(np.arange(3), nt)
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        e = edges[order]
        same = np.all(e[1:] == e[:-1], axis=1)
        nb = np.full((nt, 3), -1, dtype=np.int64)
        i = np.nonzero(same)[0]
        a, b = order[i], order[i + 1]
        nb[owner[a], slot[a]] = owner[b]
        nb[owner[b], slot[b]] = owner[a]
        return nb

    @cached_property
    def cell_adjacency(self):
        """Symmetric shared-edge adjacency as a sparse boolean matrix."""
        nb = self.neighbors
        rows = np.repeat(np.arange(self.n_cells), 3)
        cols = nb.ravel()
        keep = cols >= 0
        data = np.ones(int(keep.sum()), dtype=bool)
        return coo_matrix((data, (rows[keep], cols[keep])), shape=(self.n_cells,) * 2).tocsr()

    @cached_property
    def boundary_cells(self) -> np.ndarray:
        """Boolean per cell: does the cell own a boundary edge."""
        return np.any(self.neighbors < 0, axis=1)

    @cached_property
    def edge_cells(self) -> np.ndarray:
        """Owning cell of every boundary edge."""
        nb = self.neighbors
        local = np.array([(1, 2), (2, 0), (0, 1)])
        cell, slot = np.nonzero(nb < 0)
        pairs = np.sort(self.triangles[cell[:, None], local[slot]], axis=1)
        lookup = {(int(a), int(b)): int(c) for (a, b), c in zip(pairs, cell)}
        be = np.sort(self.boundary_edges, axis=1)
        return np.array([lookup[(int(a), int(b))] for a, b in be], dtype=np.int64)

    @cached_property
    def max_edge_length(self) -> float:
        p = self.vertices[self.triangles]
        d = p - np.roll(p, 1, axis=1)
        return float(np.sqrt((d**2).sum(axis=2)).max())

    @property
    def gamma_length(self) -> float:
        return float(self.edge_lengths[self.gamma].sum())

    def mask(self, cells=None) -> "RegionMask":
        data = np.zeros(self.n_cells, dtype=bool)
        if cells is not None:
            data[np.asarray(cells)] = True
        return RegionMask(data, self.mesh_id)

    def full_mask(self) -> "RegionMask":
        return RegionMask(np.ones(self.n_cells, dtype=bool), self.mesh_id)


@dataclass(frozen=True, eq=False)
class RegionMask:
    """A union of mesh cells, stored as a boolean array over the cells."""

    data: np.ndarray
    mesh_id: str = field(default="")

    @property
    def cells(self) -> np.ndarray:
        return np.flatnonzero(self.data)

    def __len__(self) -> int:
        return int(self.data.sum())

    def is_empty(self) -> bool:
        return not self.data.any()

    def area(self, mesh: Mesh) -> float:
        self.check(mesh)
        return float(mesh.cell_areas[self.data].sum())

    def check(self, mesh: Mesh) -> None:
        if self.mesh_id and self.mesh_id != mesh.mesh_id:
            raise MeshError("mask belongs to a different mesh")
        if len(self.data) != mesh.n_cells:
            raise MeshError("mask size does not match mesh")

    def _other(self, other: "RegionMask") -> np.ndarray:
        if self.mesh_id and other.mesh_id and self.mesh_id != other.mesh_id:
            raise MeshError("masks belong to different meshes")
        return other.data

    def __or__(self, other):
        return RegionMask(self.data | self._other(other), self.mesh_id or other.mesh_id)

    def __and__(self, other):
        return RegionMask(self.data & self._other(other), self.mesh_id or other.mesh_id)

    def __sub__(self, other):
        return RegionMask(self.data & ~self._other(other), self.mesh_id or other.mesh_id)

    def __invert__(self):
        return RegionMask(~self.data, self.mesh_id)

    def __eq__(self, other):
        if not isinstance(other, RegionMask):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash(self.data.tobytes())

    def issubset(self, other: "RegionMask") -> bool:
        return not np.any(self.data & ~self._other(other))


def _signed_double_area(vertices, triangles):
    p = vertices[triangles]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    return a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]


def _boundary_loop(triangles: np.ndarray) -> np.ndarray:
    """Boundary edges, oriented with the domain on the left, ordered as loops."""
    directed = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    key = np.sort(directed, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    edges = directed[counts[inverse.ravel()] == 1]
    nxt = {int(i): int(j) for i, j in edges}
    if len(nxt) != len(edges):
        raise MeshError("boundary is not a manifold curve")
    ordered = []
    remaining = set(nxt)
    start = int(edges[0, 0])
    while remaining:
        if start not in remaining:
            start = min(remaining)
        v = start
        while v in remaining:
            remaining.discard(v)
            ordered.append((v, nxt[v]))
            v = nxt[v]
    return np.asarray(ordered, dtype=np.int64)


def mesh_from_arrays(vertices, triangles, gamma=None) -> Mesh:
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    area2 = _signed_double_area(vertices, triangles)
    if np.any(area2 == 0):
        raise MeshError("degenerate triangle")
    flip = area2 < 0
    triangles = triangles.copy()
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    boundary = _boundary_loop(triangles)
    if gamma is None:
        gamma = np.ones(len(boundary), dtype=bool)
    return Mesh(vertices, triangles, boundary, np.asarray(gamma, dtype=bool))


def build_disk_mesh(radius: float, target_h: float) -> Mesh:
    """Triangulate the disk of the given radius centred at the origin.

    Vertices sit on concentric rings spaced at most ``target_h`` apart, with
    roughly ``2 pi r / target_h`` vertices per ring; the outer ring lies on
    the circle with a vertex at angle 0. The whole boundary is marked as Gamma.
    """
    if not radius > 0:
        raise MeshError(f"radius must be positive, got {radius}")
    if not 0 < target_h < radius:
        raise MeshError(f"need 0 < target_h < radius, got target_h={target_h}")
    n_rings = math.ceil(radius / target_h)
    estimate = 2.4 * math.pi * n_rings**2
    if estimate > MAX_TRIANGLES:
        raise MeshError(
            f"target_h={target_h} would give ~{estimate:.3g} triangles (limit {MAX_TRIANGLES})"
        )
    dr = radius / n_rings
    points = [np.zeros((1, 2))]
    for k in range(1, n_rings + 1):
        r = k * dr
        n = max(6, math.ceil(2 * math.pi * r / target_h))
        # stagger interior rings; the outer ring keeps a vertex at angle 0
        shift = 0.0 if k == n_rings else 0.5 * (k % 2)
        theta = 2 * math.pi * (np.arange(n) + shift) / n
        ring = np.column_stack([np.cos(theta), np.sin(theta)])
        points.append(r * ring)
    vertices = np.concatenate(points)
    vertices[-n:] = radius * ring  # exact radius on the boundary ring
    tri = Delaunay(vertices).simplices
    area2 = _signed_double_area(vertices, tri)
    tri = tri[np.abs(area2) > 1e-14 * radius**2]
    return mesh_from_arrays(vertices, tri)


def _midpoint_angles(mesh: Mesh) -> np.ndarray:
    v = mesh.vertices
    mid = 0.5 * (v[mesh.boundary_edges[:, 0]] + v[mesh.boundary_edges[:, 1]])
    return np.arctan2(mid[:, 1], mid[:, 0])


def mark_gamma(mesh: Mesh, arc_start: float, arc_end: float) -> Mesh:
    """Flag the boundary edges whose midpoint angle lies in the arc from
    ``arc_start`` counter-clockwise to ``arc_end``.
    """
    span = arc_end - arc_start
    if abs(span) >= 2 * math.pi - 1e-12:
        return replace(mesh, gamma=np.ones(len(mesh.boundary_edges), dtype=bool))
    span = span % (2 * math.pi)
    if span == 0:
        raise MeshError("arc_start and arc_end coincide modulo 2 pi")
    rel = (_midpoint_angles(mesh) - arc_start) % (2 * math.pi)
    gamma = rel < span
    if not gamma.any():
        gaps = np.diff(np.sort(np.append(rel, rel.min() + 2 * math.pi)))
        raise MeshError(
            f"arc of width {span:.3g} contains no boundary edge midpoint; "
            f"finest admissible arc width is {gaps.max():.3g}"
        )
    return replace(mesh, gamma=gamma)


def gamma_chain(mesh: Mesh) -> np.ndarray:
    """Indices into ``boundary_edges`` of the Gamma edges, in traversal order.

    For a partial arc the chain starts at its free end; for the full
    boundary it starts at the edge whose first vertex has the smallest
    non-negative polar angle.
    """
    idx = np.flatnonzero(mesh.gamma)
    edges = mesh.boundary_edges
    if len(idx) == len(edges):
        first = mesh.vertices[edges[:, 0]]
        ang = np.arctan2(first[:, 1], first[:, 0]) % (2 * math.pi)
        start = int(np.argmin(ang))
        return np.roll(np.arange(len(edges)), -start)
    ends = set(edges[idx, 1].tolist())
    by_start = {int(edges[i, 0]): int(i) for i in idx}
    heads = [i for i in idx if int(edges[i, 0]) not in ends]
    if len(heads) != 1:
        raise MeshError("Gamma must be a single connected arc")
    chain = [int(heads[0])]
    while True:
        nxt = by_start.get(int(edges[chain[-1], 1]))
        if nxt is None or nxt == chain[0]:
            break
        chain.append(nxt)
    if len(chain) != len(idx):
        raise MeshError("Gamma must be a single connected arc")
    return np.asarray(chain, dtype=np.int64)


def rasterize_region(mesh: Mesh, descriptor: Region | str) -> RegionMask:
    """Cells whose centroid satisfies the descriptor."""
    if isinstance(descriptor, str):
        descriptor = parse_region(descriptor)
    return RegionMask(descriptor.contains(mesh.cell_centroids), mesh.mesh_id)


def outer_shape_closure(mask: RegionMask, mesh: Mesh) -> RegionMask:
    """Fill every hole of the mask.

    Complement components that do not contain a cell touching the mesh
    boundary are added to the mask.
    """
    mask.check(mesh)
    outside = ~mask.data
    if not outside.any():
        return RegionMask(mask.data.copy(), mesh.mesh_id)
    idx = np.flatnonzero(outside)
    sub = mesh.cell_adjacency[idx][:, idx]
    _, labels = connected_components(sub, directed=False)
    reaching = np.unique(labels[mesh.boundary_cells[idx]])
    holes = ~np.isin(labels, reaching)
    filled = mask.data.copy()
    filled[idx[holes]] = True
    return RegionMask(filled, mesh.mesh_id)


def save_mesh(mesh: Mesh, path) -> None:
    lines = [f"mesh v1 {mesh.n_vertices} {mesh.n_cells} {len(mesh.boundary_edges)}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    lines += [
        f"{i} {j} {int(g)}" for (i, j), g in zip(mesh.boundary_edges.tolist(), mesh.gamma.tolist())
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> Mesh:
    rows = Path(path).read_text().split("\n")
    head = rows[0].split()
    if head[:2] != ["mesh", "v1"] or len(head) != 5:
        raise MeshError(f"{path}: not a 'mesh v1' file")
    nv, nt, nb = map(int, head[2:])
    body = [r.split() for r in rows[1 : 1 + nv + nt + nb]]
    vertices = np.array(body[:nv], dtype=float)
    triangles = np.array(body[nv : nv + nt], dtype=np.int64)
    bnd = np.array(body[nv + nt :], dtype=np.int64)
    mesh = mesh_from_arrays(vertices, triangles)
    flags = {(int(i), int(j)): bool(g) for i, j, g in bnd}
    gamma = np.array([flags[(int(i), int(j))] for i, j in mesh.boundary_edges])
    return replace(mesh, gamma=gamma)


def locate_points(mesh: Mesh, points: np.ndarray, k: int = 12) -> np.ndarray:
    """Index of a cell containing each point (nearest centroid as fallback)."""
    from scipy.spatial import cKDTree

    points = np.asarray(points, dtype=float).reshape(-1, 2)
    tree = mesh.__dict__.get("_centroid_tree")
    if tree is None:
        tree = cKDTree(mesh.cell_centroids)
        mesh.__dict__["_centroid_tree"] = tree
    k = min(k, mesh.n_cells)
    _, cand = tree.query(points, k=k)
    cand = np.asarray(cand).reshape(len(points), k)
    p = mesh.vertices[mesh.triangles[cand]]  # (n, k, 3, 2)
    q = points[:, None, :]
    inside = np.ones(cand.shape, dtype=bool)
    scale = np.sqrt(mesh.cell_areas[cand])
    for a, b in ((0, 1), (1, 2), (2, 0)):
        e = p[:, :, b] - p[:, :, a]
        w = q - p[:, :, a]
        cross = e[..., 0] * w[..., 1] - e[..., 1] * w[..., 0]
        inside &= cross >= -1e-12 * scale**2
    first = np.argmax(inside, axis=1)
    return cand[np.arange(len(points)), first]


def dilate_mask(mesh: Mesh, mask: RegionMask, radius: float) -> RegionMask:
    """Cells whose centroid lies within ``radius`` of a centroid of ``mask``."""
    from scipy.spatial import cKDTree

    mask.check(mesh)
    if mask.is_empty():
        return RegionMask(mask.data.copy(), mesh.mesh_id)
    tree = cKDTree(mesh.cell_centroids[mask.data])
    d, _ = tree.query(mesh.cell_centroids, distance_upper_bound=radius * (1 + 1e-12))
    # the query bound is strict, so the mask itself is added back
    return RegionMask(np.isfinite(d) | mask.data, mesh.mesh_id)
