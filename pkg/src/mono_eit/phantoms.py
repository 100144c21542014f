"""Declarative phantoms, push-forward twins, measurement noise and run manifests.

Config files are ``key = value`` lines grouped under ``[section]`` headers
(read with :mod:`configparser`, ``#`` starts a comment). Matrices are written
row by row, rows separated by ``;`` (``1 0; 0 1``); complex entries use
Python syntax (``1+0.3j``). Sections::

    [domain]        radius, h, gamma = full | <start> <end>   (radians)
    [background]    matrix (default identity), profile (polynomial in |x|/R,
                    ascending coefficients, multiplies the matrix)
    [inclusion NAME] region (descriptor), perturbation (matrix),
                    class = posdef | negdef | indefinite-core,
                    core_perturbation (indefinite-core only),
                    profile, center, scale (optional radial grading
                    w(|x - center| / scale) multiplying the perturbation)
    [bounds]        alpha, beta, c (default 0)
    [measurement]   K (default 32), noise (relative, default 0), seed,
                    collar (cells, default 2)

Sections used only by the command line (``shear``, ``outer``, ``inner``,
``locpot``, ``inequalities``) are listed in ``COMMAND_SECTIONS``.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial import Polynomial

from .coefficients import MatrixField, RadialShear, ScalarBounds, eigvalsh2, loewner_gap
from .fem import NeumannBasis, build_basis
from .mesh import Mesh, RegionMask, build_disk_mesh, mark_gamma
from .nd import NdMatrix
from .regions import DescriptorError, Region, parse_region

CLASS_TAGS = ("posdef", "negdef", "indefinite-core")

COMMAND_SECTIONS = {
    "shear": {"a", "b"},
    "outer": {"family", "variant", "directions", "grid", "resolution", "tau"},
    "inner": {"variant", "grid", "radius_factor", "tau"},
    "locpot": {"b", "u", "n", "ks", "a2_region", "a2_perturbation"},
    "inequalities": {"kappa", "trials", "pairs", "families", "seed"},
}
PHANTOM_SECTIONS = {
    "domain": {"radius", "h", "gamma"},
    "background": {"matrix", "profile"},
    "bounds": {"alpha", "beta", "c"},
    "measurement": {"k", "noise", "seed", "collar"},
}
INCLUSION_KEYS = {"region", "perturbation", "class", "core_perturbation", "profile", "center", "scale"}


class ConfigError(ValueError):
    """Malformed or incomplete configuration."""


class AssumptionViolation(ValueError):
    """A phantom violates a modelling assumption; ``clause`` names which."""

    def __init__(self, clause: str, message: str):
        super().__init__(f"{clause}: {message}")
        self.clause = clause


# ---------------------------------------------------------------------------
# spec


@dataclass(frozen=True)
class InclusionSpec:
    name: str
    region: Region
    perturbation: np.ndarray
    tag: str
    core_perturbation: np.ndarray | None = None
    profile: Polynomial | None = None
    center: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0

    def weight(self, points: np.ndarray) -> np.ndarray:
        if self.profile is None:
            return np.ones(len(points))
        rho = np.hypot(*(points - np.asarray(self.center)).T) / self.scale
        return self.profile(rho)


@dataclass(frozen=True)
class PhantomSpec:
    radius: float = 1.0
    h: float = 0.02
    gamma: tuple[float, float] | None = None  # None = full boundary
    background: np.ndarray = field(default_factory=lambda: np.eye(2, dtype=complex))
    background_profile: Polynomial | None = None
    inclusions: tuple[InclusionSpec, ...] = ()
    bounds: ScalarBounds = ScalarBounds(0.5, 2.0)
    K: int = 32
    noise: float = 0.0
    seed: int = 0
    collar: int = 2


def parse_matrix(text: str) -> np.ndarray:
    rows = [r.split() for r in text.split(";")]
    try:
        m = np.array([[complex(x) for x in r] for r in rows])
    except ValueError:
        raise ConfigError(f"cannot parse matrix {text!r}") from None
    if m.shape == (1, 1):
        return m[0, 0] * np.eye(2)
    if m.shape != (2, 2):
        raise ConfigError(f"matrix must be 2x2 (or a scalar), got shape {m.shape}")
    return m


def _floats(text: str, n: int | None = None, key: str = "") -> list[float]:
    try:
        vals = [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{key}: expected numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"{key}: expected {n} numbers, got {len(vals)}")
    return vals


def _get(sec, key, conv, default=None, required=False):
    if key not in sec:
        if required:
            raise ConfigError(f"[{sec.name}] missing key '{key}'")
        return default
    try:
        return conv(sec[key])
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{sec.name}] {key}: {exc}") from None


def read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from None
    for name in cp.sections():
        allowed = (
            INCLUSION_KEYS
            if name.startswith("inclusion")
            else PHANTOM_SECTIONS.get(name) or COMMAND_SECTIONS.get(name)
        )
        if allowed is None:
            raise ConfigError(f"unknown section [{name}]")
        extra = set(cp[name]) - allowed
        if extra:
            raise ConfigError(f"[{name}] unknown keys: {', '.join(sorted(extra))}")
    return cp


def spec_from_config(cp: configparser.ConfigParser) -> PhantomSpec:
    empty = {"domain": {}, "background": {}, "bounds": {}, "measurement": {}}
    for name in empty:
        if not cp.has_section(name):
            cp.add_section(name)
    dom, bg, bd, ms = cp["domain"], cp["background"], cp["bounds"], cp["measurement"]

    gamma_text = dom.get("gamma", "full").strip()
    gamma = None if gamma_text == "full" else tuple(_floats(gamma_text, 2, "gamma"))
    bounds_args = (
        _get(bd, "alpha", float, required=True),
        _get(bd, "beta", float, required=True),
        _get(bd, "c", float, 0.0),
    )
    try:
        bounds = ScalarBounds(*bounds_args)
    except ValueError as exc:
        raise ConfigError(f"[bounds] {exc}") from None

    inclusions = []
    for name in cp.sections():
        if not name.startswith("inclusion"):
            continue
        sec = cp[name]
        try:
            region = parse_region(_get(sec, "region", str, required=True))
        except DescriptorError as exc:
            raise ConfigError(f"[{name}] region: {exc}") from None
        tag = _get(sec, "class", str, required=True).strip()
        if tag not in CLASS_TAGS:
            raise ConfigError(f"[{name}] class must be one of {', '.join(CLASS_TAGS)}")
        profile = _get(sec, "profile", lambda s: Polynomial(_floats(s, key="profile")))
        inclusions.append(
            InclusionSpec(
                name=name.partition(" ")[2].strip() or name,
                region=region,
                perturbation=_get(sec, "perturbation", parse_matrix, required=True),
                tag=tag,
                core_perturbation=_get(sec, "core_perturbation", parse_matrix),
                profile=profile,
                center=tuple(_get(sec, "center", lambda s: _floats(s, 2, "center"), [0.0, 0.0])),
                scale=_get(sec, "scale", float, 1.0),
            )
        )
    spec = PhantomSpec(
        radius=_get(dom, "radius", float, 1.0),
        h=_get(dom, "h", float, 0.02),
        gamma=gamma,
        background=_get(bg, "matrix", parse_matrix, np.eye(2, dtype=complex)),
        background_profile=_get(bg, "profile", lambda s: Polynomial(_floats(s, key="profile"))),
        inclusions=tuple(inclusions),
        bounds=bounds,
        K=_get(ms, "k", int, 32),
        noise=_get(ms, "noise", float, 0.0),
        seed=_get(ms, "seed", int, 0),
        collar=_get(ms, "collar", int, 2),
    )
    if spec.radius <= 0 or not 0 < spec.h < spec.radius:
        raise ConfigError("[domain] need radius > 0 and 0 < h < radius")
    if spec.K < 1 or spec.noise < 0 or spec.collar < 1:
        raise ConfigError("[measurement] need K >= 1, noise >= 0, collar >= 1")
    return spec


def load_spec(path) -> PhantomSpec:
    return spec_from_config(read_config(path))


# ---------------------------------------------------------------------------
# build


@dataclass(eq=False)
class Phantom:
    spec: PhantomSpec
    mesh: Mesh
    A0: MatrixField
    A_D: MatrixField
    D_mask: RegionMask
    basis: NeumannBasis
    report: list = field(default_factory=list)

    def background_function(self, points: np.ndarray) -> np.ndarray:
        s = self.spec
        w = np.ones(len(points))
        if s.background_profile is not None:
            w = s.background_profile(np.hypot(*points.T) / s.radius)
        return w[:, None, None] * s.background

    def coefficient_function(self, points: np.ndarray) -> np.ndarray:
        """``A_D`` evaluated pointwise from the spec rather than per cell.

        Indefinite-core inclusions have a mesh-defined core, so for those the
        perturbation is taken from the containing cell instead.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        out = self.background_function(points).astype(complex)
        if any(inc.tag == "indefinite-core" for inc in self.spec.inclusions):
            from .mesh import locate_points

            cells = locate_points(self.mesh, points)
            return out + (self.A_D.values - self.A0.values)[cells]
        for inc in self.spec.inclusions:
            inside = inc.region.contains(points)
            out[inside] += inc.weight(points[inside])[:, None, None] * inc.perturbation
        return out

    def region_contains(self, points: np.ndarray) -> np.ndarray:
        inside = np.zeros(len(points), dtype=bool)
        for inc in self.spec.inclusions:
            inside |= inc.region.contains(points)
        return inside


def collar_cells(mask: RegionMask, mesh: Mesh, width: int) -> np.ndarray:
    """Cells of ``mask`` within ``width`` layers of its boundary."""
    nb = mesh.neighbors
    inside = mask.data
    outside_nb = (nb < 0) | ~inside[np.where(nb < 0, 0, nb)]
    layer = inside & outside_nb.any(axis=1)
    adj = mesh.cell_adjacency
    for _ in range(width - 1):
        layer = layer | (inside & (adj @ layer.astype(np.int8) > 0))
    return layer


def _hermitian_matrix(m: np.ndarray, what: str):
    if np.abs(m - m.conj().T).max() > 1e-14 * max(1.0, np.abs(m).max()):
        raise AssumptionViolation("self-adjoint", f"{what} is not Hermitian")


def build_phantom(spec: PhantomSpec) -> Phantom:
    """Materialize the spec and verify every modelling assumption eagerly."""
    mesh = build_disk_mesh(spec.radius, spec.h)
    if spec.gamma is not None:
        mesh = mark_gamma(mesh, *spec.gamma)
    partial = not mesh.gamma.all()
    cent = mesh.cell_centroids

    _hermitian_matrix(spec.background, "background matrix")
    w0 = np.ones(mesh.n_cells)
    if spec.background_profile is not None:
        w0 = spec.background_profile(np.hypot(*cent.T) / spec.radius)
    A0 = MatrixField((w0[:, None, None] * spec.background).astype(complex), mesh.mesh_id, "A0")
    lo0, _ = eigvalsh2(A0.values)
    if lo0.min() <= 0:
        raise AssumptionViolation("background", f"A0 is not positive definite (min eigenvalue {lo0.min():.3g})")

    pert = np.zeros((mesh.n_cells, 2, 2), dtype=complex)
    D = np.zeros(mesh.n_cells, dtype=bool)
    on_boundary = np.zeros(mesh.n_vertices, dtype=bool)
    on_boundary[mesh.boundary_edges.ravel()] = True
    touches_boundary = on_boundary[mesh.triangles].any(axis=1)
    report = []
    staged = []
    for inc in spec.inclusions:
        _hermitian_matrix(inc.perturbation, f"inclusion {inc.name} perturbation")
        if inc.core_perturbation is not None:
            _hermitian_matrix(inc.core_perturbation, f"inclusion {inc.name} core perturbation")
        mask = inc.region.contains(cent)
        if not mask.any():
            raise AssumptionViolation("empty-inclusion", f"inclusion {inc.name} covers no cell")
        if (mask & D).any():
            raise AssumptionViolation("overlap", f"inclusion {inc.name} overlaps an earlier inclusion")
        if partial and (mask & touches_boundary).any():
            raise AssumptionViolation(
                "boundary-margin", f"inclusion {inc.name} touches the boundary while Gamma is a proper arc"
            )
        w = inc.weight(cent[mask])
        pert[mask] = w[:, None, None] * inc.perturbation
        core = None
        if inc.tag == "indefinite-core":
            if inc.core_perturbation is None:
                raise ConfigError(f"[inclusion {inc.name}] indefinite-core needs core_perturbation")
            rmask = RegionMask(mask, mesh.mesh_id)
            collar = collar_cells(rmask, mesh, spec.collar)
            core = mask & ~collar
            if not core.any():
                raise AssumptionViolation(
                    "indefinite-core", f"inclusion {inc.name} has no cells inside its {spec.collar}-cell collar"
                )
            pert[core] = inc.weight(cent[core])[:, None, None] * inc.core_perturbation
        D |= mask
        staged.append((inc, mask, core))

    A_D = MatrixField(A0.values + pert, mesh.mesh_id, "A_D")
    c = spec.bounds.c
    for inc, mask, core in staged:
        entry = {"name": inc.name, "class": inc.tag, "cells": int(mask.sum())}
        m = RegionMask(mask, mesh.mesh_id)
        if inc.tag == "posdef":
            gap = loewner_gap(A0, A_D, m)
            entry["gap"] = gap
            if gap <= 0:
                raise AssumptionViolation("class-posdef", f"inclusion {inc.name}: A_D - A0 has min eigenvalue {gap:.3g}")
            if c > 0 and gap < c:
                raise AssumptionViolation("definiteness-constant", f"inclusion {inc.name}: gap {gap:.3g} < c = {c}")
        elif inc.tag == "negdef":
            gap = loewner_gap(A_D, A0, m)
            entry["gap"] = gap
            if gap <= 0:
                raise AssumptionViolation("class-negdef", f"inclusion {inc.name}: A0 - A_D has min eigenvalue {gap:.3g}")
            if c > 0 and gap < c:
                raise AssumptionViolation("definiteness-constant", f"inclusion {inc.name}: gap {gap:.3g} < c = {c}")
        else:
            collar = RegionMask(mask & ~core, mesh.mesh_id)
            up, down = loewner_gap(A0, A_D, collar), loewner_gap(A_D, A0, collar)
            sign = 1 if up > 0 else -1 if down > 0 else 0
            entry["collar_gap"] = max(up, down)
            if sign == 0:
                raise AssumptionViolation(
                    "indefinite-collar", f"inclusion {inc.name}: perturbation is not definite on the collar"
                )
            core_m = RegionMask(core, mesh.mesh_id)
            core_gap = loewner_gap(A0, A_D, core_m) if sign > 0 else loewner_gap(A_D, A0, core_m)
            entry["core_gap"] = core_gap
            if core_gap >= 0:
                raise AssumptionViolation(
                    "indefinite-core", f"inclusion {inc.name}: core is not indefinite relative to the collar"
                )
        report.append(entry)

    lo, hi = eigvalsh2(A_D.values)
    b = spec.bounds
    if lo.min() < b.alpha * (1 - 1e-12):
        raise AssumptionViolation("bounds-lower", f"A_D has eigenvalue {lo.min():.6g} < alpha = {b.alpha}")
    if hi.max() > b.beta * (1 + 1e-12):
        raise AssumptionViolation("bounds-upper", f"A_D has eigenvalue {hi.max():.6g} > beta = {b.beta}")

    basis = build_basis(mesh, spec.K)
    return Phantom(spec, mesh, A0, A_D, RegionMask(D, mesh.mesh_id), basis, report)


# ---------------------------------------------------------------------------
# twins and noise


@dataclass(eq=False)
class Twin:
    A_twin: MatrixField
    D_twin_mask: RegionMask
    phi: RadialShear


def pushforward_twin(phantom: Phantom, phi: RadialShear) -> Twin:
    """Push the phantom's coefficient forward by ``phi``; the inclusion mask
    of the twin is the set of cells whose centroid pulls back into ``D``."""
    from .coefficients import pushforward_coefficient

    mesh = phantom.mesh
    A_twin = pushforward_coefficient(phantom.coefficient_function, phi, mesh)
    pulled = phi.inverse(mesh.cell_centroids)
    if any(inc.tag == "indefinite-core" for inc in phantom.spec.inclusions):
        from .mesh import locate_points

        D = phantom.D_mask.data[locate_points(mesh, pulled)]
    else:
        D = phantom.region_contains(pulled)
    return Twin(A_twin, RegionMask(D, mesh.mesh_id), phi)


def add_noise(N: NdMatrix, delta: float, seed: int | None) -> NdMatrix:
    """``N + delta ||N||_2 H`` with ``H`` random Hermitian of unit spectral norm."""
    if delta < 0:
        raise ValueError("noise level must be nonnegative")
    if delta == 0:
        return N
    rng = np.random.default_rng(seed)
    K = N.K
    X = rng.standard_normal((K, K)) + 1j * rng.standard_normal((K, K))
    H = 0.5 * (X + X.conj().T)
    H /= np.linalg.norm(H, 2)
    return NdMatrix(N.entries + delta * N.norm * H, N.basis_id, N.label + "_noisy", N.kind)


# ---------------------------------------------------------------------------
# manifests


def inputs_hash(config_path, extra: dict | None = None) -> str:
    h = hashlib.sha256(Path(config_path).read_bytes())
    for k in sorted(extra or {}):
        h.update(f"{k}={extra[k]}".encode())
    return h.hexdigest()


def write_manifest(path, entries: dict) -> None:
    lines = []
    for k, v in entries.items():
        if isinstance(v, float):
            v = repr(v) if math.isfinite(v) else str(v)
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out
