"""Geometric region descriptors.

A descriptor is a predicate on points of the plane. Descriptors compose with
``|``, ``&`` and ``-`` and can be parsed from the small text grammar used in
config files::

    disk(x, y, r)
    annulus(x, y, r_inner, r_outer)
    halfplane(wx, wy, s)            # {p : p . w <= s}
    polygon(x1, y1, x2, y2, ...)
    union(a, b, ...), intersection(a, b, ...), difference(a, b)
"""

from __future__ import annotations

import ast
from dataclasses import dataclass

import numpy as np


class DescriptorError(ValueError):
    """Raised for malformed region descriptors."""


class Region:
    def contains(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __or__(self, other: "Region") -> "Region":
        return Union((self, other))

    def __and__(self, other: "Region") -> "Region":
        return Intersection((self, other))

    def __sub__(self, other: "Region") -> "Region":
        return Difference(self, other)


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.shape[-1] != 2:
        raise ValueError("points must have shape (n, 2)")
    return pts


@dataclass(frozen=True)
class Disk(Region):
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise DescriptorError(f"disk radius must be positive, got {self.radius}")

    def contains(self, points):
        p = _as_points(points) - np.asarray(self.center)
        return np.einsum("ij,ij->i", p, p) <= self.radius**2


@dataclass(frozen=True)
class Annulus(Region):
    center: tuple[float, float]
    inner: float
    outer: float

    def __post_init__(self):
        if not 0 <= self.inner < self.outer:
            raise DescriptorError(
                f"annulus needs 0 <= inner < outer, got ({self.inner}, {self.outer})"
            )

    def contains(self, points):
        p = _as_points(points) - np.asarray(self.center)
        r2 = np.einsum("ij,ij->i", p, p)
        return (r2 >= self.inner**2) & (r2 <= self.outer**2)


@dataclass(frozen=True)
class HalfPlane(Region):
    """The set ``{x : x . direction <= offset}``."""

    direction: tuple[float, float]
    offset: float

    def __post_init__(self):
        if np.hypot(*self.direction) == 0:
            raise DescriptorError("halfplane direction must be nonzero")

    def contains(self, points):
        return _as_points(points) @ np.asarray(self.direction, dtype=float) <= self.offset


@dataclass(frozen=True)
class Polygon(Region):
    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise DescriptorError("polygon needs at least 3 vertices")

    def contains(self, points):
        # even-odd ray casting
        p = _as_points(points)
        v = np.asarray(self.vertices, dtype=float)
        x, y = p[:, 0], p[:, 1]
        inside = np.zeros(len(p), dtype=bool)
        for (x0, y0), (x1, y1) in zip(v, np.roll(v, -1, axis=0)):
            crosses = (y0 > y) != (y1 > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            inside ^= crosses & (x < xc)
        return inside


@dataclass(frozen=True)
class Union(Region):
    parts: tuple[Region, ...]

    def contains(self, points):
        p = _as_points(points)
        out = np.zeros(len(p), dtype=bool)
        for part in self.parts:
            out |= part.contains(p)
        return out


@dataclass(frozen=True)
class Intersection(Region):
    parts: tuple[Region, ...]

    def contains(self, points):
        p = _as_points(points)
        out = np.ones(len(p), dtype=bool)
        for part in self.parts:
            out &= part.contains(p)
        return out


@dataclass(frozen=True)
class Difference(Region):
    base: Region
    removed: Region

    def contains(self, points):
        p = _as_points(points)
        return self.base.contains(p) & ~self.removed.contains(p)


def _number(node: ast.AST) -> float:
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        value = _number(node.operand)
        return -value if isinstance(node.op, ast.USub) else value
    raise DescriptorError(f"expected a number, got {ast.unparse(node)!r}")


def _build(node: ast.AST) -> Region:
    if not isinstance(node, ast.Call) or not isinstance(node.func, ast.Name):
        raise DescriptorError(f"expected a descriptor call, got {ast.unparse(node)!r}")
    if node.keywords:
        raise DescriptorError("descriptor arguments are positional only")
    name = node.func.id
    args = node.args
    if name in ("union", "intersection"):
        if len(args) < 2:
            raise DescriptorError(f"{name} needs at least two operands")
        parts = tuple(_build(a) for a in args)
        return Union(parts) if name == "union" else Intersection(parts)
    if name == "difference":
        if len(args) != 2:
            raise DescriptorError("difference takes exactly two operands")
        return Difference(_build(args[0]), _build(args[1]))

    nums = [_number(a) for a in args]
    if name == "disk":
        if len(nums) != 3:
            raise DescriptorError("disk(x, y, r) takes 3 numbers")
        return Disk((nums[0], nums[1]), nums[2])
    if name == "annulus":
        if len(nums) != 4:
            raise DescriptorError("annulus(x, y, r1, r2) takes 4 numbers")
        return Annulus((nums[0], nums[1]), nums[2], nums[3])
    if name == "halfplane":
        if len(nums) != 3:
            raise DescriptorError("halfplane(wx, wy, s) takes 3 numbers")
        return HalfPlane((nums[0], nums[1]), nums[2])
    if name == "polygon":
        if len(nums) < 6 or len(nums) % 2:
            raise DescriptorError("polygon takes an even count (>= 6) of coordinates")
        return Polygon(tuple(zip(nums[0::2], nums[1::2])))
    raise DescriptorError(f"unknown descriptor {name!r}")


def parse_region(text: str) -> Region:
    """Parse a descriptor expression such as ``union(disk(0,0,0.2), disk(0.5,0,0.1))``."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise DescriptorError(f"malformed descriptor {text!r}: {exc.msg}") from None
    return _build(tree.body)
