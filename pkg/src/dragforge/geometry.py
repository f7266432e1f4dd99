"""Shape parameterization, boundary curves and rasterization.

A shape is described by four control heights ``theta`` placed at the chord
stations 0.2, 0.4, 0.6 and 0.8 of a unit chord. The leading and trailing
edges are pinned at zero height. The upper profile is the natural cubic
spline through those six points and the lower profile is its mirror image,
so every shape is symmetric about the x-axis.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import DegenerateShapeError, OutOfBoundsError, ParseError

__all__ = [
    "BOX_LOWER_FACTOR",
    "STATIONS",
    "ShapeParams",
    "BoundaryCurve",
    "GridSpec",
    "OccupancyMask",
    "sampling_box",
    "upper_spline",
    "build_boundary",
    "rasterize",
    "enclosed_area",
    "frontal_height",
]

#: Lower edge of the sampling box as a fraction of the case width.
BOX_LOWER_FACTOR = 0.25

#: Chord stations of the four control heights.
STATIONS = (0.2, 0.4, 0.6, 0.8)

_KNOTS_X = np.array((0.0,) + STATIONS + (1.0,))


def sampling_box(width: float) -> tuple[float, float]:
    """Return the ``(low, high)`` bounds shared by every theta component."""
    return BOX_LOWER_FACTOR * width, width


@dataclass(frozen=True)
class ShapeParams:
    """Four control heights plus the case width.

    The sampling box ``[0.25*width, width]`` is not enforced here because
    synthetic models and tests evaluate points outside it; call
    :meth:`box_violation` where the box matters.
    """

    theta: tuple[float, float, float, float]
    width: float

    def __post_init__(self):
        theta = tuple(float(t) for t in self.theta)
        if len(theta) != 4:
            raise ValueError(f"theta needs 4 components, got {len(theta)}")
        if not all(np.isfinite(theta)):
            raise ValueError(f"theta must be finite, got {theta}")
        if not (np.isfinite(self.width) and self.width > 0):
            raise ValueError(f"width must be positive, got {self.width}")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "width", float(self.width))

    def as_vector(self) -> np.ndarray:
        """The 5-vector ``(theta1..theta4, width)`` fed to the surrogates."""
        return np.array(self.theta + (self.width,))

    @classmethod
    def from_vector(cls, vec: Sequence[float]) -> ShapeParams:
        return cls(tuple(vec[:4]), vec[4])

    def box_violation(self, rel_tol: float = 1e-12) -> int | None:
        """Index of the first theta outside the sampling box, else None."""
        lo, hi = sampling_box(self.width)
        slack = rel_tol * self.width
        for i, t in enumerate(self.theta):
            if t < lo - slack or t > hi + slack:
                return i
        return None

    def clamped(self) -> ShapeParams:
        lo, hi = sampling_box(self.width)
        return ShapeParams(tuple(np.clip(self.theta, lo, hi)), self.width)


@dataclass(frozen=True, eq=False)
class BoundaryCurve:
    """Closed, counterclockwise polyline; ``points`` has shape ``(n, 2)``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __eq__(self, other):
        if not isinstance(other, BoundaryCurve):
            return NotImplemented
        return np.array_equal(self.points, other.points)

    @property
    def x(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.points[:, 1]

    def signed_area(self) -> float:
        """Shoelace area; positive for counterclockwise curves."""
        x, y = self.x, self.y
        return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("x,y\n")
        for px, py in self.points:
            buf.write(f"{px:.17g},{py:.17g}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> BoundaryCurve:
        lines = text.splitlines()
        if not lines or lines[0].strip() != "x,y":
            raise ParseError("expected header 'x,y'", 1)
        pts = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ParseError(f"expected 2 columns, got {len(parts)}", lineno)
            try:
                pts.append((float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
        return cls(np.array(pts))


@dataclass(frozen=True)
class GridSpec:
    """Uniform cell grid; cell ``(i, j)`` is centred at
    ``origin + ((i + 0.5) * spacing, (j + 0.5) * spacing)``."""

    nx: int
    ny: int
    spacing: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise ValueError(f"grid needs at least 8x8 cells, got {self.nx}x{self.ny}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @classmethod
    def desk(cls) -> GridSpec:
        """160x80 cells, chord = 100 cells, leading edge 25 cells from the
        inlet, chord line on the domain's horizontal mid-line."""
        return cls(160, 80, 0.01, (-0.25, -0.4))

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """``(xmin, xmax, ymin, ymax)`` of the grid's outer edges."""
        x0, y0 = self.origin
        return (x0, x0 + self.nx * self.spacing, y0, y0 + self.ny * self.spacing)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Center coordinates, each of shape ``(nx, ny)``."""
        x0, y0 = self.origin
        xs = x0 + (np.arange(self.nx) + 0.5) * self.spacing
        ys = y0 + (np.arange(self.ny) + 0.5) * self.spacing
        return np.meshgrid(xs, ys, indexing="ij")

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        x0, y0 = self.origin
        i = int(np.floor((x - x0) / self.spacing))
        j = int(np.floor((y - y0) / self.spacing))
        if not (0 <= i < self.nx and 0 <= j < self.ny):
            raise OutOfBoundsError(f"point ({x}, {y}) lies outside the grid")
        return i, j

    def refined(self, factor: int = 2) -> GridSpec:
        return GridSpec(self.nx * factor, self.ny * factor,
                        self.spacing / factor, self.origin)


@dataclass(frozen=True, eq=False)
class OccupancyMask:
    """Boolean raster indexed ``solid[i, j]`` with ``i`` along x."""

    grid: GridSpec
    solid: np.ndarray = field(repr=False)

    def __post_init__(self):
        solid = np.array(self.solid, dtype=bool)
        if solid.shape != (self.grid.nx, self.grid.ny):
            raise ValueError(
                f"mask shape {solid.shape} does not match grid "
                f"({self.grid.nx}, {self.grid.ny})")
        solid.setflags(write=False)
        object.__setattr__(self, "solid", solid)

    def __eq__(self, other):
        if not isinstance(other, OccupancyMask):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.solid, other.solid)

    @classmethod
    def empty(cls, grid: GridSpec) -> OccupancyMask:
        return cls(grid, np.zeros((grid.nx, grid.ny), dtype=bool))

    @property
    def count(self) -> int:
        return int(self.solid.sum())

    def mirrored(self) -> OccupancyMask:
        """Reflect about the grid's horizontal mid-line."""
        return OccupancyMask(self.grid, self.solid[:, ::-1])

    def to_pgm(self) -> str:
        """Plain-text 0/1 raster, top row first (largest y), ``P1`` header."""
        rows = self.solid.T[::-1].astype(int)
        lines = [f"P1", f"{self.grid.nx} {self.grid.ny}"]
        lines += [" ".join(map(str, row)) for row in rows]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_pgm(cls, text: str, grid: GridSpec) -> OccupancyMask:
        lines = [ln for ln in text.splitlines()]
        if not lines or lines[0].strip() != "P1":
            raise ParseError("expected 'P1' header", 1)
        try:
            nx, ny = (int(v) for v in lines[1].split())
        except (IndexError, ValueError):
            raise ParseError("expected '<nx> <ny>'", 2) from None
        if (nx, ny) != (grid.nx, grid.ny):
            raise ParseError(f"raster is {nx}x{ny}, grid is {grid.nx}x{grid.ny}", 2)
        rows = []
        for lineno, line in enumerate(lines[2:], start=3):
            if not line.strip():
                continue
            vals = line.split()
            if len(vals) != nx or any(v not in ("0", "1") for v in vals):
                raise ParseError(f"expected {nx} values of 0/1", lineno)
            rows.append([v == "1" for v in vals])
        if len(rows) != ny:
            raise ParseError(f"expected {ny} rows, got {len(rows)}", len(lines))
        return cls(grid, np.array(rows[::-1], dtype=bool).T)


def upper_spline(params: ShapeParams) -> CubicSpline:
    """Natural cubic spline through the pinned edges and control heights."""
    knots_y = np.array((0.0,) + params.theta + (0.0,))
    return CubicSpline(_KNOTS_X, knots_y, bc_type="natural")


def build_boundary(params: ShapeParams, samples_per_side: int = 128) -> BoundaryCurve:
    """Trace the closed boundary of a shape.

    The curve starts at the leading edge, runs along the lower profile to the
    trailing edge and returns along the upper profile, which makes it
    counterclockwise. The control stations are always included among the
    sample abscissae so the curve interpolates them exactly.

    Parameters
    ----------
    params : ShapeParams
        Control heights; all must be strictly positive.
    samples_per_side : int
        Minimum number of abscissae per profile (at least 16).
    """
    if samples_per_side < 16:
        raise ValueError(f"samples_per_side must be >= 16, got {samples_per_side}")
    bad = [i for i, t in enumerate(params.theta) if t <= 0]
    if bad:
        raise DegenerateShapeError(
            f"theta[{bad[0]}] = {params.theta[bad[0]]} is not positive")
    xs = np.union1d(np.linspace(0.0, 1.0, samples_per_side), _KNOTS_X)
    ys = np.maximum(upper_spline(params)(xs), 0.0)
    # Knot ordinates are reproduced exactly rather than to spline round-off.
    knot_idx = np.searchsorted(xs, _KNOTS_X)
    ys[knot_idx] = (0.0,) + params.theta + (0.0,)
    lower = np.column_stack([xs, -ys])
    upper = np.column_stack([xs[::-1], ys[::-1]])[1:]
    pts = np.vstack([lower, upper])
    pts[-1] = pts[0]
    return BoundaryCurve(pts)


def _even_odd(px: np.ndarray, py: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Even-odd test on a rectilinear block of points, one scanline per column
    of ``ys``. A point is inside when an odd number of edge crossings on its
    scanline lie strictly to its right."""
    a, b, c, d = px[:-1], py[:-1], px[1:], py[1:]
    keep = b != d
    a, b, c, d = a[keep], b[keep], c[keep], d[keep]
    xcol = xs[:, 0]
    inside = np.zeros(xs.shape, dtype=bool)
    for j, y in enumerate(ys[0]):
        crosses = (b > y) != (d > y)
        if not crosses.any():
            continue
        xint = np.sort(a[crosses] + (y - b[crosses]) * (c[crosses] - a[crosses])
                       / (d[crosses] - b[crosses]))
        right = len(xint) - np.searchsorted(xint, xcol, side="right")
        inside[:, j] = (right % 2) == 1
    return inside


def rasterize(curve: BoundaryCurve, grid: GridSpec) -> OccupancyMask:
    """Mark every cell whose center lies inside ``curve`` (even-odd rule).

    Raises
    ------
    OutOfBoundsError
        If the curve's bounding box touches or crosses the grid's outer edge.
    """
    xmin, xmax, ymin, ymax = grid.extent
    px, py = curve.x, curve.y
    if not (px.min() > xmin and px.max() < xmax and py.min() > ymin and py.max() < ymax):
        raise OutOfBoundsError(
            f"curve bbox [{px.min()}, {px.max()}]x[{py.min()}, {py.max()}] "
            f"is not strictly inside grid extent {grid.extent}")
    x0, y0 = grid.origin
    h = grid.spacing
    # Only cells whose centers fall in the bounding box can be inside.
    i0 = max(int(np.floor((px.min() - x0) / h - 0.5)), 0)
    i1 = min(int(np.ceil((px.max() - x0) / h - 0.5)) + 1, grid.nx)
    j0 = max(int(np.floor((py.min() - y0) / h - 0.5)), 0)
    j1 = min(int(np.ceil((py.max() - y0) / h - 0.5)) + 1, grid.ny)
    X, Y = grid.cell_centers()
    solid = np.zeros((grid.nx, grid.ny), dtype=bool)
    solid[i0:i1, j0:j1] = _even_odd(px, py, X[i0:i1, j0:j1], Y[i0:i1, j0:j1])
    return OccupancyMask(grid, solid)


def enclosed_area(mask: OccupancyMask) -> float:
    """Solid cell count times the cell area."""
    return mask.count * mask.grid.spacing ** 2


def frontal_height(params: ShapeParams) -> float:
    """Total thickness presented to the flow, ``2 * max_x y(x)``.

    The maximum is taken over the spline's stationary points and the knots,
    so it is exact up to root-finding precision.
    """
    spline = upper_spline(params)
    roots = spline.derivative().roots(extrapolate=False)
    xs = np.concatenate([_KNOTS_X, roots[(roots >= 0) & (roots <= 1)]])
    return 2.0 * float(max(spline(xs).max(), 0.0))
