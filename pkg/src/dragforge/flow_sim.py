"""Steady drag of a rasterized body in uniform inflow.

D2Q9 BGK lattice Boltzmann with halfway bounce-back on solid cells,
an equilibrium inlet on the left column, a zero-gradient outlet on the
right column and free-slip (specular) walls at the top and bottom. The
force on the body is accumulated by momentum exchange over every
fluid-solid link during streaming.

Everything here is in lattice units: one cell is one length unit, one
step is one time unit. ``drag_coefficient`` turns the lattice force into
the usual nondimensional coefficient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .errors import DivergenceError, GeometryError
from .geometry import (
    GridSpec,
    OccupancyMask,
    ShapeParams,
    build_boundary,
    frontal_height,
    rasterize,
)

__all__ = [
    "TAU_MIN",
    "TAU_MAX",
    "FlowConfig",
    "FlowResult",
    "DragSample",
    "simulate",
    "drag_coefficient",
    "evaluate_shape",
    "fields_to_csv",
]

log = logging.getLogger(__name__)

TAU_MIN = 0.55
TAU_MAX = 1.5

# Direction order: rest, E, N, W, S, NE, NW, SW, SE.
CX = np.array([0, 1, 0, -1, 0, 1, -1, -1, 1], dtype=np.int64)
CY = np.array([0, 0, 1, 0, -1, 1, 1, -1, -1], dtype=np.int64)
W = np.array([4 / 9] + [1 / 9] * 4 + [1 / 36] * 4)


@dataclass(frozen=True)
class FlowConfig:
    """Solver settings.

    ``viscosity`` is the nondimensional kinematic viscosity of a problem
    scaled by unit chord and unit free-stream speed, so the Reynolds number
    is ``1 / viscosity``. The lattice viscosity is chosen to match that
    Reynolds number at the given ``inflow_speed`` (a lattice speed) and grid
    resolution, and the resulting relaxation time is clamped to
    ``[TAU_MIN, TAU_MAX]``.
    """

    viscosity: float = 0.2
    inflow_speed: float = 0.08
    density: float = 1.0
    grid: GridSpec = field(default_factory=GridSpec.desk)
    max_steps: int = 40000
    drag_tolerance: float = 1e-4
    check_interval: int = 200

    def __post_init__(self):
        if not self.viscosity > 0:
            raise ValueError(f"viscosity must be positive, got {self.viscosity}")
        if not 0 < self.inflow_speed < 0.15:
            raise ValueError(
                f"inflow_speed must lie in (0, 0.15) for lattice stability, "
                f"got {self.inflow_speed}")
        if not self.density > 0:
            raise ValueError(f"density must be positive, got {self.density}")
        if not self.drag_tolerance > 0:
            raise ValueError(f"drag_tolerance must be positive, got {self.drag_tolerance}")
        if self.check_interval < 1 or self.max_steps < self.check_interval:
            raise ValueError("need 1 <= check_interval <= max_steps")

    @property
    def reynolds(self) -> float:
        return 1.0 / self.viscosity

    @property
    def lattice_viscosity(self) -> float:
        chord_cells = 1.0 / self.grid.spacing
        return self.inflow_speed * chord_cells / self.reynolds

    @property
    def tau(self) -> float:
        return float(np.clip(3.0 * self.lattice_viscosity + 0.5, TAU_MIN, TAU_MAX))

    def with_grid(self, grid: GridSpec) -> FlowConfig:
        return replace(self, grid=grid)


@dataclass(frozen=True, eq=False)
class FlowResult:
    drag_force: float
    lift_force: float
    steps_run: int
    converged: bool
    velocity_field: np.ndarray = field(repr=False)  # (nx, ny, 2)
    pressure_proxy: np.ndarray = field(repr=False)  # (nx, ny), rho / 3
    drag_history: tuple[float, ...] = field(default=(), repr=False)


@dataclass(frozen=True)
class DragSample:
    """One simulated ``(shape, C_D)`` record."""

    params: ShapeParams
    drag: float
    converged: bool


def _equilibrium(rho: float, ux: float, uy: float) -> np.ndarray:
    cu = CX * ux + CY * uy
    return W * rho * (1.0 + 3.0 * cu + 4.5 * cu * cu - 1.5 * (ux * ux + uy * uy))


# tuple copies of the lattice tables for use inside compiled kernels
_CX = (0, 1, 0, -1, 0, 1, -1, -1, 1)
_CY = (0, 0, 1, 0, -1, 1, 1, -1, -1)
_OPP = (0, 3, 4, 1, 2, 7, 8, 5, 6)
_MIR = (0, 1, 4, 3, 2, 8, 7, 6, 5)


@numba.njit(cache=True)
def _boundary_links(solid):
    """Links that streaming cannot serve from a fluid neighbour.

    Returns ``(bounce, wall)`` arrays of ``(i, j, k)`` rows: ``bounce`` for
    fluid cells whose upstream neighbour along direction ``k`` is solid,
    ``wall`` for top/bottom cells whose upstream neighbour is outside.
    """
    nx = solid.shape[0]
    ny = solid.shape[1]
    bounce = np.empty((nx * ny * 8, 3), dtype=np.int64)
    wall = np.empty((nx * 6, 3), dtype=np.int64)
    nb = 0
    nw = 0
    for i in range(1, nx - 1):
        for j in range(ny):
            if solid[i, j]:
                continue
            for k in range(1, 9):
                si = i - _CX[k]
                sj = j - _CY[k]
                if sj < 0 or sj >= ny:
                    wall[nw, 0] = i
                    wall[nw, 1] = j
                    wall[nw, 2] = k
                    nw += 1
                elif solid[si, sj]:
                    bounce[nb, 0] = i
                    bounce[nb, 1] = j
                    bounce[nb, 2] = k
                    nb += 1
    return bounce[:nb].copy(), wall[:nw].copy()


@numba.njit(cache=True)
def _advance(f, g, fluid, bounce, wall, omega, nsteps):
    """Run ``nsteps`` stream + collide steps.

    ``f`` holds post-collision populations. Column 0 is never written and
    keeps the inlet equilibrium it was initialised with. Solid cells stream
    but never collide; their populations are never read by fluid cells.
    Returns the array holding the current state, the spare array and the
    momentum-exchange force of the last step.
    """
    nx = f.shape[1]
    ny = f.shape[2]
    fx = 0.0
    fy = 0.0
    for _ in range(nsteps):
        for i in range(1, nx - 1):
            for j in range(ny):
                g[0, i, j] = f[0, i, j]
            for j in range(ny):
                g[1, i, j] = f[1, i - 1, j]
                g[3, i, j] = f[3, i + 1, j]
            for j in range(1, ny):
                g[2, i, j] = f[2, i, j - 1]
                g[5, i, j] = f[5, i - 1, j - 1]
                g[6, i, j] = f[6, i + 1, j - 1]
            for j in range(ny - 1):
                g[4, i, j] = f[4, i, j + 1]
                g[7, i, j] = f[7, i + 1, j + 1]
                g[8, i, j] = f[8, i - 1, j + 1]
        # free-slip: specular reflection at the top and bottom walls
        for n in range(wall.shape[0]):
            i = wall[n, 0]
            j = wall[n, 1]
            k = wall[n, 2]
            g[k, i, j] = f[_MIR[k], i - _CX[k], j]
        # halfway bounce-back; each link hands 2 * c * f to the body
        fx = 0.0
        fy = 0.0
        for n in range(bounce.shape[0]):
            i = bounce[n, 0]
            j = bounce[n, 1]
            k = bounce[n, 2]
            ko = _OPP[k]
            val = f[ko, i, j]
            g[k, i, j] = val
            fx += 2.0 * _CX[ko] * val
            fy += 2.0 * _CY[ko] * val
        for i in range(1, nx - 1):
            for j in range(ny):
                m = fluid[i, j]
                f0 = g[0, i, j]
                f1 = g[1, i, j]
                f2 = g[2, i, j]
                f3 = g[3, i, j]
                f4 = g[4, i, j]
                f5 = g[5, i, j]
                f6 = g[6, i, j]
                f7 = g[7, i, j]
                f8 = g[8, i, j]
                # Pairwise sums keep the update bitwise mirror-symmetric in y.
                rho = f0 + (f1 + f3) + (f2 + f4) + ((f5 + f8) + (f6 + f7))
                rho_safe = rho + (1.0 - m)
                ux = ((f1 - f3) + ((f5 + f8) - (f6 + f7))) / rho_safe
                uy = ((f2 - f4) + ((f5 - f8) + (f6 - f7))) / rho_safe
                usq = 1.5 * (ux * ux + uy * uy)
                om = omega * m
                a = 1.0 / 9.0 * rho
                b = 1.0 / 36.0 * rho
                s = ux + uy
                d = ux - uy
                g[0, i, j] = f0 + om * (4.0 / 9.0 * rho * (1.0 - usq) - f0)
                g[1, i, j] = f1 + om * (a * (1.0 + 3.0 * ux + 4.5 * ux * ux - usq) - f1)
                g[3, i, j] = f3 + om * (a * (1.0 - 3.0 * ux + 4.5 * ux * ux - usq) - f3)
                g[2, i, j] = f2 + om * (a * (1.0 + 3.0 * uy + 4.5 * uy * uy - usq) - f2)
                g[4, i, j] = f4 + om * (a * (1.0 - 3.0 * uy + 4.5 * uy * uy - usq) - f4)
                g[5, i, j] = f5 + om * (b * (1.0 + 3.0 * s + 4.5 * s * s - usq) - f5)
                g[7, i, j] = f7 + om * (b * (1.0 - 3.0 * s + 4.5 * s * s - usq) - f7)
                g[8, i, j] = f8 + om * (b * (1.0 + 3.0 * d + 4.5 * d * d - usq) - f8)
                g[6, i, j] = f6 + om * (b * (1.0 - 3.0 * d + 4.5 * d * d - usq) - f6)
        # zero-gradient outlet
        for k in range(9):
            for j in range(ny):
                g[k, nx - 1, j] = g[k, nx - 2, j]
        f, g = g, f
    return f, g, fx, fy


def _check_mask(mask: OccupancyMask, cfg: FlowConfig) -> None:
    if mask.grid != cfg.grid:
        raise GeometryError(f"mask grid {mask.grid} differs from config grid {cfg.grid}")
    s = mask.solid
    if s[:2].any() or s[-2:].any():
        raise GeometryError("solid cells touch the inlet or outlet columns")
    if s[:, 0].any() or s[:, -1].any():
        raise GeometryError("solid cells touch the top or bottom wall")


def _macroscopic(f: np.ndarray, solid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rho = f.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ux = np.tensordot(CX, f, axes=1) / rho
        uy = np.tensordot(CY, f, axes=1) / rho
    vel = np.stack([ux, uy], axis=-1)
    vel[solid] = 0.0
    rho = np.where(solid, 0.0, rho)
    return vel, rho


def simulate(mask: OccupancyMask, cfg: FlowConfig) -> FlowResult:
    """Relax the flow around ``mask`` until the drag settles.

    Convergence is declared when the drag changes by less than
    ``cfg.drag_tolerance`` (relative) between two checks ``check_interval``
    steps apart.

    Raises
    ------
    GeometryError
        Mask grid differs from ``cfg.grid`` or solid cells touch the border.
    DivergenceError
        Populations became non-finite.
    """
    _check_mask(mask, cfg)
    grid = cfg.grid
    solid = np.ascontiguousarray(mask.solid)
    fluid = (~solid).astype(np.float64)
    bounce, wall = _boundary_links(solid)
    f = np.empty((9, grid.nx, grid.ny))
    f[:] = _equilibrium(cfg.density, cfg.inflow_speed, 0.0)[:, None, None]
    f[:, solid] = _equilibrium(cfg.density, 0.0, 0.0)[:, None]
    g = f.copy()
    omega = 1.0 / cfg.tau

    steps = 0
    prev = None
    converged = False
    history = []
    fx = fy = 0.0
    while steps < cfg.max_steps:
        n = min(cfg.check_interval, cfg.max_steps - steps)
        f, g, fx, fy = _advance(f, g, fluid, bounce, wall, omega, n)
        steps += n
        if not (np.isfinite(fx) and np.isfinite(fy) and np.isfinite(f[:, ~solid]).all()):
            raise DivergenceError(
                f"populations became non-finite within {steps} steps", steps_run=steps)
        history.append(fx)
        if prev is not None:
            delta = abs(fx - prev)
            if delta == 0.0 or delta < cfg.drag_tolerance * abs(fx):
                converged = True
                break
        prev = fx
    vel, rho = _macroscopic(f, solid)
    return FlowResult(
        drag_force=float(fx),
        lift_force=float(fy),
        steps_run=steps,
        converged=converged,
        velocity_field=vel,
        pressure_proxy=rho / 3.0,
        drag_history=tuple(history),
    )


def drag_coefficient(drag_force: float, area: float, cfg: FlowConfig) -> float:
    """``C_D = F_D / (A * rho * V**2 / 2)``.

    In 2D the reference area is a length (frontal height times unit depth);
    all three of force, area and speed must be in the same unit system.
    """
    if not area > 0:
        raise ValueError(f"reference area must be positive, got {area}")
    return drag_force / (area * 0.5 * cfg.density * cfg.inflow_speed ** 2)


def evaluate_shape(params: ShapeParams, cfg: FlowConfig) -> DragSample:
    """Build, rasterize and simulate one shape.

    Geometry and divergence failures come back as a non-converged sample
    with ``drag = nan`` so that batch generation never aborts.
    """
    try:
        mask = rasterize(build_boundary(params), cfg.grid)
        res = simulate(mask, cfg)
    except (GeometryError, DivergenceError, ValueError) as exc:
        log.warning("shape %s failed: %s", params.theta, exc)
        return DragSample(params, float("nan"), False)
    area = frontal_height(params) / cfg.grid.spacing
    return DragSample(params, drag_coefficient(res.drag_force, area, cfg), res.converged)


def fields_to_csv(result: FlowResult, grid: GridSpec) -> str:
    """Per-cell ``x,y,u,v,rho`` dump (lattice velocities, rho = 3 * p)."""
    X, Y = grid.cell_centers()
    rho = 3.0 * result.pressure_proxy
    rows = ["x,y,u,v,rho"]
    u = result.velocity_field[..., 0]
    v = result.velocity_field[..., 1]
    for i in range(grid.nx):
        for j in range(grid.ny):
            rows.append(f"{X[i, j]:.6g},{Y[i, j]:.6g},{u[i, j]:.9g},{v[i, j]:.9g},{rho[i, j]:.9g}")
    return "\n".join(rows) + "\n"
