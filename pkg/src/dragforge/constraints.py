"""Required-region constraints: flood-fill containment and a noisy descent
that only ever moves between shapes enclosing the region."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InfeasibleConstraintError
from .geometry import GridSpec, OccupancyMask, ShapeParams, build_boundary, rasterize, sampling_box
from .surrogate import MlpModel, mlp_forward, mlp_input_gradient

__all__ = [
    "RequiredRegion",
    "SgldConfig",
    "StepRecord",
    "ConstrainedResult",
    "flood_fill",
    "containment",
    "half_gaussian_step",
    "constrained_minimize",
    "region_from_rects",
    "region_from_json",
    "region_from_pgm",
]

N_PROBES = 64
MIN_STEP_SCALE = 1e-12

def _flood(solid: np.ndarray, seed: tuple[int, int]) -> np.ndarray:
    nx, ny = solid.shape
    i0, j0 = (int(v) for v in seed)
    if not (0 <= i0 < nx and 0 <= j0 < ny):
        raise ValueError(f"seed cell {seed} outside a {nx}x{ny} grid")
    if solid[i0, j0]:
        raise ValueError(f"seed cell {seed} is solid")
    # flat index k = i * ny + j; ``visited`` starts as a copy of the walls
    visited = bytearray(np.ascontiguousarray(solid, dtype=np.uint8).tobytes())
    reached = []
    start = i0 * ny + j0
    visited[start] = 1
    queue = deque([start])
    last_row = (nx - 1) * ny
    while queue:
        k = queue.popleft()
        reached.append(k)
        j = k % ny
        if k >= ny and not visited[k - ny]:
            visited[k - ny] = 1
            queue.append(k - ny)
        if k < last_row and not visited[k + ny]:
            visited[k + ny] = 1
            queue.append(k + ny)
        if j > 0 and not visited[k - 1]:
            visited[k - 1] = 1
            queue.append(k - 1)
        if j < ny - 1 and not visited[k + 1]:
            visited[k + 1] = 1
            queue.append(k + 1)
    out = np.zeros(nx * ny, dtype=bool)
    out[reached] = True
    return out.reshape(nx, ny)


def flood_fill(mask: OccupancyMask | np.ndarray, seed_cell: tuple[int, int]
               ) -> OccupancyMask | np.ndarray:
    """Cells 4-connected to ``seed_cell`` through non-solid cells.

    Accepts an OccupancyMask (returns one) or a raw boolean solid array of
    any shape (returns a boolean array).

    Raises
    ------
    ValueError
        ``seed_cell`` is outside the grid or solid.
    """
    if isinstance(mask, OccupancyMask):
        return OccupancyMask(mask.grid, _flood(mask.solid, tuple(seed_cell)))
    return _flood(np.asarray(mask, dtype=bool), tuple(seed_cell))


def _is_connected(cells: np.ndarray) -> bool:
    idx = np.argwhere(cells)
    reached = _flood(~cells, tuple(idx[0]))
    return bool(np.array_equal(reached, cells))


@dataclass(frozen=True)
class RequiredRegion:
    """Non-empty, 4-connected set of cells the final shape must enclose."""

    mask: OccupancyMask

    def __post_init__(self):
        if self.mask.count == 0:
            raise ValueError("required region is empty")
        if not _is_connected(self.mask.solid):
            raise ValueError("required region is not 4-connected")


def region_from_rects(rects: Sequence[dict], grid: GridSpec) -> RequiredRegion:
    """Cells whose centres fall inside any ``{x, y, w, h}`` rectangle
    (``x, y`` is the lower-left corner)."""
    X, Y = grid.cell_centers()
    cells = np.zeros((grid.nx, grid.ny), dtype=bool)
    for r in rects:
        try:
            x, y, w, h = (float(r[k]) for k in ("x", "y", "w", "h"))
        except KeyError as exc:
            raise ValueError(f"rectangle missing field {exc.args[0]!r}") from None
        if w <= 0 or h <= 0:
            raise ValueError("rectangle width and height must be positive")
        cells |= (X >= x) & (X <= x + w) & (Y >= y) & (Y <= y + h)
    return RequiredRegion(OccupancyMask(grid, cells))


def region_from_json(text: str, grid: GridSpec) -> RequiredRegion:
    data = json.loads(text)
    if isinstance(data, dict):
        data = [data]
    return region_from_rects(data, grid)


def region_from_pgm(text: str, grid: GridSpec) -> RequiredRegion:
    mask = OccupancyMask.from_pgm(text, grid)
    return RequiredRegion(mask)


def _boundary_ring(solid: np.ndarray) -> np.ndarray:
    padded = np.pad(solid, 1, constant_values=False)
    interior = (padded[2:, 1:-1] & padded[:-2, 1:-1] & padded[1:-1, 2:] & padded[1:-1, :-2])
    return solid & ~interior


def containment(candidate: ShapeParams, required: RequiredRegion, grid: GridSpec) -> int:
    """0 when the candidate's raster encloses every required cell, else 1.

    Enclosure is checked twice: every required cell must be solid, and a
    flood fill started from a required cell, with the candidate's outline
    cells as walls, must not reach the grid border.
    """
    if required.mask.grid != grid:
        raise ValueError("required region lives on a different grid")
    solid = rasterize(build_boundary(candidate), grid).solid
    req = required.mask.solid
    if not np.all(solid[req]):
        return 1
    walls = _boundary_ring(solid)
    seeds = np.argwhere(req & ~walls)
    if len(seeds) == 0:
        return 0
    reached = _flood(walls, tuple(seeds[0]))
    escaped = reached[0, :].any() or reached[-1, :].any() or reached[:, 0].any() or reached[:, -1].any()
    return int(bool(escaped))


@dataclass(frozen=True)
class SgldConfig:
    """Noisy-descent settings. ``step_size`` multiplies the gradient and
    ``noise_scale`` is the per-coordinate standard deviation."""

    step_size: float
    noise_scale: float
    iterations: int = 5000
    seed: int = 0
    max_resamples: int = 50

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not self.noise_scale >= 0:
            raise ValueError("noise_scale must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.max_resamples < 0:
            raise ValueError("max_resamples must be >= 0")

    @classmethod
    def for_width(cls, width: float, **overrides) -> SgldConfig:
        """Defaults scaled by the case width: step ``1e-3 w``, noise ``0.05 w``."""
        kw = dict(step_size=1e-3 * width, noise_scale=0.05 * width)
        kw.update(overrides)
        return cls(**kw)


def _clamp_theta(theta: np.ndarray, width: float) -> np.ndarray:
    lo, hi = sampling_box(width)
    return np.clip(theta, lo, hi)


def _noisy_step(theta: np.ndarray, g: np.ndarray, width: float, eta: float,
                sigma: float, rng: np.random.Generator) -> np.ndarray | None:
    """One draw of the clamped displacement, or None if it points uphill.

    The angular filter is applied to the displacement actually taken, after
    clamping, so that accepted steps never oppose the descent direction.
    """
    n = rng.normal(0.0, sigma, size=4) if sigma > 0 else np.zeros(4)
    d = _clamp_theta(theta - eta * g + n, width) - theta
    return d if float(d @ -g) >= 0.0 else None


def _gradient_step(theta: np.ndarray, g: np.ndarray, width: float, eta: float) -> np.ndarray:
    # a clamped gradient step never opposes -g coordinatewise
    return _clamp_theta(theta - eta * g, width) - theta


def half_gaussian_step(r: ShapeParams, grad, cfg: SgldConfig,
                       rng: np.random.Generator) -> ShapeParams:
    """One noisy descent step on theta, filtered to stay within 90 degrees of
    the negative gradient and clamped to the sampling box.

    After ``max_resamples`` rejected redraws the plain gradient step is used.
    """
    theta = np.array(r.theta)
    g = np.asarray(grad, dtype=float)[:4]
    for _ in range(cfg.max_resamples + 1):
        d = _noisy_step(theta, g, r.width, cfg.step_size, cfg.noise_scale, rng)
        if d is not None:
            break
    else:
        d = _gradient_step(theta, g, r.width, cfg.step_size)
    return ShapeParams(tuple((theta + d).tolist()), r.width)


@dataclass(frozen=True)
class StepRecord:
    iteration: int
    theta: tuple[float, ...]
    step: tuple[float, ...]
    grad: tuple[float, ...]
    predicted: float
    best_predicted: float
    redraws: int
    fallback: bool


@dataclass(frozen=True)
class ConstrainedResult:
    params: ShapeParams
    predicted_drag: float
    trajectory: tuple[StepRecord, ...] = field(repr=False)

    def __iter__(self):
        return iter((self.params, self.predicted_drag))


def _predict(m: MlpModel, p: ShapeParams) -> float:
    return float(mlp_forward(m, p))


def constrained_minimize(m: MlpModel, required: RequiredRegion, width: float,
                         cfg: SgldConfig, grid: GridSpec) -> ConstrainedResult:
    """Minimize the model prediction over shapes that enclose ``required``.

    Starts from the best feasible of 64 seeded probes (the box maximum
    corner plus uniform draws). Infeasible proposals are redrawn; once the
    redraw budget is spent a pure gradient step is halved until feasible,
    and the iterate stays put if none is found.

    Raises
    ------
    InfeasibleConstraintError
        Even the largest shape in the sampling box misses the region.
    """
    lo, hi = sampling_box(width)
    rng = np.random.default_rng(cfg.seed)
    corner = ShapeParams((hi,) * 4, width)
    if containment(corner, required, grid):
        raise InfeasibleConstraintError(
            "the largest shape in the sampling box does not enclose the required region")
    probes = [corner] + [ShapeParams(tuple(t), width)
                         for t in rng.uniform(lo, hi, size=(N_PROBES - 1, 4)).tolist()]
    feasible = [p for p in probes if containment(p, required, grid) == 0]
    preds = [_predict(m, p) for p in feasible]
    k = int(np.argmin(preds))
    r, pred = feasible[k], preds[k]
    best, best_pred = r, pred
    trajectory = []
    for it in range(1, cfg.iterations + 1):
        grad = mlp_input_gradient(m, r)
        g = grad[:4]
        theta = np.array(r.theta)
        accepted = None
        redraws = 0
        for redraws in range(cfg.max_resamples + 1):
            d = _noisy_step(theta, g, width, cfg.step_size, cfg.noise_scale, rng)
            if d is not None:
                cand = ShapeParams(tuple((theta + d).tolist()), width)
                if containment(cand, required, grid) == 0:
                    accepted = (cand, d)
                    break
            if cfg.noise_scale == 0:
                break
        fallback = accepted is None
        eta = cfg.step_size
        while accepted is None and eta * float(np.linalg.norm(g)) >= MIN_STEP_SCALE:
            d = _gradient_step(theta, g, width, eta)
            cand = ShapeParams(tuple((theta + d).tolist()), width)
            if containment(cand, required, grid) == 0:
                accepted = (cand, d)
            eta /= 2
        if accepted is None:
            accepted = (r, np.zeros(4))
        r, d = accepted
        pred = _predict(m, r)
        if pred < best_pred:
            best, best_pred = r, pred
        trajectory.append(StepRecord(it, r.theta, tuple(d.tolist()), tuple(g.tolist()),
                                     pred, best_pred, redraws, fallback))
    return ConstrainedResult(best, best_pred, tuple(trajectory))
