from __future__ import annotations

import math

import numpy as np
import pytest

from dragforge import flow_sim
from dragforge.errors import DivergenceError, GeometryError
from dragforge.flow_sim import (
    TAU_MAX,
    TAU_MIN,
    FlowConfig,
    drag_coefficient,
    evaluate_shape,
    fields_to_csv,
    simulate,
)
from dragforge.geometry import GridSpec, OccupancyMask, ShapeParams

SMALL = GridSpec(64, 32, 0.025, (-0.25, -0.4))


def ellipse_mask(grid: GridSpec, height: float, length: float = 1.0, x0: float = 0.5,
                 y0: float = 0.0) -> OccupancyMask:
    X, Y = grid.cell_centers()
    solid = ((X - x0) / (length / 2)) ** 2 + ((Y - y0) / (height / 2)) ** 2 < 1.0
    return OccupancyMask(grid, solid)


@pytest.fixture(scope="module")
def small_cfg():
    return FlowConfig(grid=SMALL, max_steps=8000)


class TestFlowConfig:
    def test_reynolds_and_tau(self):
        cfg = FlowConfig(viscosity=0.01)
        assert cfg.reynolds == pytest.approx(100.0)
        assert cfg.lattice_viscosity == pytest.approx(0.08 * 100 / 100)
        assert cfg.tau == pytest.approx(3 * 0.08 + 0.5)

    def test_tau_is_clamped(self):
        assert FlowConfig(viscosity=0.2).tau == TAU_MAX
        assert FlowConfig(viscosity=1e-5).tau == TAU_MIN

    @pytest.mark.parametrize("kw", [dict(viscosity=0.0), dict(inflow_speed=0.2),
                                    dict(inflow_speed=0.0), dict(density=-1.0),
                                    dict(drag_tolerance=0.0),
                                    dict(check_interval=500, max_steps=100)])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            FlowConfig(**kw)


class TestDragCoefficient:
    def test_unit_denominator(self):
        cfg = FlowConfig(density=2.0, inflow_speed=0.1)
        # rho V^2 / 2 = 0.01, so F = 0.01 on unit area gives 1
        assert drag_coefficient(0.01, 1.0, cfg) == pytest.approx(1.0)

    def test_definition(self):
        cfg = FlowConfig(density=2.0, inflow_speed=0.1)
        assert drag_coefficient(1.0, 1.0, cfg) == pytest.approx(1.0 / (1.0 * 2.0 * 0.01 / 2))

    def test_zero_force(self):
        assert drag_coefficient(0.0, 3.0, FlowConfig()) == 0.0

    def test_rejects_nonpositive_area(self):
        with pytest.raises(ValueError):
            drag_coefficient(1.0, 0.0, FlowConfig())


class TestSimulate:
    def test_empty_mask_has_no_drag(self, small_cfg):
        res = simulate(OccupancyMask.empty(SMALL), small_cfg)
        assert abs(res.drag_force) < 1e-10
        assert abs(res.lift_force) < 1e-10
        assert res.converged

    def test_symmetric_mask_has_no_lift(self, small_cfg):
        res = simulate(ellipse_mask(SMALL, 0.2), small_cfg)
        assert res.converged
        assert res.drag_force > 0
        assert abs(res.lift_force) <= 1e-8 * abs(res.drag_force) + 1e-10

    def test_mirroring_negates_lift(self, small_cfg):
        mask = ellipse_mask(SMALL, 0.15, y0=0.06)
        a = simulate(mask, small_cfg)
        b = simulate(mask.mirrored(), small_cfg)
        assert abs(a.lift_force) > 1e-6
        assert b.drag_force == pytest.approx(a.drag_force, rel=1e-10)
        assert b.lift_force == pytest.approx(-a.lift_force, rel=1e-10)

    def test_deterministic(self, small_cfg):
        mask = ellipse_mask(SMALL, 0.15, y0=0.03)
        a = simulate(mask, small_cfg)
        b = simulate(mask, small_cfg)
        assert a.drag_force == b.drag_force and a.lift_force == b.lift_force
        assert np.array_equal(a.velocity_field, b.velocity_field)
        assert a.drag_history == b.drag_history

    def test_fields_are_finite(self, small_cfg):
        res = simulate(ellipse_mask(SMALL, 0.2), small_cfg)
        assert res.velocity_field.shape == (SMALL.nx, SMALL.ny, 2)
        assert np.isfinite(res.velocity_field).all()
        assert np.isfinite(res.pressure_proxy).all()
        assert res.steps_run <= small_cfg.max_steps

    def test_viscosity_sweep_is_monotone(self):
        mask = ellipse_mask(SMALL, 0.2)
        cds = []
        for nu in (0.02, 0.04, 0.08):
            cfg = FlowConfig(viscosity=nu, grid=SMALL, max_steps=8000)
            cds.append(simulate(mask, cfg).drag_force)
        assert cds[0] < cds[1] < cds[2]

    def test_fatter_ellipse_has_more_drag(self):
        cfg = FlowConfig()
        thin = simulate(ellipse_mask(cfg.grid, 0.1), cfg)
        fat = simulate(ellipse_mask(cfg.grid, 0.2), cfg)
        assert thin.converged and fat.converged
        assert fat.drag_force > thin.drag_force

    def test_solid_on_inlet_column(self, small_cfg):
        solid = np.zeros((SMALL.nx, SMALL.ny), dtype=bool)
        solid[0, 10:20] = True
        with pytest.raises(GeometryError):
            simulate(OccupancyMask(SMALL, solid), small_cfg)

    def test_solid_on_wall_row(self, small_cfg):
        solid = np.zeros((SMALL.nx, SMALL.ny), dtype=bool)
        solid[20:30, 0] = True
        with pytest.raises(GeometryError):
            simulate(OccupancyMask(SMALL, solid), small_cfg)

    def test_grid_mismatch(self, small_cfg):
        with pytest.raises(GeometryError):
            simulate(OccupancyMask.empty(GridSpec.desk()), small_cfg)

    def test_non_finite_populations_raise(self, small_cfg, monkeypatch):
        def poisoned(f, g, fluid, bounce, wall, omega, nsteps):
            f[:] = np.nan
            return f, g, math.nan, 0.0

        monkeypatch.setattr(flow_sim, "_advance", poisoned)
        with pytest.raises(DivergenceError):
            simulate(ellipse_mask(SMALL, 0.2), small_cfg)

    def test_field_dump(self, small_cfg):
        res = simulate(OccupancyMask.empty(SMALL), small_cfg)
        lines = fields_to_csv(res, SMALL).splitlines()
        assert lines[0] == "x,y,u,v,rho"
        assert len(lines) == 1 + SMALL.nx * SMALL.ny
        u = float(lines[1].split(",")[2])
        assert u == pytest.approx(small_cfg.inflow_speed, rel=1e-6)


def _cylinder_cd(grid: GridSpec) -> float:
    X, Y = grid.cell_centers()
    diameter = 0.2 * grid.ny * grid.spacing
    solid = (X - 0.3) ** 2 + Y ** 2 < (diameter / 2) ** 2
    # Re_D = 40 with the chord-based mapping means viscosity = D / 40
    cfg = FlowConfig(viscosity=diameter / 40, grid=grid)
    res = simulate(OccupancyMask(grid, solid), cfg)
    assert res.converged
    return drag_coefficient(res.drag_force, diameter / grid.spacing, cfg)


@pytest.fixture(scope="module")
def cylinder_cds():
    return _cylinder_cd(GridSpec.desk()), _cylinder_cd(GridSpec.desk().refined(2))


@pytest.mark.slow
def test_cylinder_drag_is_grid_converged(cylinder_cds):
    coarse, fine = cylinder_cds
    assert abs(coarse - fine) <= 0.15 * fine


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason=(
    "the cylinder blocks 20% of a free-slip channel; confinement lifts C_D to about "
    "2.2-2.3 on both grids, above the unconfined-flow band [1.2, 2.0]"))
def test_cylinder_drag_in_reference_band(cylinder_cds):
    coarse, fine = cylinder_cds
    assert 1.2 <= coarse <= 2.0 and 1.2 <= fine <= 2.0


class TestEvaluateShape:
    def test_positive_and_repeatable(self):
        p = ShapeParams((0.09, 0.12, 0.1, 0.07), 0.18)
        a = evaluate_shape(p, FlowConfig())
        b = evaluate_shape(p, FlowConfig())
        assert a.converged and a.drag > 0
        assert a.drag == b.drag

    def test_geometry_failure_becomes_nonconverged(self):
        # a width this large pushes the shape through the walls
        p = ShapeParams((0.5, 0.5, 0.5, 0.5), 0.5)
        s = evaluate_shape(p, FlowConfig())
        assert not s.converged and math.isnan(s.drag)

    def test_divergence_becomes_nonconverged(self, monkeypatch):
        def boom(mask, cfg):
            raise DivergenceError("blew up")

        monkeypatch.setattr(flow_sim, "simulate", boom)
        s = evaluate_shape(ShapeParams((0.1,) * 4, 0.18), FlowConfig())
        assert not s.converged and math.isnan(s.drag)


@pytest.fixture(scope="module")
def box_corners():
    cfg = FlowConfig()
    lo = ShapeParams((0.045,) * 4, 0.18)
    hi = ShapeParams((0.18,) * 4, 0.18)
    return lo, hi, evaluate_shape(lo, cfg), evaluate_shape(hi, cfg)


def test_box_maximum_has_more_drag_force(box_corners):
    from dragforge.geometry import frontal_height

    lo, hi, thin, fat = box_corners
    assert thin.converged and fat.converged
    # C_D times the reference height is proportional to the force
    assert fat.drag * frontal_height(hi) > thin.drag * frontal_height(lo)


@pytest.mark.xfail(strict=True, reason=(
    "at desk-scale Reynolds numbers drag is friction dominated; dividing by the "
    "frontal height gives the thin corner the larger C_D (about 21.4 vs 16.7)"))
def test_box_maximum_has_larger_cd(box_corners):
    _, _, thin, fat = box_corners
    assert fat.drag > thin.drag
