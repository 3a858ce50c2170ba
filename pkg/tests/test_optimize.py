import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectral_drop.errors import ValidationError
from spectral_drop.geometry import Box, Disc, DomainSpec, build_mesh, volume
from spectral_drop.optimize import (OptimizerConfig, ball_at_boundary, default_schedule, drift_experiment,
                                    drift_table, minimize_lambda1, optimality_report, penalized_minimize,
                                    penalized_projection, strip_sweep, sweep_table, threshold_projection)
from spectral_drop.pde import solve_eigs

from conftest import J01, disc_chi

HALF_PLANE_LAMBDA = 9.084207267768616
HP_BOX = Box(-1.6, 0.0, 1.6, 1.6)


# ---------------------------------------------------------------- projections

@pytest.fixture(scope="module")
def square():
    return build_mesh(DomainSpec.polygon([(0, 0), (1, 0), (1, 1), (0, 1)]), 0.25)


def test_threshold_top_k(square):
    rng = np.random.default_rng(0)
    u = rng.random(square.n_vertices)
    from spectral_drop.pde import cell_average_sq
    scores = cell_average_sq(u, square)
    top = np.argsort(-scores)[:7]
    chi = threshold_projection(u, square, square.areas[top].sum())
    assert set(np.flatnonzero(chi)) == set(top)


def test_threshold_constant_field_takes_lowest_indices(square):
    cell = square.areas[0]
    chi = threshold_projection(np.ones(square.n_vertices), square, 5 * cell)
    assert np.array_equal(np.flatnonzero(chi), np.arange(5))
    # a partial cell is never added: the volume stays at or below c
    chi = threshold_projection(np.ones(square.n_vertices), square, 5.5 * cell)
    assert np.array_equal(np.flatnonzero(chi), np.arange(5))


def test_threshold_full_and_invalid(square):
    u = np.random.default_rng(1).random(square.n_vertices)
    assert threshold_projection(u, square, 1.0).min() == 1.0
    with pytest.raises(ValidationError):
        threshold_projection(u, square, 0.0)
    with pytest.raises(ValidationError):
        threshold_projection(u, square, 2.0)


def test_penalized_projection_rule(square):
    u = np.linspace(0, 1, square.n_vertices)
    from spectral_drop.pde import cell_average_sq
    avg = cell_average_sq(u, square)
    chi = penalized_projection(u, square, 100.0, 20.0)
    assert np.array_equal(chi > 0, 100.0 * avg >= 20.0)
    assert penalized_projection(u, square, 1.0, 1e9).sum() == 1


def test_config_validation():
    with pytest.raises(ValidationError):
        OptimizerConfig()
    with pytest.raises(ValidationError):
        OptimizerConfig(target_volume=1.0, penalty=1.0)
    with pytest.raises(ValidationError):
        OptimizerConfig(target_volume=-1.0)
    with pytest.raises(ValidationError):
        OptimizerConfig(target_volume=1.0, m_schedule=[10, 5])
    with pytest.raises(ValidationError):
        OptimizerConfig(target_volume=1.0, init="ring")
    with pytest.raises(ValidationError):
        OptimizerConfig(target_volume=1.0, init="user")


def test_default_schedule_ends_with_final_levels():
    h = 1 / 32
    sched = default_schedule(OptimizerConfig(target_volume=1.0), h)
    assert list(sched) == sorted(sched)
    assert sched[-3:] == pytest.approx([1e2 / h**2, 1e4 / h**2, 1e6 / h**2])


def test_target_volume_above_region_rejected():
    with pytest.raises(ValidationError):
        minimize_lambda1(DomainSpec.strip(1.0), OptimizerConfig(target_volume=10.0), h=0.25,
                         truncation=Box(0, 0, 2, 1))


def test_ball_at_boundary_init(halfplane_mesh):
    chi = ball_at_boundary(halfplane_mesh, 1.0)
    assert volume(chi, halfplane_mesh) <= 1.0
    assert 1.0 - volume(chi, halfplane_mesh) <= halfplane_mesh.areas.max()
    c = halfplane_mesh.centroids[chi > 0]
    assert abs(c[:, 0].mean()) < 0.05


# ---------------------------------------------------------------- constrained runs

@pytest.fixture(scope="module")
def hp_run():
    cfg = OptimizerConfig(target_volume=1.0, keep_iterates=True, init="random", seed=3)
    return minimize_lambda1(DomainSpec.half_plane(), cfg, h=1 / 16, truncation=HP_BOX)


def test_half_plane_coarse(hp_run):
    assert hp_run.lam == pytest.approx(HALF_PLANE_LAMBDA, rel=0.04)
    assert hp_run.truncation_ok
    rep = optimality_report(hp_run.chi, hp_run.spectral, hp_run.mesh)
    assert rep.touches_boundary


def test_trace_volume_feasibility(hp_run):
    cell = hp_run.mesh.areas.max()
    assert np.all(np.abs(hp_run.trace.column("volume") - 1.0) <= cell)


def test_trace_csv_columns(hp_run):
    lines = hp_run.trace.to_csv().strip().split("\n")
    assert lines[0] == "iter,lambda1,volume,perimeter,sym_diff,M"
    assert len(lines) == len(hp_run.trace) + 1


def test_faber_krahn_lower_bound_on_iterates(hp_run):
    M = 1e6 / hp_run.mesh.h**2
    for chi in hp_run.trace.iterates:
        assert solve_eigs(hp_run.system, chi, M).lambda1 >= 0.98 * HALF_PLANE_LAMBDA


def test_best_so_far_returned(hp_run):
    final_M = hp_run.trace.column("M").max()
    lams = hp_run.trace.column("lambda1")[hp_run.trace.column("M") == final_M]
    assert hp_run.lam == pytest.approx(lams.min(), rel=1e-12)


def test_optimizer_is_deterministic():
    cfg = OptimizerConfig(target_volume=0.5, init="random", seed=11)
    a = minimize_lambda1(DomainSpec.half_plane(), cfg, h=1 / 12, truncation=Box(-1, 0, 1, 1))
    b = minimize_lambda1(DomainSpec.half_plane(), cfg, h=1 / 12, truncation=Box(-1, 0, 1, 1))
    assert a.trace.to_csv() == b.trace.to_csv()
    assert np.array_equal(a.chi, b.chi)


def test_sector_touches_walls():
    res = minimize_lambda1(DomainSpec.sector(math.pi / 4), OptimizerConfig(target_volume=1.0), h=1 / 16,
                           truncation=Disc(0, 0, 2.0))
    assert res.lam == pytest.approx(math.pi / 4 * J01**2, rel=0.04)
    assert optimality_report(res.chi, res.spectral, res.mesh).touches_boundary


def test_strip_c4_rectangle():
    res = minimize_lambda1(DomainSpec.strip(1.0), OptimizerConfig(target_volume=4.0), h=1 / 16,
                           truncation=Box(-1.5, 0, 5.5, 1))
    assert res.lam == pytest.approx(math.pi**2 / 16, rel=0.01)
    ys = res.mesh.centroids[res.chi > 0, 1]
    assert ys.min() < 1 / 16 and ys.max() > 1 - 1 / 16


def test_user_init_is_projected_to_volume(halfplane_mesh):
    init = disc_chi(halfplane_mesh, 0.4, 0.0, 1.0)
    cfg = OptimizerConfig(target_volume=0.8, init="user", init_chi=init, m_schedule=[1e4])
    res = minimize_lambda1(DomainSpec.half_plane(), cfg, mesh=halfplane_mesh)
    assert abs(res.trace.records[0].volume - 0.8) <= halfplane_mesh.areas.max()


# ---------------------------------------------------------------- penalized runs

def test_penalized_half_plane_volume():
    Lam = 2 * J01**2 / math.pi  # optimal radius 1
    res = penalized_minimize(DomainSpec.half_plane(), OptimizerConfig(penalty=Lam), h=1 / 16,
                             truncation=Box(-2, 0, 2, 2))
    assert volume(res.chi, res.mesh) == pytest.approx(math.pi / 2, rel=0.05)
    assert res.objective == pytest.approx(res.lam + Lam * volume(res.chi, res.mesh), rel=1e-12)


def test_penalized_volume_monotone_in_lambda():
    vols = []
    for Lam in (1.0, 2.0, 4.0, 8.0):
        res = penalized_minimize(DomainSpec.half_plane(), OptimizerConfig(penalty=Lam), h=1 / 16,
                                 truncation=Box(-2.5, 0, 2.5, 2.5))
        vols.append(volume(res.chi, res.mesh))
    assert all(b <= a for a, b in zip(vols, vols[1:]))


def test_penalized_small_lambda_trips_guard():
    with pytest.warns(RuntimeWarning, match="truncation"):
        res = penalized_minimize(DomainSpec.half_plane(), OptimizerConfig(penalty=0.01), h=1 / 8,
                                 truncation=Box(-1, 0, 1, 1))
    assert not res.truncation_ok


@settings(max_examples=50)
@given(st.sampled_from(["half_plane", "sector", "strip"]), st.floats(1.0, 10.0), st.floats(math.pi / 4, math.pi / 2))
def test_perimeter_bound_on_penalized_optima(kind, Lam, alpha):
    if kind == "half_plane":
        spec, trunc = DomainSpec.half_plane(), Box(-2.5, 0, 2.5, 2.5)
    elif kind == "sector":
        spec, trunc = DomainSpec.sector(alpha), Disc(0, 0, 2.5)
    else:
        spec, trunc = DomainSpec.strip(1.0), Box(-3, 0, 3, 1)
    res = penalized_minimize(spec, OptimizerConfig(penalty=Lam), h=1 / 16, truncation=trunc)
    rep = optimality_report(res.chi, res.spectral, res.mesh, Lambda=Lam)
    bound = Lam**-0.5 * res.lam * volume(res.chi, res.mesh) ** 0.5
    assert rep.perimeter_bound == pytest.approx(bound, rel=1e-12)
    assert rep.perimeter_smooth <= bound
    assert rep.perimeter_slack >= 0


# ---------------------------------------------------------------- optimality report

def test_optimality_report_on_analytic_half_disc():
    h = 1 / 32
    mesh = build_mesh(DomainSpec.half_plane(), h, HP_BOX)
    from spectral_drop.pde import assemble
    chi = disc_chi(mesh, 0, 0, math.sqrt(2 / math.pi))
    spectral = solve_eigs(assemble(mesh), chi, 1e6 / h**2)
    rep = optimality_report(chi, spectral, mesh)
    assert rep.touches_boundary
    assert len(rep.contact_angles) == 2
    assert all(abs(a - 90) <= 5 for a in rep.contact_angles)
    assert rep.grad_cv <= 0.08
    assert rep.samples > 20


def test_optimality_report_detached_drop():
    h = 1 / 16
    mesh = build_mesh(DomainSpec.half_plane(), h, HP_BOX)
    from spectral_drop.pde import assemble
    chi = disc_chi(mesh, 0, 0.8, 0.5)
    rep = optimality_report(chi, solve_eigs(assemble(mesh), chi, 1e6 / h**2), mesh)
    assert not rep.touches_boundary
    assert rep.contact_angles == []


def test_optimality_report_needs_binary(halfplane_mesh, halfplane_system):
    chi = np.full(halfplane_mesh.n_cells, 0.5)
    spectral = solve_eigs(halfplane_system, chi, 1e3)
    with pytest.raises(ValidationError):
        optimality_report(chi, spectral, halfplane_mesh)


# ---------------------------------------------------------------- drift and sweep

def test_half_plane_drift_control():
    rows = drift_experiment(DomainSpec.half_plane(), 1.3, [0.0, 1.0, 3.0], 1.0, 1 / 16)
    lams = np.array([r.lambda1 for r in rows])
    assert np.ptp(lams) <= 0.005 * lams.min()
    assert [r.distance for r in rows] == sorted(r.distance for r in rows)


def test_drift_coarse_trend():
    rows = drift_experiment(DomainSpec.exterior_convex(parabola=(0.5, 0, 0)), 1.3, [4.0, 0.0, 1.0], 1.0, 1 / 16)
    assert [r.position for r in rows] == [0.0, 1.0, 4.0]
    lams = [r.lambda1 for r in rows]
    assert lams[0] > lams[1] > lams[2]
    text = drift_table(rows)
    assert text.startswith("position,x,y,distance,lambda1,volume,truncation_ok\n")


def test_drift_validation():
    with pytest.raises(ValidationError):
        drift_experiment(DomainSpec.strip(1.0), 1.0, [0, 1], 1.0, 0.1)
    spec = DomainSpec.exterior_convex(parabola=(0.5, 0, 0), truncation=Box(-2, -2, 2, 4))
    with pytest.raises(ValidationError):
        drift_experiment(spec, 1.3, [0.0, 5.0], 1.0, 0.1)


def test_strip_sweep_small():
    rows = strip_sweep([0.5, 2.0], 1 / 16)
    assert rows[0].branch == "half_disc" and rows[0].numeric_shape == "half_disc"
    assert rows[1].branch == "rectangle" and rows[1].numeric_shape == "rectangle"
    for r in rows:
        assert r.lambda_numeric <= min(r.lambda_rect, r.lambda_hd) * 1.05
        assert r.lambda_numeric == min(r.lambda_from_disc, r.lambda_from_band)
    assert sweep_table(rows).split("\n")[0].startswith("c,lambda_numeric,")
