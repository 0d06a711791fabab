import numpy as np
import pytest

from flocksim.kernels import KernelSet, NoiseDensity, PsiKernel, SigmaKernel
from flocksim.laws import Law, ProductLaw
from flocksim.meanfield import (MarginalFlow, chaos_study, direct_mckean, flow_grid, initial_samples,
                                linear_jump_simulate, linear_rate, picard_iterate, transport_flow)
from flocksim.metrics import EmpiricalMeasure, w1_exact
from flocksim.particles import SimConfig


def unit_kernels(d=1, noise_var=1.0):
    return KernelSet(PsiKernel.constant(1.0), SigmaKernel.constant(1.0), NoiseDensity.gaussian(d, noise_var))


def gaussian_mu0(d=1, std=1.0, mean=0.0):
    return ProductLaw(Law.gaussian(0.0, std), Law.gaussian(mean, std), 1, d)


def test_flow_validation():
    em = EmpiricalMeasure([[0.0], [1.0]], [[0.0], [1.0]])
    with pytest.raises(ValueError):
        MarginalFlow([0.5, 1.0], [em, em])
    with pytest.raises(ValueError):
        MarginalFlow([0.0, 0.0], [em, em])
    with pytest.raises(ValueError):
        MarginalFlow([0.0, 1.0], [em, EmpiricalMeasure([[0.0]], [[0.0]])])
    flow = MarginalFlow([0.0, 0.5, 1.0], [em, em, em])
    assert flow.index_at(0.7) == 1 and flow.index_at(5.0) == 2 and flow.n_samples == 2


def test_flow_grid_default_spacing_and_merge():
    grid = flow_grid(2.0, [0.333])
    assert len(grid) == 102 and grid[0] == 0.0 and grid[-1] == 2.0 and 0.333 in grid


def test_flow_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    ems = [EmpiricalMeasure(rng.normal(size=(4, 2)), rng.normal(size=(4, 2))) for _ in range(3)]
    flow = MarginalFlow([0.0, 0.25, 1.0], ems)
    flow.to_csv(tmp_path / "flow.csv")
    header = (tmp_path / "flow.csv").read_text().splitlines()[0]
    assert header == "t,sample_id,r_0,r_1,v_0,v_1,weight"
    back = MarginalFlow.from_csv(tmp_path / "flow.csv")
    np.testing.assert_array_equal(back.times, flow.times)
    for a, b in zip(back.measures, flow.measures):
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.velocities, b.velocities)


def test_direct_mckean_minimal_run():
    flow, traj = direct_mckean(unit_kernels(), gaussian_mu0(), 2, SimConfig(1.0, (0.5, 1.0), seed=1))
    assert list(flow.times) == [0.0, 0.5, 1.0] and flow.n_samples == 2
    with pytest.raises(ValueError):
        direct_mckean(unit_kernels(), gaussian_mu0(), 1, SimConfig(1.0, (1.0,), seed=1))


def test_direct_mckean_moment_and_momentum_laws():
    M, lam2 = 4000, 1.0
    flow, _ = direct_mckean(unit_kernels(), gaussian_mu0(), M, SimConfig(1.0, (1.0,), seed=2))
    v0, v1 = flow.at(0.0).velocities[:, 0], flow.at(1.0).velocities[:, 0]
    se = np.std(v1**2) / np.sqrt(M)
    assert abs(np.mean(v1**2) - (np.mean(v0**2) + lam2)) < 4 * se
    assert abs(v1.mean() - v0.mean()) < 4 * np.std(v1) / np.sqrt(M)


def test_linear_rate_examples():
    ks = unit_kernels()
    assert linear_rate(ks, EmpiricalMeasure([[0.0]], [[3.0]]), [5.0], [1.0]) == 1.0
    ks_half = KernelSet(PsiKernel.rational(1.0, 2.0), SigmaKernel.constant(1.0), NoiseDensity.gaussian(1))
    frozen = EmpiricalMeasure([[1.0], [0.0]], [[0.0], [0.0]])
    assert linear_rate(ks_half, frozen, [0.0], [0.0]) == pytest.approx(0.75)
    ks3 = KernelSet(PsiKernel.rational(1.0, 2.0), SigmaKernel.constant(3.0), NoiseDensity.gaussian(1))
    assert linear_rate(ks3, frozen, [0.0], [0.0]) == pytest.approx(2.25)


def test_point_mass_flow_sets_velocity_on_first_jump():
    ks = KernelSet(PsiKernel.constant(1.0), SigmaKernel.constant(1.0), NoiseDensity.degenerate_zero(1))
    grid = flow_grid(6.0)
    point = EmpiricalMeasure([[2.0]], [[-0.75]])
    frozen = MarginalFlow(grid, [point] * len(grid))
    mu0 = ProductLaw(Law.gaussian(), Law.point(0.5), 1, 1)
    out = linear_jump_simulate(ks, frozen, mu0, 300, SimConfig(6.0, (6.0,), seed=3))
    v = out.at(6.0).velocities[:, 0]
    assert set(np.unique(v)) <= {0.5, -0.75}
    assert np.mean(v == -0.75) > 0.98


def test_zero_sigma_is_free_transport():
    ks = KernelSet(PsiKernel.constant(1.0), SigmaKernel.constant(0.0), NoiseDensity.gaussian(2))
    mu0 = gaussian_mu0(d=2)
    cfg = SimConfig(1.0, (1.0,), seed=4)
    grid = flow_grid(1.0)
    r0, v0 = initial_samples(mu0, 50, cfg.seed)
    out = linear_jump_simulate(ks, transport_flow(r0, v0, grid), mu0, 50, cfg)
    np.testing.assert_allclose(out.at(1.0).positions, r0 + v0, atol=1e-12)
    np.testing.assert_array_equal(out.at(1.0).velocities, v0)


def test_linear_solve_against_particle_flow_keeps_laws():
    ks, mu0, M = unit_kernels(), gaussian_mu0(), 3000
    cfg = SimConfig(1.0, tuple(flow_grid(1.0, dt=0.05)[1:]), seed=5)
    frozen, _ = direct_mckean(ks, mu0, M, cfg)
    out = linear_jump_simulate(ks, frozen, mu0, M, SimConfig(1.0, (1.0,), seed=6))
    m2_frozen = np.mean(frozen.at(1.0).velocities ** 2)
    v1 = out.at(1.0).velocities[:, 0]
    se = np.hypot(np.std(v1**2), np.std(frozen.at(1.0).velocities**2)) / np.sqrt(M)
    assert abs(np.mean(v1**2) - m2_frozen) < 4 * se
    assert abs(v1.mean()) < 4 * np.std(v1) / np.sqrt(M) + abs(frozen.at(1.0).velocities.mean())


def test_linear_solve_is_deterministic_and_job_independent():
    ks, mu0 = unit_kernels(), gaussian_mu0()
    cfg = SimConfig(1.0, (0.5, 1.0), seed=7)
    grid = flow_grid(1.0)
    r0, v0 = initial_samples(mu0, 40, cfg.seed)
    frozen = transport_flow(r0, v0, grid)
    a = linear_jump_simulate(ks, frozen, mu0, 40, cfg)
    b = linear_jump_simulate(ks, frozen, mu0, 40, cfg, jobs=2)
    np.testing.assert_array_equal(a.at(1.0).velocities, b.at(1.0).velocities)


def test_velocity_dependent_sigma_linear_solve_runs():
    ks = KernelSet(PsiKernel.rational(1.0, 1.0), SigmaKernel.bracket_power(1.0, 1.0), NoiseDensity.gaussian(1, 0.25))
    mu0 = gaussian_mu0(std=0.5)
    cfg = SimConfig(0.5, (0.5,), seed=8)
    r0, v0 = initial_samples(mu0, 100, cfg.seed)
    out = linear_jump_simulate(ks, transport_flow(r0, v0, flow_grid(0.5)), mu0, 100, cfg)
    assert np.all(np.isfinite(out.at(0.5).velocities))


def test_picard_zero_sigma_converges_immediately():
    ks = KernelSet(PsiKernel.constant(1.0), SigmaKernel.constant(0.0), NoiseDensity.gaussian(1))
    flow, report = picard_iterate(ks, gaussian_mu0(), 100, SimConfig(1.0, (1.0,), seed=9))
    assert report.converged and report.iterations == 1 and report.discrepancies == [0.0]


def test_picard_small_run_contracts():
    mu0 = gaussian_mu0(std=0.4)
    flow, report = picard_iterate(unit_kernels(noise_var=0.16), mu0, 300, SimConfig(1.0, (1.0,), seed=10),
                                  max_iter=6, tol=0.08)
    assert report.converged and len(report.discrepancies) == report.iterations <= 6
    assert report.discrepancies[-1] < report.discrepancies[0]


def test_chaos_study_plumbing():
    ks, mu0 = unit_kernels(), gaussian_mu0()
    table = chaos_study(ks, mu0, [4, 64], 64, SimConfig(0.5, (0.5,), seed=11), replicas=40, bootstrap=3)
    assert table.value(64, 0.5).w1 == 0.0
    row = table.value(4, 0.5)
    assert row.w1 > 0 and row.se > 0 and table.noise_floor[0.5] > 0
    with pytest.raises(ValueError):
        chaos_study(ks, mu0, [128], 64, SimConfig(0.5, (0.5,), seed=11))


def test_shared_initial_samples_with_direct_run():
    mu0 = gaussian_mu0()
    r0, v0 = initial_samples(mu0, 30, 12)
    flow, _ = direct_mckean(unit_kernels(), mu0, 30, SimConfig(1.0, (1.0,), seed=12), initial=(r0, v0))
    assert w1_exact(flow.at(0.0), EmpiricalMeasure(r0, v0)) == 0.0
