"""Scheduling QP assembly, solving, extraction and cost accounting."""
import numpy as np
import pytest

from dflsched import qp, rc, scheduler
from dflsched.scenarios import DayScenario
from conftest import rel_err


def make_config(topo, horizon, *, target=21.0, weight=1.0, zone_cap_h=50.0,
                zone_cap_c=50.0, floor_cap_h=500.0, floor_cap_c=500.0,
                line_capacity=5000.0, dt=1.0):
    z, f = topo.num_zones, topo.num_floors
    weight_arr = np.full((horizon, z), weight, dtype=float) if np.isscalar(weight) else weight
    target_arr = np.full((horizon, z), target, dtype=float) if np.isscalar(target) else target
    return scheduler.ScheduleConfig(
        topology=topo, dt=dt,
        comfort_target=target_arr, comfort_weight=weight_arr,
        zone_cap_h=np.full((horizon, z), zone_cap_h),
        zone_cap_c=np.full((horizon, z), zone_cap_c),
        floor_cap_h=np.full((horizon, f), floor_cap_h),
        floor_cap_c=np.full((horizon, f), floor_cap_c),
        line_capacity=line_capacity)


def carryover_theta(z, dt=1.0, c=1.0, r=1e6, eta=1.0):
    """alpha = I/dt: exact persistence, so power maps directly to degrees."""
    return rc.ThetaParams(np.eye(z) / dt, np.full(z, eta), np.full(z, eta),
                          np.full(z, r), np.full(z, c))


def scenario_of(amb, tau0):
    return DayScenario(ambient=np.asarray(amb, dtype=float),
                       initial_tau=np.asarray(tau0, dtype=float),
                       label=0, weight=1.0)


class TestAssemble:
    def test_variable_count_t1_z1(self):
        topo = rc.default_topology(1)
        cfg = make_config(topo, 1)
        theta = carryover_theta(1)
        problem, idx = scheduler.assemble(theta, scenario_of([0.0], [20.0]),
                                          scheduler.default_tariff(1), cfg)
        assert problem.num_vars == 7  # tau has T+1 rows
        assert idx.num_vars == 7

    def test_no_incentive_means_zero_power(self):
        topo = rc.default_topology(2)
        cfg = make_config(topo, 4, weight=0.0)
        theta = carryover_theta(2)
        tariff = scheduler.Tariff(np.full(4, 0.3), 0.0)
        res = scheduler.solve_schedule(theta, scenario_of([5.0] * 4, [20.0, 20.0]),
                                       tariff, cfg)
        np.testing.assert_allclose(res.p_hvac, 0.0, atol=1e-6)
        assert res.expected_cost <= 1e-6

    def test_two_zone_unit_heating_toy(self):
        # 1 kW for 1 h raises zone 0 by 1 degC; the target demands +1 degC
        # at t=1 under a huge comfort weight
        topo = rc.default_topology(2)
        horizon = 2
        weight = np.full((horizon, 2), 1e-6)
        weight[0, 0] = 1e5  # pin zone 0 at t=1
        target = np.full((horizon, 2), 20.0)
        target[0, 0] = 21.0
        cfg = make_config(topo, horizon, target=target, weight=weight)
        theta = carryover_theta(2)
        tariff = scheduler.Tariff(np.full(horizon, 0.3), 0.0)
        res = scheduler.solve_schedule(theta, scenario_of([20.0] * horizon, [20.0, 20.0]),
                                       tariff, cfg)
        assert abs(res.p_h[0, 0] - 1.0) <= 1e-3

    def test_shape_mismatch_rejected(self):
        topo = rc.default_topology(2)
        cfg = make_config(topo, 4)
        theta = carryover_theta(2)
        with pytest.raises(scheduler.ScheduleError):
            scheduler.assemble(theta, scenario_of([0.0] * 3, [20.0, 20.0]),
                               scheduler.default_tariff(4), cfg)


class TestSolveSchedule:
    def test_perfect_insulation_stays_put(self):
        topo = rc.default_topology(1)
        cfg = make_config(topo, 6, target=21.0, weight=2.0)
        theta = carryover_theta(1, r=1e9)
        tariff = scheduler.default_tariff(6)
        res = scheduler.solve_schedule(theta, scenario_of([0.0] * 6, [21.0]), tariff, cfg)
        np.testing.assert_allclose(res.p_hvac, 0.0, atol=1e-5)
        np.testing.assert_allclose(res.tau_in, 21.0, atol=1e-5)

    def test_consumption_concentrates_off_peak(self):
        """Fixed daily heating energy with free capacity lands strictly in
        the cheap hours; cost matches an exhaustive placement oracle."""
        topo = rc.default_topology(1)
        horizon = 24
        energy = 4.0  # kWh needed: final temperature +4 degC at 1 kWh/degC
        weight = np.zeros((horizon, 1))
        weight[-1, 0] = 1e5
        target = np.full((horizon, 1), 20.0)
        target[-1, 0] = 24.0
        cfg = make_config(topo, horizon, target=target, weight=weight,
                          zone_cap_h=1.0)
        theta = carryover_theta(1, c=1.0, r=1e9)
        demand_charge = 0.05
        tariff = scheduler.default_tariff(horizon, demand_charge=demand_charge)
        res = scheduler.solve_schedule(theta, scenario_of([20.0] * horizon, [20.0]),
                                       tariff, cfg)

        offpeak = tariff.energy_price == 0.3
        peak_energy = res.p_import[~offpeak].sum() * cfg.dt
        assert peak_energy <= 1e-5

        # oracle: spread the energy over the k cheapest hours, k = 1..11
        n_off = int(offpeak.sum())
        best = min(0.3 * energy + demand_charge * energy / k
                   for k in range(1, n_off + 1))
        assert res.expected_cost <= best + 1e-4
        assert res.expected_cost >= best - 1e-4

    def test_feasibility_suite_random_draws(self, rng):
        """ScheduleResult invariants over random (theta, scenario) draws."""
        topo = rc.default_topology(3)
        cfg = make_config(topo, 6, weight=1.0, zone_cap_h=8.0, zone_cap_c=8.0,
                          floor_cap_h=20.0, floor_cap_c=20.0, line_capacity=30.0)
        tariff = scheduler.default_tariff(6)
        for _ in range(100):
            alpha = np.eye(3) + rng.normal(0, 0.03, size=(3, 3))
            theta = rc.ThetaParams(alpha,
                                   rng.uniform(0.6, 1.1, 3), rng.uniform(0.6, 1.1, 3),
                                   rng.uniform(2, 8, 3), rng.uniform(1, 5, 3))
            scen = scenario_of(rng.uniform(-10, 35, 6), rng.uniform(17, 24, 3))
            res = scheduler.solve_schedule(theta, scen, tariff, cfg)
            np.testing.assert_allclose(res.p_hvac, res.p_h + res.p_c, atol=1e-7)
            np.testing.assert_allclose(res.p_hvac.sum(axis=1), res.p_import, atol=2e-6)
            assert res.p_peak >= res.p_import.max() - 1e-7
            assert res.p_peak <= cfg.line_capacity + 1e-7
            for arr in (res.p_h, res.p_c, res.p_hvac, res.p_import):
                assert arr.min(initial=0.0) >= -1e-9

    def test_peak_tightness_with_demand_charge(self, rng):
        topo = rc.default_topology(2)
        cfg = make_config(topo, 8, weight=3.0)
        theta = carryover_theta(2, c=2.0, r=4.0)
        tariff = scheduler.default_tariff(8, demand_charge=10.0)
        res = scheduler.solve_schedule(theta, scenario_of(np.full(8, -5.0),
                                                          [21.0, 21.0]), tariff, cfg)
        assert res.p_import.max() > 0.1  # heating actually happens
        assert abs(res.p_peak - res.p_import.max()) <= 1e-6

    def test_comfort_weight_monotonicity(self):
        # raising the weight uniformly never increases the squared deviation
        topo = rc.default_topology(2)
        theta = carryover_theta(2, c=2.0, r=3.0)
        tariff = scheduler.default_tariff(6)
        scen = scenario_of(np.full(6, -5.0), [19.0, 19.0])
        devs = []
        for w in (0.2, 1.0, 5.0):
            cfg = make_config(topo, 6, weight=w)
            res = scheduler.solve_schedule(theta, scen, tariff, cfg)
            devs.append(np.sum((res.tau_in[1:] - cfg.comfort_target) ** 2))
        assert devs[1] <= devs[0] + 1e-8
        assert devs[2] <= devs[1] + 1e-8

    def test_tariff_shift_never_moves_load_into_peak(self):
        # doubling the off-peak price toward parity cannot increase off-peak
        # consumption
        topo = rc.default_topology(2)
        cfg = make_config(topo, 24, weight=1.0)
        theta = carryover_theta(2, c=2.0, r=4.0)
        scen = scenario_of(np.full(24, -5.0), [20.0, 20.0])
        offpeak_energy = []
        for offpeak_price in (0.3, 0.6):
            tariff = scheduler.default_tariff(24, offpeak=offpeak_price, peak=0.6)
            res = scheduler.solve_schedule(theta, scen, tariff, cfg)
            mask = np.arange(24) % 24
            off = (mask < 6) | (mask >= 19)
            offpeak_energy.append(res.p_import[off].sum())
        assert offpeak_energy[1] <= offpeak_energy[0] + 1e-6

    def test_infeasible_only_by_contradictory_capacities(self):
        # zonal caps force power, line capacity forbids it: certified failure
        topo = rc.default_topology(1)
        cfg = make_config(topo, 2, weight=1.0, line_capacity=0.0)
        theta = carryover_theta(1)
        tariff = scheduler.default_tariff(2)
        # line capacity 0 with nonnegativity stays feasible (all powers 0)
        res = scheduler.solve_schedule(theta, scenario_of([0.0, 0.0], [20.0]),
                                       tariff, cfg)
        np.testing.assert_allclose(res.p_import, 0.0, atol=1e-6)


class TestExpectedCost:
    def test_zero_powers_cost_zero(self):
        topo = rc.default_topology(1)
        cfg = make_config(topo, 4, weight=0.0)
        theta = carryover_theta(1)
        tariff = scheduler.Tariff(np.full(4, 0.3), 5.0)
        res = scheduler.solve_schedule(theta, scenario_of([20.0] * 4, [20.0]), tariff, cfg)
        assert scheduler.expected_cost(res, tariff) <= 1e-6

    def test_flat_import_arithmetic(self):
        # 1 kW flat for 24 h at 0.3 eur/kWh with a 10 eur/kW charge: 17.2 eur
        tariff = scheduler.Tariff(np.full(24, 0.3), 10.0)
        assert tariff.cost_of(np.ones(24), dt=1.0) == pytest.approx(17.2)

    def test_random_schedule_reaccumulation(self, rng):
        topo = rc.default_topology(2)
        cfg = make_config(topo, 12, weight=2.0)
        theta = carryover_theta(2, c=2.0, r=5.0)
        tariff = scheduler.default_tariff(12, demand_charge=7.0)
        res = scheduler.solve_schedule(theta, scenario_of(rng.uniform(-10, 5, 12),
                                                          [20.0, 21.0]), tariff, cfg)
        # spreadsheet-style re-accumulation
        manual = res.p_peak * 7.0
        for t in range(12):
            manual += res.p_import[t] * tariff.energy_price[t] * cfg.dt
        assert scheduler.expected_cost(res, tariff) == pytest.approx(manual, abs=1e-9)


class TestExport:
    def test_csv_and_summary(self, tmp_path, rng):
        topo = rc.default_topology(2)
        cfg = make_config(topo, 4, weight=1.0)
        theta = carryover_theta(2, c=2.0, r=5.0)
        tariff = scheduler.default_tariff(4)
        res = scheduler.solve_schedule(theta, scenario_of([0.0] * 4, [20.0, 20.0]),
                                       tariff, cfg)
        csv_path = tmp_path / "schedule.csv"
        scheduler.export_schedule_csv(res, csv_path)
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "t,zone,tau_in,p_h,p_c,p_hvac"
        assert len(lines) == 1 + 4 * 2
        summary_path = tmp_path / "summary.json"
        scheduler.export_schedule_summary(res, summary_path)
        import json
        doc = json.loads(summary_path.read_text())
        assert doc["expected_cost"] == pytest.approx(res.expected_cost)


class TestCoefficientMapEndToEnd:
    def test_matches_finite_differences_through_solve(self, rng):
        """Full RC coefficient map on a 2-zone problem: end-to-end finite
        differences through assemble -> solve -> linear loss."""
        topo = rc.default_topology(2)
        cfg = make_config(topo, 3, weight=2.0)
        alpha = np.eye(2) + rng.normal(0, 0.03, size=(2, 2))
        theta = rc.ThetaParams(alpha, [0.9, 0.8], [0.9, 0.85],
                               [4.0, 5.0], [2.0, 2.5])
        tariff = scheduler.default_tariff(3)
        scen = scenario_of([-5.0, -3.0, 0.0], [19.0, 19.5])
        res = scheduler.solve_schedule(theta, scen, tariff, cfg)
        g = rng.normal(size=res.index.num_vars)
        sens = qp.backward(res.problem, res.solution, g)
        cmap = scheduler.coefficient_map(theta, scen, cfg)
        grad = qp.backward_through_map(sens, cmap)

        flat0 = rc.pack(theta)
        eps = 1e-6
        fd = np.zeros_like(flat0)
        for k in range(len(flat0)):
            up, dn = flat0.copy(), flat0.copy()
            up[k] += eps
            dn[k] -= eps
            r_up = scheduler.solve_schedule(rc.unpack_like(up, theta), scen, tariff,
                                            cfg, tolerance=1e-10, max_iter=100)
            r_dn = scheduler.solve_schedule(rc.unpack_like(dn, theta), scen, tariff,
                                            cfg, tolerance=1e-10, max_iter=100)
            fd[k] = (g @ r_up.solution.primal - g @ r_dn.solution.primal) / (2 * eps)
        assert rel_err(fd, grad) <= 1e-4
