"""Black-box plant: physics sanity, determinism, historical data generation."""
from dataclasses import replace

import numpy as np
import pytest

from dflsched import plant, rc
from dflsched.plant import PlantSpec


def quiet_spec(z=1, substeps=12, noise=0.0, **overrides):
    """Single-floor plant with no gains, no solar, no noise unless asked."""
    topo = rc.default_topology(z)
    spec = plant.default_plant_spec(topo, noise_std=noise, seed=0)
    fields = dict(
        gain_occupied=np.zeros(z),
        gain_base=np.zeros(z),
        solar_gain_peak=0.0,
        vent_fan_kw=np.zeros(z),
        substeps=substeps,
    )
    fields.update(overrides)
    return replace(spec, **fields)


class TestSimulateDay:
    def test_thermal_equilibrium_zero_power(self):
        # setpoints at the current temperature, ambient equal to indoor,
        # no gains, no noise: nothing to do
        spec = quiet_spec(z=3)
        setpoints = np.full((25, 3), 20.0)
        trace = plant.simulate_day(spec, setpoints, np.full(24, 20.0), seed=1,
                                   day_of_week=5)
        assert np.abs(trace.p_hvac_obs).max() <= 1e-6
        np.testing.assert_allclose(trace.tau_obs, 20.0, atol=1e-9)

    def test_steady_state_conduction_oracle(self):
        """Ambient 20 degC below the setpoint: after burn-in, electrical
        power settles at the conductive loss over the effective efficiency,
        both computed from the plant's own equations."""
        spec = quiet_spec(z=1, r_mass=np.array([1e9]))  # decouple the mass node
        hours = 48
        setpoint = 21.0
        ambient = setpoint - 20.0
        setpoints = np.full((hours + 1, 1), setpoint)
        trace = plant.simulate_day(spec, setpoints, np.full(hours, ambient),
                                   seed=0, day_of_week=5)
        # plant's own steady-state balance
        d_t = 20.0
        loss = d_t * (d_t / 10.0) ** (spec.convection_exponent - 1.0) / spec.r_env[0]
        eta_eff = (1.0 - spec.duct_loss) / (1.0 + spec.fan_coeff)
        expected = loss / eta_eff
        steady = trace.p_hvac_obs[-8:, 0].mean()
        assert abs(steady - expected) / expected <= 0.02
        assert abs(trace.tau_obs[-1, 0] - setpoint) < 0.05

    def test_determinism_bitwise(self):
        topo = rc.default_topology(4)
        spec = plant.default_plant_spec(topo, noise_std=0.2, seed=3)
        rng = np.random.default_rng(0)
        setpoints = 20.0 + rng.uniform(-2, 2, size=(25, 4))
        weather = rng.uniform(-10, 10, size=24)
        a = plant.simulate_day(spec, setpoints, weather, seed=99)
        b = plant.simulate_day(spec, setpoints, weather, seed=99)
        np.testing.assert_array_equal(a.tau_obs, b.tau_obs)
        np.testing.assert_array_equal(a.p_hvac_obs, b.p_hvac_obs)
        c = plant.simulate_day(spec, setpoints, weather, seed=100)
        assert not np.array_equal(a.p_hvac_obs, c.p_hvac_obs)

    def test_import_is_zone_sum(self):
        spec = quiet_spec(z=2)
        setpoints = np.full((25, 2), 22.0)
        trace = plant.simulate_day(spec, setpoints, np.full(24, 0.0), seed=5)
        np.testing.assert_allclose(trace.p_hvac_obs.sum(axis=1),
                                   trace.p_import_obs, atol=1e-12)
        assert trace.p_hvac_obs.min() >= 0.0

    def test_nonlinearity_witness(self):
        """The plant is not affine: superposition fails by far more than
        solver tolerance, so the affine RC model cannot be exact."""
        spec = quiet_spec(z=1)
        weather = np.full(24, -5.0)
        sp1 = np.full((25, 1), 19.0)
        sp2 = np.full((25, 1), 25.0)
        a, b = 0.5, 0.5
        mix = a * sp1 + b * sp2
        t1 = plant.simulate_day(spec, sp1, weather, seed=0)
        t2 = plant.simulate_day(spec, sp2, weather, seed=0)
        tm = plant.simulate_day(spec, mix, weather, seed=0)
        gap = np.abs(tm.p_hvac_obs - (a * t1.p_hvac_obs + b * t2.p_hvac_obs)).max()
        assert gap > 10 * 1e-8

    def test_energy_sanity_cold_day(self):
        # steady cold day: delivered heat covers the envelope loss minus
        # what storage gave up, within 5% (gains are zero here)
        spec = quiet_spec(z=2)
        setpoints = np.full((25, 2), 21.0)
        trace = plant.simulate_day(spec, setpoints, np.full(24, -10.0), seed=0,
                                   day_of_week=5)
        loss = -trace.energy_envelope_kwh  # positive on a cold day
        assert loss > 0
        floor = loss - (-trace.energy_storage_kwh)
        assert trace.energy_delivered_kwh >= floor - 0.05 * loss

    def test_saturation_is_not_an_error(self):
        # absurd setpoint: the plant saturates and keeps going
        spec = quiet_spec(z=1)
        setpoints = np.full((25, 1), 60.0)
        setpoints[0] = 20.0
        trace = plant.simulate_day(spec, setpoints, np.full(24, -20.0), seed=0)
        cap = (spec.ahu_heat_rating[0] + spec.reheat_rating[0]) * (1 + spec.fan_coeff)
        assert trace.p_hvac_obs.max() <= cap + 1e-9
        assert trace.p_hvac_obs.max() > 0.5 * cap


class TestExactRcPlant:
    def test_reproduces_schedule_exactly_at_true_theta(self):
        z = 2
        theta = rc.ThetaParams(np.eye(z), [0.9, 0.8], [0.9, 0.8],
                               [5.0, 4.0], [2.0, 3.0])
        sim = plant.ExactRcPlant(theta, dt=1.0)
        rng = np.random.default_rng(1)
        setpoints = 20.0 + rng.uniform(-1, 1, size=(9, z))
        weather = rng.uniform(-5, 5, size=8)
        trace = sim.simulate(setpoints, weather, seed=0)
        np.testing.assert_allclose(trace.tau_obs, setpoints, atol=1e-9)
        # powers replayed through the RC model land on the setpoints
        roll = rc.rollout(theta, setpoints[0], weather,
                          trace.p_heat_obs, trace.p_cool_obs, 1.0)
        np.testing.assert_allclose(roll, setpoints, atol=1e-9)


class TestHistoricalRollout:
    def test_dataset_length_and_ratings(self):
        spec = quiet_spec(z=2, noise=0.1, substeps=4)
        rng = np.random.default_rng(2)
        weather = rng.uniform(-15, 30, size=8760)
        ds = plant.historical_rollout(spec, weather, seed=11)
        assert len(ds) == 8760
        heat_cap = (spec.ahu_heat_rating[0] + spec.reheat_rating.max()) * (1 + spec.fan_coeff)
        cool_cap = spec.ahu_cool_rating[0] * (1 / spec.cop_min + spec.fan_coeff)
        assert ds.p_h.max() <= heat_cap + 1e-9
        assert ds.p_c.max() <= cool_cap + 1e-9
        assert ds.p_h.min() >= 0 and ds.p_c.min() >= 0

    def test_replay_self_consistency(self):
        """Replaying recorded electrical powers through the plant's own
        air-node equation reproduces the recorded next temperatures: exact
        at zero noise, within 3 sigma otherwise.

        Uses one substep per hour, a decoupled mass node and an oversized
        AHU (reheat never engages, so electrical power inverts cleanly to
        coil thermal power) so the recorded hourly tuples are the full
        plant state."""
        for noise in (0.0, 0.2):
            # gentle gains: one substep per hour needs h*kp/c_air < 1
            spec = quiet_spec(z=1, substeps=1, noise=noise, kp=0.3, ki=0.05,
                              r_mass=np.array([1e12]), r_env=np.array([3.0]),
                              ahu_heat_rating=np.array([1e3]),
                              ahu_cool_rating=np.array([1e3]))
            weather = np.tile(plant.np.linspace(-10, 10, 24), 365)
            ds = plant.historical_rollout(spec, weather, seed=4)
            eta = 1.0 + spec.fan_coeff
            thermal_h = (1.0 - spec.duct_loss) * ds.p_h / eta
            cool_coil = ds.p_c / (1.0 / np.array([spec.cop(a) for a in ds.tau_amb])[:, None]
                                  + spec.fan_coeff)
            thermal_c = (1.0 - spec.duct_loss) * cool_coil
            d_t = ds.tau_amb[:, None] - ds.tau
            q_env = d_t * np.abs(d_t / 10.0) ** (spec.convection_exponent - 1) / spec.r_env
            hours = np.arange(8760) % 24
            dows = (np.arange(8760) // 24) % 7
            occupied = (dows < 5) & (hours >= 7) & (hours < 18)
            gains = np.where(occupied[:, None], spec.gain_occupied, spec.gain_base)
            predicted = ds.tau + (thermal_h - thermal_c + q_env + gains) / spec.c_air
            resid = predicted - ds.tau_next
            if noise == 0.0:
                assert np.abs(resid).max() <= 1e-9
            else:
                # residual equals the (unknown) per-step noise; 3 sigma bound
                # with a Gaussian-tail allowance over 8760 samples
                assert np.abs(resid).max() <= 4.5 * noise / spec.c_air[0]
                assert resid.std() == pytest.approx(noise / spec.c_air[0], rel=0.1)

    def test_baseline_respects_deadband(self):
        spec = quiet_spec(z=1, substeps=6)
        weather = np.full(24 * 14, 10.0)
        ds = plant.historical_rollout(spec, weather, seed=1)
        # after the first day settles, temperatures stay within the setbacks
        settled = ds.tau[24:]
        assert settled.min() >= plant.BASELINE_HEAT_SETBACK - 0.6
        assert settled.max() <= plant.BASELINE_COOL_SETBACK + 0.6


class TestSpecValidation:
    def test_bad_duct_loss_rejected(self):
        topo = rc.default_topology(1)
        spec = plant.default_plant_spec(topo)
        with pytest.raises(plant.PlantError):
            replace(spec, duct_loss=1.0)

    def test_cop_must_stay_positive(self):
        topo = rc.default_topology(1)
        spec = plant.default_plant_spec(topo)
        with pytest.raises(plant.PlantError):
            replace(spec, cop_slope=2.0, cop_min=-1.0)


class TestWarmup:
    def test_returns_plausible_temperatures(self):
        spec = quiet_spec(z=3, noise=0.05, substeps=4)
        tau = plant.warmup_initial_tau(spec, np.full(24, 0.0), seed=9)
        assert tau.shape == (3,)
        assert np.all(tau > 5.0) and np.all(tau < 30.0)


class TestExport:
    def test_trace_csv(self, tmp_path):
        spec = quiet_spec(z=2, substeps=2)
        trace = plant.simulate_day(spec, np.full((25, 2), 21.0),
                                   np.full(24, 10.0), seed=0)
        path = tmp_path / "trace.csv"
        plant.export_trace_csv(trace, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "t,zone,tau_obs,p_hvac_obs"
        assert len(lines) == 1 + 24 * 2
