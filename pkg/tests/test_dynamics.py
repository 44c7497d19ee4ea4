"""Schedule identities, score maps, and the analytic Gaussian oracle."""

import math

import numpy as np
import pytest

from stadlab.dynamics import (
    InvalidCovariance,
    ScheduleSpec,
    SingularTime,
    TimeRange,
    analytic_gaussian_field,
    boundary_decay_probe,
    field_from_score_net,
    field_from_velocity_net,
    marginal_sample,
    pf_ode_drift,
    score_from_velocity,
    score_from_velocity_trig,
)
from stadlab.net import FieldNet

RNG = np.random.default_rng(0)


class TestSchedules:
    def test_vp_moment_identity(self):
        """Unit-variance preservation: scale^2 + std^2 = 1 at all times."""
        sp = ScheduleSpec("vp")
        t = np.linspace(sp.eps, sp.T, 257)
        np.testing.assert_allclose(sp.scale(t) ** 2 + sp.std(t) ** 2, 1.0, atol=1e-14)

    def test_vp_closed_form_mean_scale(self):
        sp = ScheduleSpec("vp", beta_min=0.1, beta_max=20.0)
        t = 0.37
        expected = math.exp(-0.25 * t * t * (20.0 - 0.1) - 0.5 * t * 0.1)
        assert float(sp.scale(t)) == pytest.approx(expected, rel=1e-14)

    def test_bridge_endpoints(self):
        for fam in ("vp", "subvp", "ve"):
            sp = ScheduleSpec(fam)
            assert float(sp.scale(sp.eps)) == pytest.approx(1.0, abs=2e-4)
            assert float(sp.std(sp.eps)) == pytest.approx(0.0, abs=2e-2)

    def test_flow_linear_partition(self):
        sp = ScheduleSpec("flow_linear")
        t = np.linspace(sp.eps, sp.T, 101)
        np.testing.assert_allclose(sp.scale(t) + sp.std(t), 1.0, atol=0)

    def test_trigflow_path(self):
        sp = ScheduleSpec("trigflow", sigma_d=2.0)
        assert sp.T == pytest.approx(math.pi / 2)
        assert float(sp.scale(0.5)) == pytest.approx(math.cos(0.5))
        assert float(sp.std(0.5)) == pytest.approx(2.0 * math.sin(0.5))

    def test_serialization_roundtrip(self):
        sp = ScheduleSpec("subvp", eps=2e-3, T=0.9, beta_min=0.2, beta_max=18.0)
        assert ScheduleSpec.from_dict(sp.to_dict()) == sp

    def test_bad_time_domain(self):
        with pytest.raises(ValueError):
            ScheduleSpec("vp", eps=0.5, T=0.5)
        with pytest.raises(ValueError):
            ScheduleSpec("trigflow", T=2.0)


class TestMarginalSample:
    def test_start_of_bridge_is_identity(self):
        sp = ScheduleSpec("vp")
        x = RNG.standard_normal(3)
        out = marginal_sample(sp, x, sp.eps, RNG.standard_normal(3))
        np.testing.assert_allclose(out, x, atol=0.05)

    def test_flow_midpoint(self):
        sp = ScheduleSpec("flow_linear")
        out = marginal_sample(sp, np.array([2.0, 0.0]), 0.5, np.array([0.0, 2.0]))
        np.testing.assert_allclose(out, [1.0, 1.0], atol=0)

    def test_time_range_error(self):
        sp = ScheduleSpec("vp")
        with pytest.raises(TimeRange):
            marginal_sample(sp, np.zeros(2), 1.5, np.zeros(2))


class TestScoreIdentities:
    def test_flow_direct_substitution(self):
        sp = ScheduleSpec("flow_linear")
        s = score_from_velocity(sp, np.array([-1.0, 0.0]), np.array([1.0, 0.0]), 0.5)
        np.testing.assert_allclose(s, [-1.0, 0.0], atol=1e-14)

    def test_flow_cancellation(self):
        sp = ScheduleSpec("flow_linear")
        t = 0.4
        x = np.array([0.8, -0.2])
        v = -x / sp.scale(t)
        np.testing.assert_allclose(score_from_velocity(sp, v, x, t), 0.0, atol=1e-14)

    def test_flow_gaussian_bridge_consistency(self):
        """The velocity-to-score map recovers the analytic marginal score."""
        sp = ScheduleSpec("flow_linear")
        mu = np.array([0.5, -1.0])
        S = np.array([[2.0, 0.6], [0.6, 1.0]])
        f = analytic_gaussian_field(mu, S, sp)
        for t in (0.2, 0.5, 0.8):
            x = RNG.standard_normal(2)
            s = score_from_velocity(sp, f.drift(x, t), x, t)
            np.testing.assert_allclose(s, f.score(x, t), atol=1e-8)

    def test_trig_substitution(self):
        sp = ScheduleSpec("trigflow")
        s = score_from_velocity_trig(sp, np.array([1.0, 0.0]), np.array([1.0, 0.0]), math.pi / 4)
        np.testing.assert_allclose(s, [-2.0, 0.0], atol=1e-14)

    def test_trig_zero_velocity(self):
        sp = ScheduleSpec("trigflow")
        x = np.array([0.3, 0.4])
        np.testing.assert_allclose(score_from_velocity_trig(sp, np.zeros(2), x, 1.0), -x, atol=0)

    def test_trig_gaussian_consistency_with_data_std(self):
        sp = ScheduleSpec("trigflow", sigma_d=1.7)
        mu = np.array([0.5, -1.0])
        S = np.array([[2.0, 0.6], [0.6, 1.0]])
        f = analytic_gaussian_field(mu, S, sp)
        for t in (0.3, 0.9, 1.4):
            x = RNG.standard_normal(2)
            s = score_from_velocity_trig(sp, f.drift(x, t), x, t)
            np.testing.assert_allclose(s, f.score(x, t), atol=1e-8)

    def test_singular_times(self):
        with pytest.raises(SingularTime):
            score_from_velocity(ScheduleSpec("flow_linear"), np.zeros(2), np.zeros(2), 0.0)
        with pytest.raises(SingularTime):
            score_from_velocity_trig(ScheduleSpec("trigflow"), np.zeros(2), np.zeros(2), 0.0)


class TestDriftAssembly:
    def test_standard_normal_under_vp_is_stationary(self):
        """The preserved distribution has identically zero transport."""
        sp = ScheduleSpec("vp")
        f = analytic_gaussian_field(np.zeros(2), np.eye(2), sp)
        for t in (sp.eps, 0.3, 0.9):
            x = RNG.standard_normal(2)
            np.testing.assert_allclose(pf_ode_drift(f, x, t), 0.0, atol=1e-12)

    def test_ve_drift_is_score_scaled(self):
        sp = ScheduleSpec("ve")
        net = FieldNet(2, 2, [8], time_embedding="append_raw_t", seed=1)
        f = field_from_score_net(sp, net)
        x = RNG.standard_normal(2)
        t = 0.5
        expected = -0.5 * sp.diffusion_sq(t) * net.forward(x, t)
        np.testing.assert_allclose(f.drift(x, t), expected, atol=1e-14)

    def test_zero_velocity_net_gives_zero_drift(self):
        sp = ScheduleSpec("flow_linear")
        net = FieldNet(2, 2, [8], time_embedding="append_raw_t", init_scale=0.0)
        f = field_from_velocity_net(sp, net)
        assert np.all(f.drift(RNG.standard_normal(2), 0.5) == 0.0)

    def test_score_net_field_jacobian_consistency(self):
        sp = ScheduleSpec("vp")
        net = FieldNet(3, 3, [10], activation="silu", time_embedding="append_raw_t", seed=2)
        f = field_from_score_net(sp, net)
        x = RNG.standard_normal(3)
        t = 0.6
        J = f.drift_jacobian(x, t)
        h = 1e-6
        Jfd = np.zeros((3, 3))
        for j in range(3):
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            Jfd[:, j] = (f.drift(xp, t) - f.drift(xm, t)) / (2 * h)
        np.testing.assert_allclose(J, Jfd, atol=1e-6)
        u = RNG.standard_normal(3)
        np.testing.assert_allclose(f.drift_jvp(x, t, u), J @ u, atol=1e-12)
        assert f.drift_divergence(x, t) == pytest.approx(np.trace(J))

    def test_score_recovered_from_drift(self):
        sp = ScheduleSpec("vp")
        net = FieldNet(2, 2, [8], time_embedding="append_raw_t", seed=3)
        f = field_from_score_net(sp, net)
        x = RNG.standard_normal(2)
        t = 0.4
        v = f.drift(x, t)
        np.testing.assert_allclose(f.score_from_drift(x, t, v), net.forward(x, t), atol=1e-12)


class TestAnalyticGaussianField:
    def test_anisotropic_score_formula(self):
        sp = ScheduleSpec("vp")
        S = np.diag([4.0, 1.0])
        f = analytic_gaussian_field(np.zeros(2), S, sp)
        t = 0.41
        nu, eta = float(sp.scale(t)), float(sp.std(t))
        x = RNG.standard_normal(2)
        expected = -np.linalg.solve(nu * nu * S + eta * eta * np.eye(2), x)
        np.testing.assert_allclose(f.score(x, t), expected, atol=1e-12)

    def test_score_matches_log_density_gradient(self):
        sp = ScheduleSpec("vp")
        mu = np.array([0.3, -0.2])
        S = np.array([[1.5, 0.4], [0.4, 0.7]])
        f = analytic_gaussian_field(mu, S, sp)
        x = RNG.standard_normal(2)
        t = 0.3
        h = 1e-6
        g = np.array(
            [
                (f.marginal_log_density(x + h * e, t) - f.marginal_log_density(x - h * e, t)) / (2 * h)
                for e in np.eye(2)
            ]
        )
        np.testing.assert_allclose(f.score(x, t), g, atol=1e-8)

    def test_ve_one_dim_marginal(self):
        """For unit-variance data the ve marginal variance is 1 + eta^2."""
        sp = ScheduleSpec("ve")
        f = analytic_gaussian_field(np.zeros(1), np.eye(1), sp)
        t = 0.6
        eta2 = float(sp.std(t)) ** 2
        x = np.array([1.3])
        np.testing.assert_allclose(f.score(x, t), -x / (1.0 + eta2), atol=1e-12)

    def test_rejects_bad_covariance(self):
        sp = ScheduleSpec("vp")
        with pytest.raises(InvalidCovariance):
            analytic_gaussian_field(np.zeros(2), np.array([[1.0, 0.9], [0.2, 1.0]]), sp)
        with pytest.raises(InvalidCovariance):
            analytic_gaussian_field(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), sp)

    def test_exact_marginal_sampling_moments(self):
        sp = ScheduleSpec("flow_linear")
        mu = np.array([0.5, -1.0])
        S = np.array([[2.0, 0.6], [0.6, 1.0]])
        f = analytic_gaussian_field(mu, S, sp)
        t = 0.5
        X = f.sample_marginal(t, 200_000, np.random.default_rng(1))
        a, s = float(sp.scale(t)), float(sp.std(t))
        np.testing.assert_allclose(X.mean(axis=0), a * mu, atol=0.02)
        np.testing.assert_allclose(np.cov(X.T), a * a * S + s * s * np.eye(2), atol=0.03)


class TestBoundaryDecay:
    def test_flux_decays_monotonically_past_the_bulk(self):
        """Density-weighted flux along rays vanishes outside the 4-sigma
        shell, the numerical form of the boundary condition."""
        sp = ScheduleSpec("vp")
        f = analytic_gaussian_field(np.zeros(2), np.diag([4.0, 1.0]), sp)
        for trial in range(5):
            ray = RNG.standard_normal(2)
            radii = np.linspace(9.0, 25.0, 17)  # 4 sigma of the widest axis is 8
            flux = boundary_decay_probe(f, 0.3, ray, radii)
            assert np.all(np.diff(flux) < 0)
            assert flux[-1] < 1e-12
