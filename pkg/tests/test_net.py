"""Network derivative oracles, optimizer behavior, checkpoint round-trips."""

import numpy as np
import pytest

from stadlab import net as netmod
from stadlab.net import (
    CorruptModel,
    FieldNet,
    Optimizer,
    ShapeError,
    flatten_params,
    load_checkpoint,
    param_grad_forward,
    param_grad_input_grad,
    save_checkpoint,
    set_flat_params,
)

RNG = np.random.default_rng(0)


def finite_diff_wrt_input(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    out0 = np.atleast_1d(f(x))
    J = np.zeros(out0.shape + x.shape)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        J[..., i] = (np.atleast_1d(f(xp)) - np.atleast_1d(f(xm))) / (2 * h)
    return J


def finite_diff_wrt_params(net, loss_fn, h=1e-6):
    grads = []
    for p in net.parameters():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            net.mark_parameters_dirty()
            lp = loss_fn()
            p[idx] = old - h
            net.mark_parameters_dirty()
            lm = loss_fn()
            p[idx] = old
            net.mark_parameters_dirty()
            g[idx] = (lp - lm) / (2 * h)
            it.iternext()
        grads.append(g)
    return grads


class TestForward:
    def test_zero_net_maps_to_zero(self):
        net = FieldNet(3, 3, [8], time_embedding="none", init_scale=0.0)
        assert np.all(net.forward(RNG.standard_normal(3)) == 0.0)

    def test_single_affine_layer(self):
        net = FieldNet(3, 2, [], time_embedding="none", seed=1)
        net.biases[0][:] = [0.5, -0.25]
        x = RNG.standard_normal(3)
        np.testing.assert_allclose(net.forward(x), net.weights[0] @ x + net.biases[0], rtol=0, atol=0)

    def test_matches_straight_line_reimplementation(self):
        """Independent loop-free evaluation of the same weights agrees."""
        net = FieldNet(4, 4, [16, 12], activation="tanh", time_embedding="append_log_t", seed=7)
        x = RNG.standard_normal(4)
        t = 0.3
        h = np.concatenate([x, [np.log(t)]])
        h = np.tanh(net.weights[0] @ h + net.biases[0])
        h = np.tanh(net.weights[1] @ h + net.biases[1])
        expected = net.weights[2] @ h + net.biases[2]
        np.testing.assert_allclose(net.forward(x, t), expected, atol=1e-14)

    def test_batched_matches_single(self):
        net = FieldNet(3, 3, [10], activation="silu", time_embedding="append_raw_t", context_dim=2, seed=2)
        X = RNG.standard_normal((6, 3))
        T = RNG.uniform(0.1, 0.9, 6)
        C = RNG.standard_normal((6, 2))
        batch = net.forward(X, T, C)
        for i in range(6):
            np.testing.assert_allclose(batch[i], net.forward(X[i], T[i], C[i]), atol=1e-15)

    def test_corrupt_parameters_raise(self):
        net = FieldNet(2, 2, [4], time_embedding="none", seed=0)
        net.weights[0][0, 0] = np.nan
        net.mark_parameters_dirty()
        with pytest.raises(CorruptModel):
            net.forward(np.zeros(2))


class TestJacobian:
    def test_linear_net_jacobian_is_weight_matrix(self):
        net = FieldNet(3, 3, [], time_embedding="none", seed=3)
        np.testing.assert_allclose(net.jacobian(RNG.standard_normal(3)), net.weights[0], atol=0)

    def test_finite_difference_agreement(self):
        for trial in range(5):
            act = ("tanh", "silu")[trial % 2]
            net = FieldNet(4, 4, [16, 12], activation=act, time_embedding="append_log_t", seed=trial)
            for W in net.weights:
                W *= 2.0
            x = RNG.standard_normal(4)
            J = net.jacobian(x, 0.4)
            Jfd = finite_diff_wrt_input(lambda xx: net.forward(xx, 0.4), x)
            assert np.max(np.abs(J - Jfd)) / max(1e-8, np.max(np.abs(Jfd))) <= 1e-5

    def test_contraction_field_divergence(self):
        """A pure contraction x -> -x has divergence -D."""
        net = FieldNet(5, 5, [], time_embedding="none", init_scale=0.0)
        net.weights[0][:] = -np.eye(5)
        J = net.jacobian(RNG.standard_normal(5))
        assert np.trace(J) == -5.0


class TestJVP:
    def test_linear_net_basis_tangent(self):
        net = FieldNet(3, 3, [], time_embedding="none", seed=4)
        e1 = np.array([1.0, 0.0, 0.0])
        np.testing.assert_allclose(net.jvp(RNG.standard_normal(3), tangent=e1), net.weights[0][:, 0], atol=0)

    def test_matches_jacobian_product(self):
        net = FieldNet(4, 4, [14, 10], activation="silu", time_embedding="append_raw_t", seed=5)
        x = RNG.standard_normal(4)
        u = RNG.standard_normal(4)
        np.testing.assert_allclose(net.jvp(x, 0.5, tangent=u), net.jacobian(x, 0.5) @ u, atol=1e-12)

    def test_zero_tangent(self):
        net = FieldNet(3, 3, [8], time_embedding="none", seed=6)
        assert np.all(net.jvp(RNG.standard_normal(3), tangent=np.zeros(3)) == 0.0)


class TestInputGradient:
    def test_linear_head(self):
        net = FieldNet(4, 1, [], time_embedding="none", seed=7)
        np.testing.assert_allclose(net.input_gradient(RNG.standard_normal(4)), net.weights[0][0], atol=0)

    def test_tanh_head_at_origin(self):
        """d/dx tanh(w.x) at x=0 equals w because tanh'(0) = 1."""
        net = FieldNet(3, 1, [1], activation="tanh", time_embedding="none", init_scale=0.0)
        net.weights[0][:] = np.array([[0.3, -0.7, 1.1]])
        net.weights[1][:] = np.array([[1.0]])
        np.testing.assert_allclose(net.input_gradient(np.zeros(3)), [0.3, -0.7, 1.1], atol=1e-14)

    def test_finite_difference_agreement(self):
        net = FieldNet(5, 1, [12, 8], activation="silu", time_embedding="append_log_t", seed=8)
        for W in net.weights:
            W *= 2.0
        x = RNG.standard_normal(5)
        g = net.input_gradient(x, 0.6)
        gfd = finite_diff_wrt_input(lambda xx: net.forward(xx, 0.6), x)[0]
        assert np.max(np.abs(g - gfd)) / max(1e-8, np.max(np.abs(gfd))) <= 1e-5

    def test_requires_scalar_output(self):
        net = FieldNet(3, 3, [6], time_embedding="none", seed=9)
        with pytest.raises(ShapeError):
            net.input_gradient(np.zeros(3))


class TestParameterGradients:
    def test_linear_closed_form(self):
        """For L = ||Wx + b||^2 the weight gradient is 2(Wx+b) x^T."""
        net = FieldNet(3, 2, [], time_embedding="none", seed=10)
        x = RNG.standard_normal(3)
        y = net.forward(x)
        grads = param_grad_forward(net, x[None], None, None, 2.0 * y[None])
        np.testing.assert_allclose(grads[0], 2.0 * np.outer(y, x), atol=1e-13)
        np.testing.assert_allclose(grads[1], 2.0 * y, atol=1e-13)

    def test_forward_pattern_finite_difference(self):
        net = FieldNet(3, 2, [6, 5], activation="tanh", time_embedding="append_raw_t", seed=11)
        for W in net.weights:
            W *= 2.0
        X = RNG.standard_normal((4, 3))
        T = RNG.uniform(0.2, 0.9, 4)
        A = RNG.standard_normal((4, 2))
        an = param_grad_forward(net, X, T, None, A)
        fd = finite_diff_wrt_params(net, lambda: float(np.sum(net.forward(X, T) * A)))
        for a, b in zip(an, fd):
            assert np.max(np.abs(a - b)) / max(1e-6, np.max(np.abs(b))) <= 1e-4

    def test_input_gradient_pattern_finite_difference(self):
        """Second-order pattern: d/dtheta of <grad_x head, u>."""
        for act in ("tanh", "silu"):
            net = FieldNet(3, 1, [8, 6], activation=act, time_embedding="append_log_t", seed=12)
            for W in net.weights:
                W *= 2.0
            X = RNG.standard_normal((5, 3))
            T = RNG.uniform(0.2, 0.9, 5)
            U = RNG.standard_normal((5, 3))
            an = param_grad_input_grad(net, X, T, None, U)
            fd = finite_diff_wrt_params(net, lambda: float(np.sum(net.input_gradient(X, T) * U)))
            for a, b in zip(an, fd):
                assert np.max(np.abs(a - b)) / max(1e-6, np.max(np.abs(b))) <= 1e-4

    def test_cross_term_gradient_nonzero_at_zero_head(self):
        """With the head's output layer zeroed the value term vanishes but
        the cross term <grad_x head, v> still carries gradient signal."""
        net = FieldNet(2, 1, [6], activation="tanh", time_embedding="none", seed=13)
        net.weights[-1][:] = 0.0
        net.mark_parameters_dirty()
        X = RNG.standard_normal((3, 2))
        U = RNG.standard_normal((3, 2))
        an = param_grad_input_grad(net, X, None, None, U)
        fd = finite_diff_wrt_params(net, lambda: float(np.sum(net.input_gradient(X) * U)))
        total = sum(float(np.abs(g).sum()) for g in an)
        assert total > 0.0
        for a, b in zip(an, fd):
            assert np.max(np.abs(a - b)) <= 1e-6 + 1e-4 * np.max(np.abs(b))


class TestOptimizer:
    def test_cosine_schedule_endpoints(self):
        opt = Optimizer(lr_max=1e-2, lr_min=1e-5, schedule="cosine", total_steps=100)
        assert opt.learning_rate(0) == pytest.approx(1e-2)
        assert opt.learning_rate(100) == pytest.approx(1e-5)

    def test_step_halving_reaches_floor(self):
        opt = Optimizer(lr_max=1e-3, lr_min=1e-5, schedule="step_halving", total_steps=800)
        assert opt.learning_rate(0) == pytest.approx(1e-3)
        assert opt.learning_rate(799) == pytest.approx(1e-5, rel=1.0)

    def test_gradient_clipping_bounds_update(self):
        opt = Optimizer(lr_max=1.0, clip_norm=1.0)
        p = [np.zeros(3)]
        g = [np.array([100.0, 0.0, 0.0])]
        gnorm = opt.step(p, g)
        assert gnorm == pytest.approx(100.0)
        assert np.abs(p[0]).max() <= 1.0 + 1e-9

    def test_adamw_decays_weights(self):
        opt = Optimizer(kind="adamw", lr_max=0.1, weight_decay=0.5, clip_norm=None)
        p = [np.array([1.0])]
        opt.step(p, [np.array([0.0])])
        assert p[0][0] < 1.0


class TestDeterminismAndCheckpoints:
    def _train_once(self, seed):
        from stadlab import targets, train
        from stadlab.dynamics import ScheduleSpec

        target = targets.make_gaussian([0.0, 0.0], np.eye(2))
        data = target.sample(512, seed=1)
        net = FieldNet(2, 2, [16], time_embedding="append_raw_t", seed=seed)
        hyper = train.TrainHyper(steps=60, batch_size=32, lr_max=1e-3, seed=seed)
        net, _ = train.train_score_dsm(net, data, ScheduleSpec("vp"), hyper)
        return flatten_params(net)

    def test_bit_identical_training(self):
        assert np.array_equal(self._train_once(5), self._train_once(5))

    def test_checkpoint_roundtrip_is_bit_exact(self, tmp_path):
        net = FieldNet(4, 1, [10, 6], activation="silu", time_embedding="append_log_t", context_dim=2, seed=14)
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path, schedule_spec_id="vp[0.001,1]b(0.1,20)sd1", metadata={"seed": 14})
        loaded, header = load_checkpoint(path)
        assert np.array_equal(flatten_params(net), flatten_params(loaded))
        x = RNG.standard_normal(4)
        c = RNG.standard_normal(2)
        assert np.array_equal(net.forward(x, 0.5, c), loaded.forward(x, 0.5, c))
        assert header["schedule_spec_id"] == "vp[0.001,1]b(0.1,20)sd1"
        assert header["metadata"]["seed"] == 14

    def test_set_flat_params_shape_guard(self):
        net = FieldNet(2, 1, [4], time_embedding="none", seed=0)
        with pytest.raises(ShapeError):
            set_flat_params(net, np.zeros(3))
