import math

import numpy as np
import pytest

from geonode import dynamics as dyn
from geonode.adjoint import CostSpec
from geonode.integrate import SolverConfig
from geonode.lie import SE3, Pose, ProductElement, random_rotation
from geonode.training import (AdamState, SamplerSpec, TrainConfig, TrainingAborted, adam_step,
                              evaluate, learning_rate, moving_average, sample_initial, train)

TABLE_W = np.array([4, 20, 5, 1, 1, 1, 1, 1, 1.0])


def test_sampler_forced_zero_ranges_give_mean_pose(rng):
    H_I = Pose(random_rotation(rng), rng.normal(size=3))
    g = sample_initial(SamplerSpec(H_I, 0, 0, 0, 0), rng, 5)
    np.testing.assert_allclose(g.pose.R, np.broadcast_to(H_I.R, (5, 3, 3)), atol=1e-15)
    np.testing.assert_allclose(g.pose.p, np.broadcast_to(H_I.p, (5, 3)), atol=1e-15)
    np.testing.assert_array_equal(g.mom, 0)


def test_sampler_boundary_rotation():
    # alpha = pi about e3: force the draws through a stub generator
    class Stub:
        def uniform(self, lo, hi, n):
            return np.full(n, hi)

        def standard_normal(self, shape):
            out = np.zeros(shape)
            out[:, 2] = 1.0
            return out

    g = sample_initial(SamplerSpec(alpha_max=math.pi, d_max=0, alpha_p_max=0, d_p_max=0), Stub(), 1)
    ref = SE3.exp(np.array([0, 0, math.pi, 0, 0, 0]))
    np.testing.assert_allclose(g.pose.R[0], ref.R, atol=1e-15)
    np.testing.assert_allclose(g.pose.p[0], 0, atol=1e-15)


def test_sampler_statistics(rng):
    n = 10_000
    g = sample_initial(SamplerSpec(), rng, n)
    q = SE3.log(g.pose)
    alpha = np.linalg.norm(q[:, :3], axis=-1)
    sigma = math.pi / math.sqrt(12 * n)
    assert abs(alpha.mean() - math.pi / 2) < 3 * sigma
    assert np.all(np.linalg.norm(g.mom[:, :3], axis=-1) <= 0.03 + 1e-15)
    assert np.all(np.linalg.norm(g.mom[:, 3:], axis=-1) <= 1 + 1e-15)


def test_sampler_rejects_negative_range():
    with pytest.raises(ValueError):
        SamplerSpec(alpha_max=-1)


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0, 3.0])
    new, st = adam_step(AdamState.zeros(3), p, np.zeros(3), 0.1)
    np.testing.assert_array_equal(new, p)
    assert st.t == 1


def test_adam_first_step_is_signed_rate():
    p = np.array([1.0, -2.0, 3.0])
    g = np.array([3.0, -0.5, 1e3])
    new, _ = adam_step(AdamState.zeros(3), p, g, 0.01)
    # bias-corrected moments give m_hat = g, v_hat = g^2
    np.testing.assert_allclose(new, p - 0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)
    np.testing.assert_allclose(new, p - 0.01 * np.sign(g), atol=1e-9)


def test_adam_moments_decay_over_opposite_steps():
    st = AdamState.zeros(1)
    p = np.zeros(1)
    p, st = adam_step(st, p, np.array([1.0]), 1e-3)
    p, st = adam_step(st, p, np.array([-1.0]), 1e-3)
    assert st.m[0] == pytest.approx(0.9 * 0.1 - 0.1)
    assert st.v[0] == pytest.approx(0.999 * 0.001 + 0.001)
    assert st.t == 2


def test_adam_skips_non_finite_gradient():
    p = np.ones(2)
    st = AdamState.zeros(2)
    new, st2 = adam_step(st, p, np.array([np.nan, 1.0]), 1e-3)
    np.testing.assert_array_equal(new, p)
    assert st2 is st


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(2), np.ones(3), np.ones(3), 1e-3)


def test_learning_rate_schedule():
    cfg = TrainConfig(eta=1e-3, gamma=0.999, restarts=((1000, 1e-2),))
    for k in (0, 1, 500, 999):
        assert learning_rate(cfg, k) == pytest.approx(1e-3 * 0.999 ** k, rel=1e-14)
    assert learning_rate(cfg, 1000) == 1e-2
    assert learning_rate(cfg, 1150) == pytest.approx(1e-2 * 0.999 ** 150, rel=1e-14)


def test_epochs_zero_returns_initial_state():
    ctrl = dyn.QuadraticController()
    spec = dyn.ControllerSpec(ctrl)
    cfg = TrainConfig(epochs=0, batch_size=4, eval_n=4)
    res = train(cfg, spec, CostSpec(weights=TABLE_W, horizon=0.1), dyn.BodyParams(), workers=1)
    assert res.state.epoch == 0
    np.testing.assert_array_equal(res.state.params, ctrl.params())
    assert res.history == []
    assert [e for e, _ in res.evals] == [0]


def test_evaluate_at_goal_is_zero():
    spec = dyn.ControllerSpec(dyn.QuadraticController())
    g0 = ProductElement(SE3.identity((3,)), np.zeros((3, 6)))
    ev = evaluate(spec, dyn.BodyParams(), CostSpec(weights=TABLE_W, horizon=1.0), g0, n_times=11)
    np.testing.assert_allclose(ev.angle, 0, atol=1e-12)
    np.testing.assert_allclose(ev.distance, 0, atol=1e-12)
    assert not ev.failed.any()


def test_evaluate_free_body_conserves_kinetic_energy(rng):
    spec = dyn.ControllerSpec(dyn.NullController())
    body = dyn.BodyParams(inertia=np.diag([1, 2, 3, 1, 1, 1.0]))
    g0 = ProductElement(SE3.exp(rng.normal(size=(4, 6))), rng.normal(size=(4, 6)))
    tight = SolverConfig(rtol=1e-11, atol=1e-11)
    ev = evaluate(spec, body, CostSpec(weights=TABLE_W, horizon=2.0), g0, tight)
    np.testing.assert_allclose(ev.e_kin, ev.e_kin[:, :1] * np.ones_like(ev.e_kin), rtol=1e-8)
    np.testing.assert_array_equal(ev.e_pot, 0)


def test_evaluate_excludes_failed_from_means():
    spec = dyn.ControllerSpec(dyn.NullController())
    g0 = ProductElement(SE3.identity((2,)), np.zeros((2, 6)))
    ev = evaluate(spec, dyn.BodyParams(), CostSpec(weights=TABLE_W, horizon=0.5), g0, n_times=3)
    ev.failed[1] = True
    ev.angle[1] = 7.0
    assert ev.mean_final_angle == 0.0


def test_training_is_deterministic_and_reduces_loss():
    spec = dyn.ControllerSpec(dyn.QuadraticController())
    cost = CostSpec(weights=TABLE_W, horizon=1.0)
    cfg = TrainConfig(epochs=20, batch_size=16, eta=2e-2, seed=7, restarts=(), eval_every=10, eval_n=16)
    a = train(cfg, spec, cost, dyn.BodyParams(), workers=1)
    b = train(cfg, spec, cost, dyn.BodyParams(), workers=1)
    strip = lambda h: [(r.epoch, r.loss, r.terminal_loss, r.integral_loss, r.eta, r.mean_final_angle) for r in h]
    assert strip(a.history) == strip(b.history)
    np.testing.assert_array_equal(a.state.params, b.state.params)
    ma = moving_average([r.loss for r in a.history], 5)
    assert ma[-1] < ma[0]


def test_resume_matches_uninterrupted_run():
    spec = dyn.ControllerSpec(dyn.QuadraticController())
    cost = CostSpec(weights=TABLE_W, horizon=0.5)
    full = TrainConfig(epochs=6, batch_size=8, seed=3, restarts=((4, 1e-2),), eval_every=3, eval_n=8)
    half = TrainConfig(**{**full.__dict__, "epochs": 3})
    ref = train(full, spec, cost, dyn.BodyParams(), workers=1)
    first = train(half, spec, cost, dyn.BodyParams(), workers=1)
    rest = train(full, spec, cost, dyn.BodyParams(), state=first.state, workers=1)
    assert [r.epoch for r in rest.history] == [4, 5, 6]
    np.testing.assert_array_equal(rest.state.params, ref.state.params)
    assert [r.loss for r in first.history + rest.history] == [r.loss for r in ref.history]


def test_abort_when_most_samples_fail():
    class Broken(dyn.QuadraticController):
        def damping(self, H, P):
            return np.full(np.shape(P), np.nan)

        def with_params(self, theta):
            return Broken(theta)

    cfg = TrainConfig(epochs=1, batch_size=4, eval_n=4, restarts=())
    with pytest.raises(TrainingAborted) as err:
        train(cfg, dyn.ControllerSpec(Broken()), CostSpec(weights=TABLE_W, horizon=0.1),
              dyn.BodyParams(), workers=1, evaluate_initial=False)
    assert err.value.diagnostics["epoch"] == 1
