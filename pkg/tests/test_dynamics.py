import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from probf import dynamics as D
from probf.errors import ContractViolation, IntegrationBlowup

finite = st.floats(-3, 3, allow_nan=False)


def linear_model(A):
    A = np.asarray(A, dtype=float)
    return D.ControlAffineModel(
        name="linear", state_dim=len(A), control_dim=1,
        fields=lambda x, p: (A @ x, np.zeros((len(A), 1))),
        params_true={}, params_nominal={})


def test_quadrotor_hover_thrust_cancels_gravity():
    q = D.make_quadrotor()
    m = q.params_true["mass"]
    xdot = D.eval_true(q, np.zeros(6), [m * 9.81, 0.0])
    assert xdot[4] == pytest.approx(0.0, abs=1e-12)


def test_quadrotor_nominal_torque_gain():
    q = D.make_quadrotor()
    assert D.eval_nominal(q, np.zeros(6), [0.0, 1.3])[5] == pytest.approx(1.0)
    assert D.eval_true(q, np.zeros(6), [0.0, 1.1])[5] == pytest.approx(1.0)


def test_quadrotor_parameter_sets():
    q = D.make_quadrotor()
    assert (q.params_true["mass"], q.params_true["inertia"]) == (1.8, 1.1)
    assert (q.params_nominal["mass"], q.params_nominal["inertia"]) == (1.5, 1.3)
    differing = {k for k in q.params_true if q.params_true[k] != q.params_nominal[k]}
    assert differing == {"mass", "inertia"}


def test_segway_true_differs_from_nominal_by_10_to_20_percent():
    s = D.make_segway()
    ratios = {k: s.params_true[k] / s.params_nominal[k] for k in s.params_true
              if s.params_true[k] != s.params_nominal[k]}
    assert ratios
    assert all(0.1 <= abs(r - 1) <= 0.2 + 1e-12 for r in ratios.values())


@pytest.mark.parametrize("make", [D.make_segway, D.make_quadrotor, D.make_quadrotor_extended])
def test_dimensions(make):
    model = make()
    x = np.zeros(model.state_dim)
    f, g = model.f_g(x, "true")
    assert f.shape == (model.state_dim,)
    assert g.shape == (model.state_dim, model.control_dim)


def test_segway_zero_control_is_drift():
    s = D.make_segway()
    x = np.array([0.3, 0.2, 0.0, 0.0])
    assert np.array_equal(D.eval_true(s, x, [0.0]), s.drift(x))


def test_matched_model_true_equals_nominal():
    s = D.make_segway().matched()
    x, u = np.array([0.1, 0.2, 0.3, -0.1]), np.array([0.7])
    assert np.array_equal(D.eval_true(s, x, u), D.eval_nominal(s, x, u))


def test_dimension_mismatch_raises():
    s = D.make_segway()
    with pytest.raises(ContractViolation):
        D.eval_true(s, np.zeros(3), [0.0])
    with pytest.raises(ContractViolation):
        D.eval_true(s, np.zeros(4), [0.0, 1.0])


@given(st.lists(finite, min_size=4, max_size=4), finite, finite, st.floats(0, 1))
def test_segway_control_affine(x, u1, u2, lam):
    s = D.make_segway()
    x = np.array(x)
    lhs = D.eval_true(s, x, [lam * u1 + (1 - lam) * u2])
    rhs = lam * D.eval_true(s, x, [u1]) + (1 - lam) * D.eval_true(s, x, [u2])
    assert np.allclose(lhs, rhs, atol=1e-12, rtol=0)


@given(st.lists(finite, min_size=6, max_size=6), st.lists(finite, min_size=2, max_size=2),
       st.lists(finite, min_size=2, max_size=2), st.floats(0, 1))
def test_quadrotor_control_affine(x, u1, u2, lam):
    q = D.make_quadrotor()
    x, u1, u2 = map(np.array, (x, u1, u2))
    lhs = D.eval_nominal(q, x, lam * u1 + (1 - lam) * u2)
    rhs = lam * D.eval_nominal(q, x, u1) + (1 - lam) * D.eval_nominal(q, x, u2)
    assert np.allclose(lhs, rhs, atol=1e-12, rtol=0)


def test_evaluation_repeatable_bit_for_bit():
    s = D.make_segway()
    x, u = np.array([0.1, 0.2, 0.3, -0.1]), np.array([0.7])
    assert np.array_equal(D.eval_true(s, x, u), D.eval_true(s, x, u))


def test_rk4_matches_matrix_exponential():
    A = np.array([[0.0, 1.0], [-2.0, -0.3]])
    model = linear_model(A)
    x0 = np.array([1.0, -0.5])
    errs = []
    for dt in (0.1, 0.05):
        exact = expm(A * dt) @ x0
        errs.append(np.linalg.norm(D.step_rk4(model, x0, [0.0], dt) - exact))
    # local error is O(dt^5): halving dt shrinks it about 32x
    assert errs[0] / errs[1] == pytest.approx(32, rel=0.15)


def test_rk4_single_step_close_to_euler_to_second_order():
    s = D.make_segway()
    x, u = np.array([0.0, 0.2, 0.1, 0.3]), np.array([0.5])
    gaps = []
    for dt in (1e-2, 5e-3):
        gaps.append(np.linalg.norm(D.step_rk4(s, x, u, dt) - (x + dt * D.eval_true(s, x, u))))
    assert gaps[0] / gaps[1] >= 3.5


def segway_global_error(dt, x0, u, ref):
    s = D.make_segway()
    x = x0.copy()
    for _ in range(int(round(1.0 / dt))):
        x = D.step_rk4(s, x, u, dt)
    return np.linalg.norm(x - ref)


def rk4_order_slope():
    s = D.make_segway()
    x0, u = np.array([0.0, 0.25, 0.0, 0.4]), np.array([0.3])
    ref = x0.copy()
    for _ in range(100_000):
        ref = D.step_rk4(s, ref, u, 1e-5)
    dts = np.array([1e-2, 5e-3, 2.5e-3])
    errs = np.array([segway_global_error(dt, x0, u, ref) for dt in dts])
    return float(np.polyfit(np.log(dts), np.log(errs), 1)[0])


def test_rk4_global_order_four():
    assert rk4_order_slope() == pytest.approx(4.0, abs=0.3)


def test_u_irrelevant_when_g_is_zero():
    model = linear_model([[0.0, 1.0], [-1.0, 0.0]])
    x = np.array([1.0, 0.0])
    assert np.array_equal(D.step_rk4(model, x, [5.0], 0.1), D.step_rk4(model, x, [-5.0], 0.1))


def test_step_rejects_bad_dt():
    with pytest.raises(ContractViolation):
        D.step_rk4(D.make_segway(), np.zeros(4), [0.0], 0.0)


def test_blowup_carries_step_index():
    model = D.ControlAffineModel(name="blow", state_dim=1, control_dim=1,
                                 fields=lambda x, p: (x ** 3 * 1e200, np.zeros((1, 1))),
                                 params_true={}, params_nominal={})
    with pytest.raises(IntegrationBlowup) as info, np.errstate(over="ignore"):
        D.rollout(model, lambda t, x: [0.0], [10.0], 1.0, 0.1)
    assert info.value.step_index == 0
    assert info.value.trajectory is not None
    assert len(info.value.trajectory.states) == 1


def test_rollout_zero_horizon():
    traj = D.rollout(D.make_segway(), lambda t, x: [0.0], np.zeros(4), 0.0, 0.01)
    assert traj.states.shape == (1, 4)
    assert traj.controls.shape == (0, 1)


def test_rollout_shapes_and_times():
    traj = D.rollout(D.make_segway(), lambda t, x: [0.1], np.zeros(4), 0.5, 0.01)
    assert len(traj.states) == 51 and len(traj.controls) == 50
    assert np.allclose(np.diff(traj.times), 0.01)


def test_rollout_deterministic():
    s = D.make_segway().matched()
    ctrl = lambda t, x: [math.sin(t)]
    a = D.rollout(s, ctrl, np.array([0.0, 0.2, 0.0, 0.0]), 1.0, 0.01)
    b = D.rollout(s, ctrl, np.array([0.0, 0.2, 0.0, 0.0]), 1.0, 0.01)
    assert np.array_equal(a.states, b.states)


def test_rollout_rejects_fractional_horizon():
    with pytest.raises(ContractViolation):
        D.rollout(D.make_segway(), lambda t, x: [0.0], np.zeros(4), 0.015, 0.01)


def test_trajectory_csv_roundtrip(tmp_path):
    from probf.barrier import segway_barrier
    traj = D.rollout(D.make_segway(), lambda t, x: [0.1], np.array([0, 0.15, 0, 0.0]), 0.05, 0.01,
                     barrier=segway_barrier())
    path = traj.to_csv(tmp_path / "t.csv")
    header = path.read_text().splitlines()[0]
    assert header == "t,x0,x1,x2,x3,u0,h,delta_used,feasible,slack"
    cols = D.read_trajectory_csv(path)
    assert np.array_equal(cols["x1"], traj.states[:, 1])
    assert np.isnan(cols["u0"][-1])
