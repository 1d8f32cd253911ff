import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from probf import barrier as B
from probf import dynamics as D
from probf.episodic import residual_label
from probf.errors import ContractViolation, StructuralError
from probf.safety_filter import NominalFilter


def segway_state(theta, theta_dot, p=0.0, p_dot=0.0):
    return np.array([p, theta, p_dot, theta_dot])


def planar_state(x, y):
    return np.array([x, y, 0.0, 0.0, 0.0, 0.0])


def fd_gradient(h, x, eps=1e-6):
    grad = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = eps
        grad[i] = (h(x + e) - h(x - e)) / (2 * eps)
    return grad


@pytest.mark.parametrize("theta, theta_dot, expected", [
    (0.1383, 0.0, 0.06848689),
    (0.1383, 0.2617, 0.0),
    (0.1383 + 0.2617, 0.0, 0.0),
])
def test_segway_barrier_values(theta, theta_dot, expected):
    assert B.segway_barrier().h(segway_state(theta, theta_dot)) == pytest.approx(expected, abs=1e-12)


def test_segway_gradient_zero_in_theta_at_equilibrium():
    grad = B.segway_barrier().grad_h(segway_state(0.1383, 0.3))
    assert grad[1] == 0.0


@pytest.mark.parametrize("x, y, expected", [
    (1.85, 0.6, -0.28),
    (1.85 + math.sqrt(0.28), 0.6, 0.0),
    # 0.15^2 + 1.4^2 - 0.28
    (2.0, 2.0, 1.7025),
])
def test_quadrotor_barrier_values(x, y, expected):
    assert B.quadrotor_barrier().h(planar_state(x, y)) == pytest.approx(expected, abs=1e-12)


def test_quadrotor_barrier_is_fourth_order():
    spec = B.quadrotor_barrier()
    assert spec.relative_degree == 4
    assert spec.hocbf_gains == (4.0, 4.0, 4.0, 4.0)


@pytest.mark.parametrize("make, dim", [(B.segway_barrier, 4), (B.quadrotor_barrier, 8)])
def test_gradient_matches_finite_differences(make, dim):
    spec = make()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-2, 2, dim)
        g = spec.grad_h(x)
        worst = max(worst, np.linalg.norm(g - fd_gradient(spec.h, x)) / max(np.linalg.norm(g), 1e-12))
    assert worst < 1e-6


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_class_k_linear(a, b):
    spec = B.segway_barrier()
    assert spec.alpha(0.0) == 0.0
    assert spec.alpha(-a) == -spec.alpha(a)
    if a < b:
        assert spec.alpha(a) < spec.alpha(b)


@pytest.mark.parametrize("kwargs", [
    {"alpha_gain": 0.0}, {"alpha_gain": -1.0}, {"relative_degree": 0},
    {"relative_degree": 2, "hocbf_gains": (1.0,)},
])
def test_spec_rejects_bad_gains(kwargs):
    with pytest.raises(ContractViolation):
        B.BarrierSpec(name="bad", h=lambda x: 0.0, grad_h=lambda x: x, **kwargs)


def test_constraint_constants_formula():
    spec, model = B.segway_barrier(), D.make_segway()
    x = segway_state(0.2, 0.05, p_dot=0.3)
    cc = B.constraint_constants(spec, model, x)
    f, g = model.f_g(x, "nominal")
    dh = spec.grad_h(x)
    assert np.allclose(cc.c_a, dh @ g, rtol=1e-14)
    assert cc.c_b == pytest.approx(dh @ f + spec.alpha_gain * spec.h(x), rel=1e-14)
    assert cc.c_a.shape == (1,)


def test_constraint_constants_at_equilibrium_use_only_theta_dot_row():
    spec, model = B.segway_barrier(), D.make_segway()
    x = segway_state(0.1383, 0.1)
    cc = B.constraint_constants(spec, model, x)
    _, g = model.f_g(x, "nominal")
    assert cc.c_a[0] == pytest.approx(-2 * 0.1 * g[3, 0], rel=1e-14)


def test_zero_actuation_gives_zero_c_a():
    model = D.ControlAffineModel(name="z", state_dim=4, control_dim=1,
                                 fields=lambda x, p: (np.ones(4), np.zeros((4, 1))),
                                 params_true={}, params_nominal={})
    cc = B.constraint_constants(B.segway_barrier(), model, segway_state(0.2, 0.1))
    assert np.all(cc.c_a == 0)


def test_boundary_class_k_contributes_nothing():
    spec, model = B.segway_barrier(), D.make_segway()
    x = segway_state(0.1383, 0.2617)
    f, _ = model.f_g(x, "nominal")
    assert B.constraint_constants(spec, model, x).c_b == pytest.approx(spec.grad_h(x) @ f, abs=1e-15)


def test_constraint_constants_rejects_higher_order():
    with pytest.raises(ContractViolation):
        B.constraint_constants(B.quadrotor_barrier(), D.make_quadrotor_extended(),
                               D.hover_state_extended(2, 2))


def test_hocbf_with_order_one_reduces_to_constraint_constants():
    spec, model = B.segway_barrier(), D.make_segway()
    one_stage = B.BarrierSpec(name="seg1", h=spec.h, grad_h=spec.grad_h, alpha_gain=spec.alpha_gain,
                              relative_degree=1)
    x = segway_state(0.21, -0.07, p_dot=0.4)
    a, b = B.hocbf_constants(one_stage, model, x), B.constraint_constants(one_stage, model, x)
    assert np.allclose(a.c_a, b.c_a, rtol=1e-14) and a.c_b == pytest.approx(b.c_b, rel=1e-14)


def double_integrator():
    model = D.ControlAffineModel(
        name="di", state_dim=2, control_dim=1,
        fields=lambda x, p: (np.array([x[1], 0.0]), np.array([[0.0], [1.0]])),
        params_true={}, params_nominal={})

    def lie(spec, model, x, which):
        return np.array([x[0], x[1], 0.0]), np.array([[0.0], [1.0]])

    spec = B.BarrierSpec(name="pos", h=lambda x: x[0], grad_h=lambda x: np.array([1.0, 0.0]),
                         relative_degree=2, hocbf_gains=(2.0, 3.0), lie_table=lie)
    return spec, model


@pytest.mark.parametrize("x", [(0.5, -1.0), (2.0, 0.3), (-0.1, 0.0)])
def test_double_integrator_chain(x):
    spec, model = double_integrator()
    x = np.array(x)
    cc = B.hocbf_constants(spec, model, x)
    assert cc.c_a == pytest.approx([1.0])
    assert cc.c_b == pytest.approx(x[1] * (2.0 + 3.0) + 2.0 * 3.0 * x[0], rel=1e-14)


def test_six_state_quadrotor_is_structural_error():
    with pytest.raises(StructuralError):
        B.hocbf_constants(B.quadrotor_barrier(), D.make_quadrotor(), planar_state(2.0, 2.0))


def test_quadrotor_hover_far_from_obstacle_has_positive_slack():
    spec, model = B.quadrotor_barrier(), D.make_quadrotor_extended()
    x = D.hover_state_extended(2.0, 2.0)
    cc = B.hocbf_constants(spec, model, x)
    assert cc.value([0.0, 0.0]) > 0


def nominal_chain(spec, model, x):
    """psi_0..psi_3 from the Lie table along the nominal model."""
    drift, _ = spec.lie(model, x, "nominal")
    psis, poly = [], np.array([1.0])
    for i in range(spec.relative_degree):
        psis.append(float(poly[::-1] @ drift[: len(poly)]))
        poly = np.convolve(poly, [1.0, spec.hocbf_gains[i]])
    return psis


def test_chain_telescoping_along_nominal_rollout():
    spec, model = B.quadrotor_barrier(), D.make_quadrotor_extended()
    x = D.hover_state_extended(2.1, 1.9)
    x[3:6] = [-0.2, -0.3, 0.1]
    x[7] = 0.5
    u = np.array([0.3, 0.05])
    gaps = []
    for dt in (1e-3, 5e-4):
        x1 = D.step_rk4(model, x, u, dt, "nominal")
        p0, p1 = nominal_chain(spec, model, x), nominal_chain(spec, model, x1)
        gaps.append(max(abs((p1[i] - p0[i]) / dt - (p0[i + 1] - spec.hocbf_gains[i] * p0[i]))
                        for i in range(3)))
    assert gaps[1] < 0.6 * gaps[0]
    assert gaps[1] < 1e-2
    assert B.chain_value(spec, model, x) == pytest.approx(nominal_chain(spec, model, x)[3])


def test_hocbf_constraint_is_chain_derivative():
    spec, model = B.quadrotor_barrier(), D.make_quadrotor_extended()
    x = D.hover_state_extended(2.2, 1.7)
    x[3:6] = [0.1, -0.2, 0.05]
    u = np.array([-0.4, 0.02])
    cc = B.hocbf_constants(spec, model, x)
    derivative = B.chain_gradient(spec, model, x) @ D.eval_nominal(model, x, u)
    psi = B.chain_value(spec, model, x)
    assert cc.value(u) == pytest.approx(derivative + spec.final_gain * psi, rel=1e-5)


@pytest.mark.parametrize("make_model, spec_fn, x", [
    (D.make_segway, B.segway_barrier, segway_state(0.2, 0.1, p_dot=0.2)),
    (D.make_quadrotor_extended, B.quadrotor_barrier, D.hover_state_extended(2.0, 1.9)),
])
def test_residual_truth_zero_when_matched(make_model, spec_fn, x):
    model = make_model().matched()
    u = np.ones(model.control_dim)
    assert B.residual_truth(spec_fn(), model, x, u) == 0.0


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 1))
def test_residual_truth_affine_in_u(u1, u2, lam):
    spec, model = B.segway_barrier(), D.make_segway()
    x = segway_state(0.2, 0.1, p_dot=0.2)
    mix = B.residual_truth(spec, model, x, [lam * u1 + (1 - lam) * u2])
    ends = lam * B.residual_truth(spec, model, x, [u1]) + (1 - lam) * B.residual_truth(spec, model, x, [u2])
    assert mix == pytest.approx(ends, abs=1e-9)


def test_residual_truth_matches_discrete_label_at_fine_dt():
    spec, model = B.segway_barrier(), D.make_segway()
    x0 = segway_state(0.18, 0.05, p_dot=0.1)
    u = np.array([0.8])
    traj = D.rollout(model, lambda t, x: u, x0, 1e-4, 1e-4)
    label = residual_label(traj, spec, model).labels[0]
    assert label == pytest.approx(B.residual_truth(spec, model, x0, u), abs=1e-3)


def test_forward_invariance_with_matched_model():
    spec, model = B.segway_barrier(), D.make_segway().matched()
    from probf.controllers import SegwayPD
    ctrl = NominalFilter(spec, model, SegwayPD.design(model))
    traj = D.rollout(model, ctrl, segway_state(0.2, 0.1), 5.0, 0.01, barrier=spec)
    assert traj.min_h >= -1e-3
