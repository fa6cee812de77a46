import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from koopman_certify.dynamics import (
    ControlAffineSystem,
    ControlSignal,
    StateDomain,
    check_domain,
    duffing,
    eval_rhs,
    flow_batch,
    integrate,
    linear_1d,
    random_zoh,
    saturating_1d,
    time_grid,
)
from koopman_certify.errors import DivergenceError, NumericalError, UsageError


def test_duffing_rhs_at_x0():
    # alpha=-1, beta=1, delta=0: (x2, x1 - 2 x1^3 u)
    sys_ = duffing()
    assert np.allclose(eval_rhs(sys_, [1.0, 1.0], [0.0]), [1.0, 1.0])
    assert np.allclose(eval_rhs(sys_, [1.0, 1.0], [1.0]), [1.0, -1.0])
    assert np.allclose(eval_rhs(sys_, [2.0, -1.0], [0.5]), [-1.0, 2.0 - 8.0])


def test_rhs_is_affine_in_control():
    sys_ = duffing(alpha=0.3, beta=0.7, delta=0.2)
    x = np.array([0.4, -1.3])
    f0 = eval_rhs(sys_, x, [0.0])
    f1 = eval_rhs(sys_, x, [1.0])
    assert np.allclose(eval_rhs(sys_, x, [-2.5]), f0 - 2.5 * (f1 - f0))


def test_eval_rhs_dimension_and_finiteness_errors():
    with pytest.raises(UsageError):
        eval_rhs(duffing(), [1.0, 2.0, 3.0], [0.0])
    with pytest.raises(UsageError):
        eval_rhs(duffing(), [1.0, 2.0], [0.0, 1.0])
    bad = ControlAffineSystem(1, 0, lambda x: np.full_like(x, np.nan), ())
    with pytest.raises(NumericalError):
        eval_rhs(bad, [1.0])


def test_time_grid_ends_exactly_at_T():
    g = time_grid(1.0, 1e-3)
    assert len(g) == 1001 and g[-1] == 1.0
    g = time_grid(0.25, 0.1)
    assert np.allclose(g, [0, 0.1, 0.2, 0.25])
    g = time_grid(3.0, 1e-3)
    assert len(g) == 3001
    with pytest.raises(UsageError):
        time_grid(1.0, 0.0)


@given(st.floats(0.05, 5.0), st.floats(1e-3, 0.05))
@settings(max_examples=50, deadline=None)
def test_time_grid_properties(T, dt):
    g = time_grid(T, dt)
    assert g[0] == 0.0
    assert g[-1] == T
    assert np.all(np.diff(g) > 0)
    assert np.all(np.diff(g) <= dt * (1 + 1e-9))


def test_rk4_exponential_decay_exact_value():
    tr = integrate(linear_1d(-1.0, 0.0), [1.0], None, T=1.0, dt=1e-3)
    assert abs(tr.states[-1, 0] - np.exp(-1.0)) < 1e-12


def test_rk4_fourth_order():
    errs = []
    dts = [0.1, 0.05, 0.025]
    for dt in dts:
        tr = integrate(linear_1d(-1.0, 0.0), [1.0], None, T=1.0, dt=dt)
        errs.append(abs(tr.states[-1, 0] - np.exp(-1.0)))
    order = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert order >= 3.8


def test_rk4_matches_scipy_on_duffing_constant_control():
    sys_ = duffing()
    u = ControlSignal.constant([0.4])
    tr = integrate(sys_, [1.0, 1.0], u, T=1.5, dt=1e-3)
    ref = solve_ivp(lambda t, x: sys_.rhs(x, np.array([0.4])), (0, 1.5), [1.0, 1.0],
                    t_eval=tr.times, rtol=1e-12, atol=1e-12)
    assert np.max(np.abs(ref.y.T - tr.states)) < 1e-9


def test_zoh_piecewise_matches_chained_scipy():
    sys_ = saturating_1d(-1.0, 1.0)
    vals = [0.5, -0.8, 0.3]
    u = ControlSignal.zoh(vals, 0.1)
    tr = integrate(sys_, [0.2], u, T=0.3, dt=1e-3)
    x = np.array([0.2])
    for k, v in enumerate(vals):
        sol = solve_ivp(lambda t, y: sys_.rhs(y, np.array([v])), (0, 0.1), x, rtol=1e-12, atol=1e-13)
        x = sol.y[:, -1]
        assert abs(tr.states[100 * (k + 1), 0] - x[0]) < 1e-10


def test_zoh_indexing_and_left_limit():
    u = ControlSignal.zoh([1.0, 2.0, 3.0], 0.1)
    assert u(0.0)[0] == 1.0
    assert u(0.1)[0] == 2.0
    assert u(0.1, left=True)[0] == 1.0
    assert u(0.15)[0] == 2.0
    assert u(0.3)[0] == 3.0
    assert u(10.0)[0] == 3.0


def test_random_zoh_is_seeded_and_in_box():
    a = random_zoh(2, 1.0, 7, 0.1, -1.0, 1.0)
    b = random_zoh(2, 1.0, 7, 0.1, -1.0, 1.0)
    assert np.array_equal(a.values, b.values)
    assert a.values.shape == (11, 2)
    assert np.all(np.abs(a.values) <= 1.0)


def test_control_outside_box_rejected():
    with pytest.raises(UsageError):
        ControlSignal.zoh([0.0, 2.0], 0.1, -1.0, 1.0)
    cb = ControlSignal.from_callable(lambda t: [3.0 * t], 1, -1.0, 1.0)
    assert cb(0.2)[0] == pytest.approx(0.6)
    with pytest.raises(UsageError):
        cb(1.0)


def test_blowup_raises_divergence_with_time():
    # x' = x^2 from x0=1 blows up at t=1
    sys_ = ControlAffineSystem(1, 0, lambda x: x ** 2, ())
    with pytest.raises(DivergenceError) as exc:
        integrate(sys_, [1.0], None, T=2.0, dt=1e-3)
    assert 0.99 < exc.value.time < 1.01


def test_flow_batch_equals_single_integrations():
    sys_ = duffing()
    X = np.array([[1.0, 0.0], [-0.5, 0.3]])
    U = np.array([[0.2], [-0.7]])
    out = flow_batch(sys_, X, U, 0.05, 1e-3)
    for i in range(2):
        tr = integrate(sys_, X[i], ControlSignal.constant(U[i]), 0.05, 1e-3)
        assert np.allclose(out[i], tr.states[-1], atol=1e-13)


def test_check_domain_first_exit():
    sys_ = linear_1d(1.0, 0.0)  # x(t) = e^t
    tr = integrate(sys_, [1.0], None, T=1.0, dt=1e-3)
    rep = check_domain(tr, StateDomain([-2.0], [2.0]))
    assert not rep.contained and rep.index is None
    assert abs(rep.time - np.log(2.0)) < 2e-3
    h = lambda X: X[:, 0] - 1.5  # noqa: E731
    rep = check_domain(tr, StateDomain([-5.0], [5.0], (h,)))
    assert rep.index == 0 and abs(rep.time - np.log(1.5)) < 2e-3 and rep.value > 0
    assert check_domain(tr, StateDomain([-5.0], [5.0])).contained


def test_domain_rejects_inverted_box():
    with pytest.raises(UsageError):
        StateDomain([0.0, 1.0], [1.0, 1.0])
