import numpy as np
import pytest
from scipy.linalg import expm

from koopman_certify.dictionary import monomial_dictionary
from koopman_certify.dynamics import ControlSignal, StateDomain, duffing, integrate, linear_1d
from koopman_certify.edmd import GeneratorMatrix, build_matrices, fit_controls, sample_iid
from koopman_certify.errors import AssemblyError, UsageError
from koopman_certify.surrogate import (
    BilinearSurrogate,
    assemble_surrogate,
    fit_edmdc,
    predict_edmdc,
    predict_observable,
    propagate,
)


def exact_linear_generator(k, a, b, u):
    M = np.zeros((k + 1, k + 1))
    for j in range(1, k + 1):
        M[j, j] = a * j
        M[j - 1, j] = b * u * j
    return M


def linear_truth(a, b, x0, c, t):
    return np.exp(a * t) * x0 + b * c * (np.exp(a * t) - 1) / a


@pytest.fixture
def exact_linear_surrogate():
    a, b, k = -0.8, 0.6, 3
    dic = monomial_dictionary(1, k)
    fits = [GeneratorMatrix(exact_linear_generator(k, a, b, u), {"control": [u]}) for u in (0.0, 1.0)]
    return assemble_surrogate(fits, dic), a, b


def test_surrogate_is_affine_in_u(exact_linear_surrogate):
    s, a, b = exact_linear_surrogate
    for u in (-1.0, 0.25, 2.0):
        assert np.allclose(s.generator_at([u]), exact_linear_generator(3, a, b, u), atol=1e-14)
    L1, L2 = s.generator_at([0.3]), s.generator_at([-0.9])
    assert np.allclose(s.generator_at([0.5 * 0.3 + 0.5 * -0.9]), 0.5 * (L1 + L2))
    with pytest.raises(UsageError):
        s.generator_at([1.0, 2.0])


def test_assembly_recovers_fitted_matrices():
    dom = StateDomain([-2, -2], [2, 2])
    dic = monomial_dictionary(2, 3)
    fits = fit_controls(dic, duffing(), dom, 300, seed=1)
    s = assemble_surrogate(fits, dic)
    assert np.array_equal(s.generator_at([0.0]), fits[0].L_hat)
    assert np.allclose(s.generator_at([1.0]), fits[1].L_hat, atol=1e-13)
    with pytest.raises(AssemblyError):
        assemble_surrogate(fits[::-1], dic)
    with pytest.raises(AssemblyError):
        assemble_surrogate(fits, monomial_dictionary(2, 2))
    with pytest.raises(AssemblyError):
        BilinearSurrogate(np.eye(3), (np.eye(2),))


def test_constant_observable_preserved():
    dom = StateDomain([-2, -2], [2, 2])
    dic = monomial_dictionary(2, 5)
    s = assemble_surrogate(fit_controls(dic, duffing(), dom, 500, seed=3), dic)
    e0 = np.eye(dic.size)[0]
    u = ControlSignal.zoh([0.5, -0.5, 1.0], 0.1)
    pred = predict_observable(s, e0, [0.3, -0.2], u, T=0.3)
    assert np.allclose(pred.values, 1.0, atol=1e-9)


def test_scalar_decay_hits_exp_minus_one():
    s = assemble_surrogate([GeneratorMatrix(np.array([[0.0, 0.0], [0.0, -1.0]]), {"control": []})],
                           monomial_dictionary(1, 1))
    pred = predict_observable(s, [0.0, 1.0], [1.0], None, T=1.0)
    assert abs(pred.values[-1] - np.exp(-1.0)) < 1e-12


def test_closed_dictionary_prediction_matches_closed_form(exact_linear_surrogate):
    s, a, b = exact_linear_surrogate
    x0, c = 0.5, 0.7
    u = ControlSignal.constant([c])
    px = predict_observable(s, [0, 1, 0, 0], [x0], u, T=1.0)
    assert np.max(np.abs(px.values - linear_truth(a, b, x0, c, px.times))) < 1e-11
    px2 = predict_observable(s, [0, 0, 1, 0], [x0], u, T=1.0)
    assert np.max(np.abs(px2.values - linear_truth(a, b, x0, c, px2.times) ** 2)) < 1e-11


def test_zoh_prediction_matches_true_flow(exact_linear_surrogate):
    s, a, b = exact_linear_surrogate
    u = ControlSignal.zoh([1.0, -0.5, 0.2, 0.9], 0.25)
    pred = predict_observable(s, [0, 1, 0, 0], [-0.4], u, T=1.0)
    truth = integrate(linear_1d(a, b), [-0.4], u, T=1.0)
    assert np.max(np.abs(pred.values - truth.states[:, 0])) < 1e-11


def test_semigroup_chaining():
    rng = np.random.default_rng(0)
    s = BilinearSurrogate(rng.normal(scale=0.3, size=(4, 4)), ())
    z0 = rng.normal(size=4)
    full = propagate(s, z0, None, T=2.0, dt=1e-3)
    half = propagate(s, z0, None, T=1.0, dt=1e-3)
    second = propagate(s, half.z[-1], None, T=1.0, dt=1e-3)
    assert np.allclose(full.z[-1], second.z[-1], rtol=1e-12, atol=1e-12)


def test_lifted_and_coefficient_forms_agree():
    # c(t) = expm(t L) c with c(t) . Psi(x0) equals c . z(t) for z' = L^T z
    rng = np.random.default_rng(2)
    L0 = rng.normal(scale=0.4, size=(5, 5))
    B1 = rng.normal(scale=0.4, size=(5, 5))
    s = BilinearSurrogate(L0, (B1,))
    z0, c = rng.normal(size=5), rng.normal(size=5)
    traj = propagate(s, z0, ControlSignal.constant([0.6]), T=1.0, dt=1e-3)
    ct = expm(1.0 * (L0 + 0.6 * B1)) @ c
    assert ct @ z0 == pytest.approx(c @ traj.z[-1], rel=1e-11)


def test_propagate_reports_divergence():
    s = BilinearSurrogate(np.array([[50.0]]), ())
    traj = propagate(s, [1.0], None, T=1.0, dt=1e-3)
    # e^{50 t} passes 1e9 at t = ln(1e9)/50
    assert traj.diverged_at == pytest.approx(np.log(1e9) / 50, abs=2e-3)
    assert np.isnan(traj.padded()[-1, 0])
    with pytest.raises(UsageError):
        propagate(s, [1.0, 2.0])


def test_edmdc_on_linear_system_matches_exact_discretization():
    a, b, dt = -0.5, 2.0, 0.01
    dic = monomial_dictionary(1, 1)
    model = fit_edmdc(dic, linear_1d(a, b), StateDomain([-1], [1]), 200, dt, seed=4)
    ad = np.exp(a * dt)
    bd = b * (ad - 1) / a
    assert np.allclose(model.A, [[1, 0], [0, ad]], atol=1e-10)
    assert np.allclose(model.B, [[0], [bd]], atol=1e-10)
    assert model.residual < 1e-9


def test_edmdc_and_bilinear_agree_on_linear_system(exact_linear_surrogate):
    s, a, b = exact_linear_surrogate
    model = fit_edmdc(monomial_dictionary(1, 3), linear_1d(a, b), StateDomain([-1], [1]), 300, 0.01, seed=1)
    u = ControlSignal.zoh([0.4, -0.6, 0.8], 0.1)
    bl = predict_observable(s, [0, 1, 0, 0], [0.2], u, T=0.3)
    ec = predict_edmdc(model, [0, 1, 0, 0], [0.2], u, T=0.3)
    assert len(ec.times) == 31
    assert np.allclose(ec.values, np.interp(ec.times, bl.times, bl.values), atol=1e-9)


def test_edmdc_divergence_flagged():
    from koopman_certify.surrogate import EdmdcModel

    model = EdmdcModel(np.array([[10.0]]), np.zeros((1, 1)), 0.01, 0.0, monomial_dictionary(1, 0))
    pred = predict_edmdc(model, [1.0], [0.0], None, T=0.2)
    assert pred.diverged_at == pytest.approx(0.1)
    assert np.isnan(pred.values[-1]) and pred.values[9] == pytest.approx(1e9)


def test_fitted_duffing_surrogate_tracks_truth_briefly():
    dom = StateDomain([-2, -2], [2, 2])
    dic = monomial_dictionary(2, 5)
    s = assemble_surrogate(fit_controls(dic, duffing(), dom, 2000, seed=0), dic)
    x1 = np.eye(dic.size)[dic.index("x1")]
    u = ControlSignal.constant([0.2])
    pred = predict_observable(s, x1, [1.0, 1.0], u, T=0.3)
    truth = integrate(duffing(), [1.0, 1.0], u, T=0.3)
    assert np.max(np.abs(pred.values - truth.states[:, 0])) < 1e-2


def test_fit_with_training_data_built_from_samples_directly():
    # build_matrices accepts raw arrays as well as SampleSets
    X = sample_iid(StateDomain([-1], [1]), 40, 0).points
    fit = build_matrices(monomial_dictionary(1, 2), linear_1d(-1.0, 1.0), [1.0], X)
    assert np.allclose(fit.L_hat, exact_linear_generator(2, -1.0, 1.0, 1.0), atol=1e-10)
