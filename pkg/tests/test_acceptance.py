"""End-to-end acceptance checks.

Each test prints one PASS/FAIL line (visible even under output capture)
and then asserts the same condition, so a failing criterion also fails the
test run. Run ``python tests/test_acceptance.py`` for just the summary lines.
"""

import json
import time

import numpy as np
import pytest

from koopman_certify.certify import CertificationConfig, soundness_trial
from koopman_certify.cli import main as cli_main
from koopman_certify.dictionary import Observable, monomial_dictionary
from koopman_certify.dynamics import ControlSignal, StateDomain, duffing, integrate, linear_1d, saturating_1d
from koopman_certify.edmd import build_matrices, reference_generators
from koopman_certify.experiments import (
    DuffingBenchmark,
    FemSweepSpec,
    SweepSpec,
    admissible_control,
    run_duffing_benchmark,
    run_fem_sweep,
    run_generator_sweep,
)
from koopman_certify.scenario import Scenario
from koopman_certify.surrogate import assemble_surrogate, predict_observable

DOM = StateDomain([-2, -2], [2, 2])
_report = {}


def report(number, ok, detail, capsys=None):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    _report[number] = line
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)
    return ok


@pytest.fixture(scope="module")
def duffing_bench():
    t0 = time.perf_counter()
    res = run_duffing_benchmark(DuffingBenchmark())
    return res, time.perf_counter() - t0


def check_1(duffing_bench):
    res, elapsed = duffing_bench
    times, med = res.series["times"], res.series["bilinear_median"]
    window = times <= 2.5 + 1e-12
    worst = float(np.max(med[window]))
    cross = res.summary["bilinear"]["median_cross_0.001"]
    ok = worst < 1e-3 and elapsed <= 120
    return ok, (f"median rel. error max on [0,2.5] = {worst:.3e} (needs < 1e-3); "
                f"first crossing of 1e-3 at t={cross}; runtime {elapsed:.1f}s")


def check_2(duffing_bench):
    res, _ = duffing_bench
    et, em = res.series["edmdc_times"], res.series["edmdc_median"]
    reached = bool(np.any(~np.isfinite(em[et <= 0.5 + 1e-12]) | (em[et <= 0.5 + 1e-12] > 5e-2)))
    early = res.summary["edmdc"]["diverged_before_1.5"]
    ok = reached and early >= 15
    return ok, (f"median eDMDc error max on [0,0.5] = {res.summary['edmdc']['median_max_err_until_0.5']:.3e} "
                f"(needs > 5e-2); diverged before 1.5s in {early}/20 seeds (needs >= 15)")


@pytest.fixture(scope="module")
def generator_sweep():
    sc = Scenario(duffing(), DOM, monomial_dictionary(2, 3), [1.0, 1.0])
    t0 = time.perf_counter()
    res = run_generator_sweep(SweepSpec(sc, (100, 1000, 10000), 50, seed=0, epsilons=(0.5, 1.0, 2.0, 4.0)))
    return res, time.perf_counter() - t0


def check_3(generator_sweep):
    res, elapsed = generator_sweep
    slopes, med = res.summary["slopes"], res.summary["medians"]
    s_e1, s_max = slopes["err_e1"], slopes["err_max"]
    u0_level = max(med["err_u0"])
    # u = 0 makes the Duffing field linear and the cubic dictionary invariant,
    # so its error is pure roundoff; the decay is measured where sampling error exists
    ok = -0.7 <= s_e1 <= -0.3 and -0.7 <= s_max <= -0.3 and elapsed <= 300
    return ok, (f"slope u=e1 {s_e1:.3f}, slope max over controls {s_max:.3f} (needs [-0.7,-0.3]); "
                f"u=0 median error {u0_level:.1e} (roundoff, slope {slopes['err_u0']:.2f} not meaningful); "
                f"runtime {elapsed:.1f}s")


def check_4(generator_sweep):
    res, _ = generator_sweep
    probs = [p for p in res.summary["probabilities"] if p["quantity"] == "err_max"]
    eps = sorted({p["epsilon"] for p in probs})
    ms = res.summary["m_values"]
    table = {(p["m"], p["epsilon"]): p for p in probs}
    in_m = all(
        table[(a, e)]["wilson_low"] <= table[(b, e)]["wilson_low"] + 1e-15 for e in eps for a, b in zip(ms, ms[1:])
    )
    in_eps = all(
        table[(m, a)]["p_hat"] <= table[(m, b)]["p_hat"] for m in ms for a, b in zip(eps, eps[1:])
    )
    ok = in_m and in_eps
    grid = "; ".join(f"eps={e}: " + ",".join(f"{table[(m, e)]['wilson_low']:.2f}" for m in ms) for e in eps)
    return ok, f"Wilson lower bounds by m [{grid}]; monotone in m: {in_m}, in eps: {in_eps}"


def check_5():
    T = 2.0
    u, traj, redraws = admissible_control(duffing(), [1.0, 1.0], T, 1e-3, 0, domain=DOM)
    top = float(traj.states[:, 0].max())
    hs = (Observable.from_expression(f"x1 - {top + 0.1!r}", 2, "x1 - (max + 0.1)"),
          Observable.from_expression(f"x1 - {top - 0.1!r}", 2, "x1 - (max - 0.1)"))
    sc = Scenario(duffing(), DOM, monomial_dictionary(2, 5), np.array([1.0, 1.0]), T=T, control=u,
                  constraints=hs, m=100)
    rep = soundness_trial(sc, 100, CertificationConfig(0.05, T=T), master_seed=0)
    unsound = sum(r.get("unsound", False) for r in rep.rows)
    ok = rep.failed_trials == 0 and unsound == 0 and rep.implication_holds == 100
    cert_feasible = sum(r["certified"][0] for r in rep.rows if "certified" in r)
    cert_violated = sum(r["certified"][1] for r in rep.rows if "certified" in r)
    return ok, (f"unsound trials {unsound}/100, implication held {rep.implication_holds}/100, "
                f"feasible constraint certified {cert_feasible}/100, violated one {cert_violated}/100, "
                f"closeness {rep.closeness_rate:.2f}, failed {rep.failed_trials}")


def check_6():
    spec = FemSweepSpec(
        system=saturating_1d(-1.0, 1.0), lower=(-1.0,), upper=(1.0,),
        constraints=(Observable.from_expression("x1**2 - 0.81", 1, "h"),),
        observable=Observable.from_expression("sin(3*x1)", 1), mesh_sizes=(0.1, 0.05, 0.025),
        x0=(0.3,), control=ControlSignal.constant([0.5]), T=1.0)
    res = run_fem_sweep(spec)
    factors = res.summary["reduction_factors"]
    ok = res.summary["failed_cells"] == 0 and all(f >= 1.5 for f in factors)
    errs = ", ".join(f"{e:.3e}" for e in res.summary["quadrature_sup_error"])
    return ok, f"sup errors {errs}; reduction factors {', '.join(f'{f:.2f}' for f in factors)} (needs >= 1.5)"


def check_7():
    # (a) u = 0 Duffing field is linear, so degree <= 5 monomials are invariant
    dic = monomial_dictionary(2, 5)
    s = assemble_surrogate(reference_generators(dic, duffing(), DOM), dic)
    h = np.eye(dic.size)[dic.index("x1")]
    zero = ControlSignal.constant([0.0])
    pred = predict_observable(s, h, [1.0, 1.0], zero, T=1.0)
    truth = integrate(duffing(), [1.0, 1.0], zero, T=1.0)
    err_a = float(np.max(np.abs(pred.values - truth.states[:, 0])))
    # (b) dictionary {1, x} on x' = -x with samples +-0.5, worked out by hand
    fit = build_matrices(monomial_dictionary(1, 1), linear_1d(-1.0, 0.0), [0.0], np.array([[0.5], [-0.5]]))
    exact_b = bool(np.array_equal(fit.C_hat, [[1.0, 0.0], [0.0, 0.25]])
                   and np.array_equal(fit.A_hat, [[0.0, 0.0], [0.0, -0.25]])
                   and np.array_equal(fit.L_hat, [[0.0, 0.0], [0.0, -1.0]]))
    # (c) RK4 order on x' = -x
    dts = [0.1, 0.05, 0.025]
    errs = [abs(integrate(linear_1d(-1.0, 0.0), [1.0], None, 1.0, dt).states[-1, 0] - np.exp(-1.0)) for dt in dts]
    order = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
    ok = err_a <= 1e-6 and exact_b and order >= 3.8
    return ok, f"(a) max error {err_a:.2e} (needs <= 1e-6); (b) bit-exact {exact_b}; (c) order {order:.3f}"


def check_8(tmp_path):
    configs = {
        "generator": {"dictionary": {"degree": 3}, "data": {"trials": 4, "seed": 11},
                      "sweep": {"kind": "generator", "m_values": [100, 1000], "epsilons": [1.0]}},
        "trajectory": {"dictionary": {"degree": 3}, "data": {"trials": 3, "seed": 2},
                       "scenario": {"T": 0.5, "control": {"kind": "constant", "value": [0.3]}},
                       "sweep": {"kind": "trajectory", "m_values": [100, 1000], "epsilons": [0.1]}},
        "fem": {"scenario": {"system": {"name": "saturating_1d"}, "domain": {"lower": [-1.0], "upper": [1.0]},
                             "constraints": [{"expr": "x1**2 - 0.81"}], "x0": [0.3], "T": 0.5,
                             "control": {"kind": "constant", "value": [0.5]}, "observable": "sin(3*x1)"},
                "dictionary": {"kind": "fem", "dx": 0.1}, "data": {"trials": 2},
                "sweep": {"kind": "fem", "m_values": [200], "mesh_sizes": [0.2, 0.1]}},
    }
    identical = {}
    for name, cfg in configs.items():
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(cfg))
        outs = []
        for run, threads in enumerate(("1", "2")):
            out = tmp_path / f"{name}_{run}"
            assert cli_main(["sweep", "--config", str(path), "--out", str(out), "--threads", threads]) == 0
            outs.append((out / "sweep.csv").read_bytes())
        identical[name] = outs[0] == outs[1]
    bench = tmp_path / "bench.json"
    bench.write_text(json.dumps({"scenario": {"T": 0.5}, "data": {"seeds": [0, 1, 2]}}))
    runs = []
    for run in range(2):
        out = tmp_path / f"bench_{run}"
        assert cli_main(["duffing-bench", "--config", str(bench), "--out", str(out), "--threads", str(run + 1)]) == 0
        runs.append([(out / f).read_bytes() for f in ("duffing.csv", "duffing_median_bilinear.csv",
                                                      "duffing_median_edmdc.csv")])
    identical["duffing-bench"] = runs[0] == runs[1]
    ok = all(identical.values())
    return ok, "byte-identical reruns: " + ", ".join(f"{k}={v}" for k, v in identical.items())


def _run(number, capsys, *args):
    ok, detail = globals()[f"check_{number}"](*args)
    report(number, ok, detail, capsys)
    assert ok, detail


def test_criterion_1_bilinear_accuracy(duffing_bench, capsys):
    _run(1, capsys, duffing_bench)


def test_criterion_2_edmdc_contrast(duffing_bench, capsys):
    _run(2, capsys, duffing_bench)


def test_criterion_3_error_decay(generator_sweep, capsys):
    _run(3, capsys, generator_sweep)


def test_criterion_4_probability_monotonicity(generator_sweep, capsys):
    _run(4, capsys, generator_sweep)


def test_criterion_5_certification_soundness(capsys):
    _run(5, capsys)


def test_criterion_6_fem_trend(capsys):
    _run(6, capsys)


def test_criterion_7_exactness_oracles(capsys):
    _run(7, capsys)


def test_criterion_8_reproducibility(tmp_path, capsys):
    _run(8, capsys, tmp_path)


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    def timed(fn, *a):
        t0 = time.perf_counter()
        out = fn(*a)
        return out, time.perf_counter() - t0

    bench = timed(run_duffing_benchmark, DuffingBenchmark())
    sc = Scenario(duffing(), DOM, monomial_dictionary(2, 3), [1.0, 1.0])
    sweep = timed(run_generator_sweep, SweepSpec(sc, (100, 1000, 10000), 50, seed=0, epsilons=(0.5, 1.0, 2.0, 4.0)))
    args = {1: (bench,), 2: (bench,), 3: (sweep,), 4: (sweep,), 8: (Path(tempfile.mkdtemp()),)}
    for n in range(1, 9):
        ok, detail = globals()[f"check_{n}"](*args.get(n, ()))
        report(n, ok, detail)
