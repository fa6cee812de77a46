"""Command-line entry point ``koopman-certify``.

Exit codes: 0 success or all constraints certified, 1 some constraint
rejected, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from .certify import CertificationConfig, certify, constraint_coefficients
from .dynamics import integrate
from .edmd import GeneratorMatrix, fit_controls, read_generator_csv, write_generator_csv
from .errors import NumericalError, UsageError
from .experiments import (
    CellCache,
    DuffingBenchmark,
    FemSweepSpec,
    SweepSpec,
    rows_to_csv,
    run_duffing_benchmark,
    run_fem_sweep,
    run_generator_sweep,
    run_trajectory_sweep,
)
from .scenario import Scenario
from .seeding import subseed
from .stats import first_crossing
from .surrogate import assemble_surrogate, fit_edmdc, predict_edmdc, predict_observable
from .svg import line_plot

EXIT_OK, EXIT_REJECTED, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2, 3
MANIFEST_FORMAT = "koopman-certify-surrogate/1"
THREADS_ENV = "KOOPMAN_CERTIFY_THREADS"


# ------------------------------------------------------------------ helpers


class _Context:
    def __init__(self, args):
        self.args = args
        self.cfg = cfgmod.load_config(args.config) if args.config else cfgmod.RunConfig()
        if args.seed is not None:
            self.cfg.data = self.cfg.data.model_copy(update={"seed": args.seed})
        self.hash = self.cfg.config_hash()
        self.out = args.out or self.cfg.output.directory
        os.makedirs(self.out, exist_ok=True)
        self.threads = _threads(args.threads)

    def path(self, name):
        return os.path.join(self.out, name)

    def wants(self, fmt):
        return fmt in self.cfg.output.formats


def _threads(flag):
    if flag is not None:
        n = flag
    else:
        env = os.environ.get(THREADS_ENV)
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _scenario_objects(cfg):
    system = cfgmod.build_system(cfg)
    domain = cfgmod.build_domain(cfg)
    constraints = cfgmod.build_constraints(cfg)
    dic = cfgmod.build_dictionary(cfg, constraints)
    return system, domain, constraints, dic


def load_surrogate(path):
    """Rebuild (surrogate, manifest) from a manifest written by ``fit``."""
    if not os.path.isfile(path):
        raise UsageError(f"surrogate manifest not found: {path}")
    try:
        with open(path) as fh:
            man = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if man.get("format") != MANIFEST_FORMAT:
        raise UsageError(f"{path}: not a surrogate manifest (format {man.get('format')!r})")
    fcfg = cfgmod.RunConfig.model_validate(man["config"])
    dic = cfgmod.build_dictionary(fcfg)
    if list(dic.labels) != man["labels"]:
        raise UsageError(f"{path}: dictionary labels do not match the stored generators")
    base = os.path.dirname(os.path.abspath(path))
    gens = []
    for g in man["generators"]:
        gpath = os.path.join(base, g["file"])
        if not os.path.isfile(gpath):
            raise UsageError(f"generator file missing: {gpath}")
        mat = read_generator_csv(gpath)
        gens.append(GeneratorMatrix(mat.matrix, {**mat.provenance, "control": g["control"]}))
    return assemble_surrogate(gens, dic), man


def _surrogate_for(ctx, dic, system, domain):
    if ctx.args.surrogate:
        s, man = load_surrogate(ctx.args.surrogate)
        if list(s.dictionary.labels) != list(dic.labels):
            raise UsageError("the config's dictionary differs from the one the surrogate was fitted with")
        return s, man["config_hash"]
    fits = fit_controls(dic, system, domain, ctx.cfg.data.m, ctx.cfg.data.seed, ctx.cfg.data.shared_samples)
    return assemble_surrogate(fits, dic), ctx.hash


# ----------------------------------------------------------------- commands


def cmd_fit(ctx) -> int:
    cfg = ctx.cfg
    system, domain, _, dic = _scenario_objects(cfg)
    fits = fit_controls(dic, system, domain, cfg.data.m, cfg.data.seed, cfg.data.shared_samples)
    gens = []
    for i, fit in enumerate(fits):
        name = "generator_L0.csv" if i == 0 else f"generator_e{i}.csv"
        write_generator_csv(ctx.path(name), fit.generator(), dic.labels, ctx.hash)
        gens.append({"file": name, "control": fit.control_value.tolist(), "m": fit.m, "seed": fit.seed,
                     "condition": fit.condition, "residual": fit.residual})
    manifest = {
        "format": MANIFEST_FORMAT,
        "config_hash": ctx.hash,
        "N": dic.size,
        "dictionary_kind": dic.kind,
        "labels": list(dic.labels),
        "control_dim": system.control_dim,
        "generators": gens,
        "config": cfg.model_dump(),
    }
    _write_json(ctx.path("surrogate.json"), manifest)
    for g in gens:
        print(f"{g['file']}: control={g['control']} condition={g['condition']:.3e} residual={g['residual']:.3e}")
    print(f"wrote {ctx.path('surrogate.json')} (N={dic.size})")
    return EXIT_OK


def cmd_predict(ctx) -> int:
    cfg = ctx.cfg
    system, domain, _, dic = _scenario_objects(cfg)
    s, shash = _surrogate_for(ctx, dic, system, domain)
    x0 = np.array(cfg.scenario.x0)
    T, dt = cfg.scenario.T, cfg.scenario.dt
    u, redraws = cfgmod.build_control(cfg, system)
    truth = integrate(system, x0, u, T, dt)
    obs = cfgmod.build_observable(cfg)
    h_true = obs.value(truth.states)
    scale = float(np.max(np.abs(h_true)))
    if scale == 0:
        raise UsageError("observable is identically zero along the true trajectory")
    (coeffs,) = constraint_coefficients([obs], dic, domain.lower, domain.upper)
    bil = predict_observable(s, coeffs, x0, u, T, dt)
    cols = {"t": truth.times, "h_true": h_true, "h_bilinear": bil.values}
    edmdc = None
    if not ctx.args.no_edmdc:
        cb = cfg.scenario.control
        model = fit_edmdc(dic, system, domain, cfg.data.m, cfg.data.edmdc_interval, cb.lower, cb.upper,
                          seed=subseed(cfg.data.seed, 2), integration_dt=dt)
        edmdc = predict_edmdc(model, coeffs, x0, u, T)
        cols["h_edmdc"] = np.interp(truth.times, edmdc.times, edmdc.values, right=np.nan)
    cols["rel_err_bilinear"] = np.abs(cols["h_bilinear"] - h_true) / scale
    if edmdc is not None:
        cols["rel_err_edmdc"] = np.abs(cols["h_edmdc"] - h_true) / scale
    rows = [{k: float(v[i]) for k, v in cols.items()} for i in range(len(truth.times))]
    _write_text(ctx.path("prediction.csv"), rows_to_csv(rows, ctx.hash))

    summary = {"config_hash": ctx.hash, "surrogate_config_hash": shash, "created": _now(),
               "observable": obs.label, "control_redraws": redraws, "rows": len(rows),
               "bilinear": {"diverged_at": bil.diverged_at,
                            "first_crossing": {f"{thr:g}": first_crossing(truth.times, cols["rel_err_bilinear"], thr)
                                               for thr in (1e-3, 1e-2, 1e-1)}}}
    if edmdc is not None:
        summary["edmdc"] = {"diverged_at": edmdc.diverged_at, "sample_interval": cfg.data.edmdc_interval,
                            "first_crossing": {f"{thr:g}": first_crossing(truth.times, cols["rel_err_edmdc"], thr)
                                               for thr in (1e-3, 1e-2, 1e-1)}}
    _write_json(ctx.path("prediction_summary.json"), summary)
    if ctx.wants("svg"):
        series = [("bilinear", truth.times, cols["rel_err_bilinear"])]
        if edmdc is not None:
            series.append(("eDMDc", truth.times, cols["rel_err_edmdc"]))
        line_plot(ctx.path("prediction.svg"), series, "relative prediction error", "t", "relative error",
                  logy=True, comment=f"config_hash={ctx.hash}")
    print(f"wrote {ctx.path('prediction.csv')} ({len(rows)} rows)")
    return EXIT_OK


def cmd_certify(ctx) -> int:
    cfg = ctx.cfg
    system, domain, constraints, dic = _scenario_objects(cfg)
    if not constraints:
        raise UsageError("scenario.constraints is empty; nothing to certify")
    cc = cfg.certification
    ccfg = CertificationConfig(cc.epsilon, cc.delta, cfg.scenario.T, cfg.scenario.dt, cc.dt_check)
    s, shash = _surrogate_for(ctx, dic, system, domain)
    u, redraws = cfgmod.build_control(cfg, system)
    coeffs = constraint_coefficients(constraints, dic, domain.lower, domain.upper)
    cert = certify(s, coeffs, np.array(cfg.scenario.x0), u, ccfg,
                   metadata={"config_hash": ctx.hash, "surrogate_config_hash": shash, "m": cfg.data.m,
                             "seed": cfg.data.seed, "control_redraws": redraws})
    out = cert.to_dict()
    out["config_hash"] = ctx.hash
    _write_json(ctx.path("certificate.json"), out)
    for v in cert.verdicts:
        extra = "" if v.certified else f" at t={v.first_failure_time} ({v.reason})"
        print(f"{v.label}: {v.verdict}{extra}; worst margin {v.worst_margin:.4g}")
    return EXIT_OK if cert.all_certified else EXIT_REJECTED


def _duffing_bench_from(cfg, threads):
    sc = cfg.scenario
    lo, hi = np.array(sc.domain.lower), np.array(sc.domain.upper)
    if sc.system.name != "duffing" or len(lo) != 2 or not np.allclose(lo, -hi) or hi[0] != hi[1]:
        raise UsageError("the Duffing benchmark needs system 'duffing' on a symmetric square domain")
    if cfg.dictionary.kind != "monomial":
        raise UsageError("the Duffing benchmark uses a monomial dictionary")
    p = {"alpha": -1.0, "beta": 1.0, "delta": 0.0, **sc.system.params}
    cb = sc.control
    return DuffingBenchmark(
        m=cfg.data.m, seeds=tuple(cfg.data.seeds), T=sc.T, dt=sc.dt, degree=cfg.dictionary.degree,
        box=float(hi[0]), segment=cb.segment, control_bounds=(cb.lower, cb.upper), x0=tuple(sc.x0),
        alpha=p["alpha"], beta=p["beta"], delta=p["delta"], edmdc_interval=cfg.data.edmdc_interval,
        max_redraws=cb.max_redraws, zero_control=cb.kind == "zero", threads=threads,
    )


def _run_sweep(ctx, kind, no_edmdc=False) -> int:
    cfg = ctx.cfg
    cache_path = ctx.path("cells.jsonl")
    if not ctx.args.resume and os.path.exists(cache_path):
        os.remove(cache_path)
    cache = CellCache(cache_path)
    sw = cfg.sweep
    if kind == "duffing":
        bench = _duffing_bench_from(cfg, ctx.threads)
        if no_edmdc:
            bench = DuffingBenchmark(**{**bench.__dict__, "edmdc": False})
        result = run_duffing_benchmark(bench, cache)
    elif kind == "fem":
        if not sw.mesh_sizes:
            raise UsageError("sweep.mesh_sizes must list at least one mesh size")
        system = cfgmod.build_system(cfg)
        u, _ = cfgmod.build_control(cfg, system)
        spec = FemSweepSpec(system, tuple(cfg.scenario.domain.lower), tuple(cfg.scenario.domain.upper),
                            tuple(cfgmod.build_constraints(cfg)), cfgmod.build_observable(cfg),
                            tuple(sw.mesh_sizes), tuple(cfg.scenario.x0), u, tuple(sw.m_values), cfg.data.trials,
                            cfg.scenario.T, cfg.scenario.dt, cfg.data.seed, threads=ctx.threads)
        result = run_fem_sweep(spec, cache)
    else:
        system, domain, constraints, dic = _scenario_objects(cfg)
        u, _ = cfgmod.build_control(cfg, system) if kind == "trajectory" else (None, 0)
        scenario = Scenario(system, domain, dic, np.array(cfg.scenario.x0), cfg.scenario.T, cfg.scenario.dt, u,
                            tuple(constraints), cfg.data.m, cfg.data.shared_samples)
        spec = SweepSpec(scenario, tuple(sw.m_values), cfg.data.trials, cfg.data.seed, tuple(sw.epsilons),
                         ctx.threads)
        result = run_generator_sweep(spec, cache) if kind == "generator" else run_trajectory_sweep(spec, u, cache)

    name = "duffing" if kind == "duffing" else "sweep"
    _write_text(ctx.path(f"{name}.csv"), result.csv_text(ctx.hash))
    summary = dict(result.summary, config_hash=ctx.hash, created=_now())
    _write_json(ctx.path(f"{name}_summary.json"), summary)
    _write_series(ctx, result)
    print(f"wrote {ctx.path(name + '.csv')} ({len(result.rows)} rows)")
    return EXIT_OK


def _write_series(ctx, result):
    svg = ctx.wants("svg")
    if result.kind == "duffing":
        ser = result.series
        rows = [{"t": float(t), "bilinear_median": float(v)} for t, v in zip(ser["times"], ser["bilinear_median"])]
        _write_text(ctx.path("duffing_median_bilinear.csv"), rows_to_csv(rows, ctx.hash))
        plots = [("bilinear", ser["times"], ser["bilinear_median"])]
        if "edmdc_median" in ser:
            rows = [{"t": float(t), "edmdc_median": float(v)} for t, v in zip(ser["edmdc_times"], ser["edmdc_median"])]
            _write_text(ctx.path("duffing_median_edmdc.csv"), rows_to_csv(rows, ctx.hash))
            plots.append(("eDMDc", ser["edmdc_times"], ser["edmdc_median"]))
        if svg:
            line_plot(ctx.path("duffing.svg"), plots, "median relative error of x1", "t", "relative error",
                      logy=True, comment=f"config_hash={ctx.hash}")
    elif svg and result.kind in ("generator", "trajectory"):
        m = result.summary["m_values"]
        if result.kind == "generator":
            plots = [(k, m, v) for k, v in result.summary["medians"].items()]
        else:
            plots = [("sup_t |z - z~|", m, result.summary["median_traj_err_max"])]
        line_plot(ctx.path("sweep.svg"), plots, "median error vs m", "m", "error", logx=True, logy=True,
                  comment=f"config_hash={ctx.hash}")
    elif svg and result.kind == "fem":
        s = result.summary
        line_plot(ctx.path("sweep.svg"), [("quadrature fit", s["mesh_sizes"], s["quadrature_sup_error"])],
                  "sup prediction error vs mesh size", "dx", "error", logx=True, logy=True,
                  comment=f"config_hash={ctx.hash}")


def cmd_sweep(ctx) -> int:
    return _run_sweep(ctx, ctx.cfg.sweep.kind)


def cmd_duffing_bench(ctx) -> int:
    if "T" not in ctx.cfg.scenario.model_fields_set:
        ctx.cfg.scenario = ctx.cfg.scenario.model_copy(update={"T": 3.0})
        ctx.hash = ctx.cfg.config_hash()
    return _run_sweep(ctx, "duffing", no_edmdc=ctx.args.no_edmdc)


# ------------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--out", metavar="DIR", help="output directory (default: output.directory)")
    common.add_argument("--seed", type=int, metavar="N", help="master seed, overrides data.seed")
    common.add_argument("--threads", type=int, metavar="N", help=f"worker threads (fallback: ${THREADS_ENV})")

    p = argparse.ArgumentParser(prog="koopman-certify", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", parents=[common], help="fit generator matrices and write a surrogate manifest")
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", parents=[common], help="predict an observable and compare with the truth")
    pr.add_argument("--surrogate", metavar="PATH", help="surrogate manifest from 'fit' (default: fit in memory)")
    pr.add_argument("--no-edmdc", action="store_true", help="skip the eDMDc baseline")
    pr.set_defaults(func=cmd_predict)

    c = sub.add_parser("certify", parents=[common], help="check tightened constraints on the surrogate")
    c.add_argument("--surrogate", metavar="PATH", help="surrogate manifest from 'fit' (default: fit in memory)")
    c.set_defaults(func=cmd_certify)

    s = sub.add_parser("sweep", parents=[common], help="run the sweep described by the config's sweep block")
    s.add_argument("--resume", action="store_true", help="reuse finished cells from a previous run")
    s.set_defaults(func=cmd_sweep)

    d = sub.add_parser("duffing-bench", parents=[common], help="bilinear vs eDMDc benchmark on the Duffing oscillator")
    d.add_argument("--resume", action="store_true", help="reuse finished seeds from a previous run")
    d.add_argument("--no-edmdc", action="store_true", help="skip the eDMDc baseline")
    d.set_defaults(func=cmd_duffing_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        ctx = _Context(args)
        return args.func(ctx)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
