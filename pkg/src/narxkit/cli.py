"""narx: batch command-line front end.

Every subcommand wraps exactly one library operation and writes plain
CSV/JSON artifacts; report-style outputs also render a PNG next to the
delimited file unless --no-plots is given.

Exit codes: 0 ok, 2 config/usage error, 3 numerical failure,
4 validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import plots
from .dataset import (
    DataError,
    SplitSpec,
    choose_decimation,
    covariance_analysis,
    decimate,
    generate_hammerstein_benchmark,
    load_csv,
    save_csv,
    split,
)
from .estimators import (
    AffinePair,
    ConstraintSet,
    EstimationError,
    affine_pair_from_regression,
    build_regression,
    constrained_least_squares,
    extended_least_squares,
    forgetting_weights,
    least_squares,
    multiobjective_estimate,
    pareto_sweep,
    weighted_least_squares,
)
from .greybox import (
    GreyboxError,
    SteadyStatePoint,
    affine_pair_from_static_points,
    constraints_from_cluster_targets,
    constraints_from_static_points,
    constraints_transcritical,
    constraints_fixed_point,
    prune_clusters,
)
from .pipeline import ConfigError, PipelineConfig, StageFailure, run_pipeline
from .selection import SelectionError, aic_stop, frols_err, srr_select, ssmr_select
from .structure import (
    MetaParams,
    ModelStructure,
    PolynomialModel,
    StructureError,
    generate_candidates,
    parse_cluster,
)
from .dynamics import (
    DynamicsError,
    hysteresis_branches,
    loop_area,
    simulate_free_run,
    static_curve,
)
from .validation import ValidationError, pick_from_pareto, validate_model

logger = logging.getLogger("narxkit.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VALIDATION = 4

CONFIG_ERRORS = (DataError, StructureError, ConfigError, ValidationError, FileNotFoundError, OSError, KeyError, ValueError)
NUMERIC_ERRORS = (EstimationError, SelectionError, GreyboxError, DynamicsError, np.linalg.LinAlgError)


def _parse_meta(text: str) -> MetaParams:
    """Parse 'ny=3,nu=3,l=3,d=1[,ne=0]'."""
    fields = {"ny": 0, "nu": 0, "ne": 0, "l": 1, "d": 1}
    for token in text.split(","):
        key, _, value = token.partition("=")
        key = key.strip().lower()
        if key not in fields:
            raise ConfigError(f"unknown metaparameter {key!r} in {text!r}")
        fields[key] = int(value)
    return MetaParams(n_y=fields["ny"], n_u=fields["nu"], n_e=fields["ne"], ell=fields["l"], d=fields["d"])


def _load_structure(path: str) -> ModelStructure:
    with open(path) as fh:
        return ModelStructure.from_json(json.load(fh))


def _load_constraints(path: str) -> ConstraintSet:
    with open(path) as fh:
        return ConstraintSet.from_json(json.load(fh))


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _png_twin(path: str | Path) -> Path:
    return Path(path).with_suffix(".png")


def _load_ss_points(path: str) -> list[SteadyStatePoint]:
    """Steady-state data CSV: columns u,y with optional third column branch (+1/-1)."""
    points = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if line_no == 1 and cells[0].strip().lower() in ("u", "k"):
                continue
            values = [float(c) for c in cells]
            branch = int(values[2]) if len(values) > 2 else 1
            points.append(SteadyStatePoint(values[0], values[1], branch))
    if not points:
        raise DataError(f"{path}: no steady-state points")
    return points


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def cmd_data(args) -> int:
    if args.data_cmd == "gen-hammerstein":
        ts = generate_hammerstein_benchmark(args.seed, args.n, noise_std=args.noise_std)
        save_csv(ts, args.out)
        if not args.no_plots:
            plots.save_timeseries_plot(ts, _png_twin(args.out))
        print(f"wrote {args.out} ({ts.n} samples)")
        return EXIT_OK
    if args.data_cmd == "decimate":
        ts = load_csv(args.infile)
        report = covariance_analysis(ts.y, args.tau_max)
        if report.tau_m_star is None:
            print("covariance analysis is degenerate: no first minimum found", file=sys.stderr)
            return EXIT_NUMERIC
        choice = choose_decimation(report.tau_m_star)
        out = args.out or Path(args.infile).with_suffix(".decimated.csv")
        save_csv(decimate(ts, choice.delta), out)
        if not args.no_plots:
            plots.save_covariance_plot(report, _png_twin(out))
        print(
            f"tau_lin={report.tau_lin} tau_nl={report.tau_nl} tau_m*={report.tau_m_star} "
            f"-> delta={choice.delta} tau_m={choice.tau_m}"
            + (" (relaxed band)" if choice.relaxed else "")
        )
        print(f"wrote {out}")
        return EXIT_OK
    if args.data_cmd == "split":
        ts = load_csv(args.infile)
        ident, valid = split(ts, SplitSpec(args.n_ident, ts.n - args.n_ident))
        stem = Path(args.infile)
        ident_path = stem.with_name(stem.stem + "_ident.csv")
        valid_path = stem.with_name(stem.stem + "_valid.csv")
        save_csv(ident, ident_path)
        save_csv(valid, valid_path)
        print(f"wrote {ident_path} ({ident.n}) and {valid_path} ({valid.n})")
        return EXIT_OK
    raise ConfigError(f"unknown data subcommand {args.data_cmd!r}")


def cmd_select(args) -> int:
    ts = load_csv(args.data)
    meta = _parse_meta(args.meta)
    pool = generate_candidates(
        meta,
        include_constant=not args.no_constant,
        include_hysteresis=args.hysteresis,
    )
    if args.forbid:
        pool = prune_clusters(pool, [parse_cluster(s) for s in args.forbid.split(";")])
    method = {"err": frols_err, "srr": srr_select, "ssmr": ssmr_select}[args.method]
    trace = method(ts, pool, args.n_max)
    if args.stop == "aic":
        aic_stop(trace, ts.n)
    else:
        trace.stop_index = len(trace.picks)

    with open(args.out, "w", newline="\n") as fh:
        fh.write("step,regressor,criterion,error\n")
        errors = trace.msse if trace.msse else trace.ms1pe
        for i, ((reg, crit), err) in enumerate(zip(trace.picks, errors), start=1):
            fh.write(f"{i},{reg.render()},{crit:.17g},{err:.17g}\n")
    if not args.no_plots:
        plots.save_selection_plot(trace, _png_twin(args.out))
    if args.out_structure:
        structure = trace.selected_structure(trace.stop_index)
        _write_json(args.out_structure, structure.to_json())
        print(f"wrote {args.out_structure} ({len(structure)} terms)")
    print(f"wrote {args.out}; stop at {trace.stop_index} of {len(trace.picks)} picks")
    if trace.early_stop:
        print(f"note: {trace.early_stop}")
    return EXIT_OK


def cmd_constrain(args) -> int:
    structure = _load_structure(args.structure) if args.structure else None
    if args.constrain_cmd == "static-points":
        cons = constraints_from_static_points(structure, _load_ss_points(args.points))
    elif args.constrain_cmd == "clusters":
        targets = {}
        for token in args.targets.split(";"):
            label, _, value = token.partition("=")
            targets[parse_cluster(label)] = float(value)
        cons = constraints_from_cluster_targets(structure, targets)
    elif args.constrain_cmd == "transcritical":
        cons = constraints_transcritical(structure, args.u_c, args.alpha)
    elif args.constrain_cmd == "fixed-point":
        s1 = _load_structure(args.structure)
        s2 = _load_structure(args.structure2)
        target = tuple(float(v) for v in args.target.split(","))
        cons = constraints_fixed_point((s1, s2), target)  # type: ignore[arg-type]
    else:
        raise ConfigError(f"unknown constrain subcommand {args.constrain_cmd!r}")
    _write_json(args.out, cons.to_json())
    print(f"wrote {args.out} ({cons.n_constraints} constraints)")
    return EXIT_OK


def cmd_fit(args) -> int:
    ts = load_csv(args.data)
    structure = _load_structure(args.structure)
    if args.estimator == "els":
        result = extended_least_squares(ts, structure)
        model = result.model
        print(f"extended LS: {result.n_iter} iterations, converged={result.converged}")
    else:
        prob = build_regression(ts, structure)
        if args.estimator == "ls":
            theta = least_squares(prob)
        elif args.estimator == "wls":
            theta = weighted_least_squares(
                prob, forgetting_weights(args.forgetting, prob.target.size)
            )
        elif args.estimator == "cls":
            cons = _load_constraints(args.constraints) if args.constraints else ConstraintSet.empty(prob.n_params)
            theta = constrained_least_squares(prob, cons)
        elif args.estimator == "mo":
            if not args.ss_points:
                raise ConfigError("fit mo requires --ss-points")
            dyn = affine_pair_from_regression(prob)
            ss = affine_pair_from_static_points(structure, _load_ss_points(args.ss_points))
            theta = multiobjective_estimate(
                [
                    AffinePair(dyn.v, dyn.G, args.lam),
                    AffinePair(ss.v, ss.G, 1.0 - args.lam),
                ]
            )
        else:
            raise ConfigError(f"unknown estimator {args.estimator!r}")
        model = PolynomialModel(structure, theta)
    model.save(args.out)
    print(f"wrote {args.out}")
    print(model.render())
    return EXIT_OK


def cmd_simulate(args) -> int:
    model = PolynomialModel.load(args.model)
    ts = load_csv(args.input)
    init = (
        np.array([float(v) for v in args.init.split(",")])
        if args.init
        else ts.y[: max(model.structure.max_lag, 1)]
    )
    sim = simulate_free_run(model, ts.u, init=init)
    with open(args.out, "w", newline="\n") as fh:
        fh.write("k,u,y_sim\n")
        for k, (u, y) in enumerate(zip(ts.u, sim.y)):
            fh.write(f"{k},{u:.17g},{y:.17g}\n")
    if not args.no_plots:
        plots.save_simulation_plot(ts.y, sim.y, _png_twin(args.out))
    print(f"wrote {args.out}" + (" (diverged, truncated)" if sim.diverged else ""))
    return EXIT_NUMERIC if sim.diverged else EXIT_OK


def cmd_static(args) -> int:
    model = PolynomialModel.load(args.model)
    grid = np.linspace(args.u_min, args.u_max, args.points)
    curve = static_curve(model, grid)
    with open(args.out, "w", newline="\n") as fh:
        fh.write("u,y\n")
        for u, values in curve:
            for y in values:
                fh.write(f"{u:.17g},{y:.17g}\n")
    if not args.no_plots:
        plots.save_static_curve_plot(curve, _png_twin(args.out))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_hysteresis(args) -> int:
    model = PolynomialModel.load(args.model)
    branches = hysteresis_branches(model)
    grid = np.linspace(args.u_min, args.u_max, args.points)
    loading = branches.loading(grid)
    unloading = branches.unloading(grid)
    with open(args.out, "w", newline="\n") as fh:
        fh.write("u,y_loading,y_unloading\n")
        for u, yl, yu in zip(grid, loading, unloading):
            fh.write(f"{u:.17g},{yl:.17g},{yu:.17g}\n")
    if not args.no_plots:
        plots.save_hysteresis_plot(grid, loading, unloading, _png_twin(args.out))
    area = loop_area(branches, args.u_min, args.u_max)
    print(f"wrote {args.out}; loop area over [{args.u_min:g}, {args.u_max:g}] = {area:.6g}")
    return EXIT_OK


def cmd_validate(args) -> int:
    model = PolynomialModel.load(args.model)
    ts = load_csv(args.data)
    report = validate_model(model, ts, tau_max=args.tau_max)
    report.save(args.report)
    if not args.no_plots:
        plots.save_residual_plot(report.residual_results, _png_twin(args.report))
        plots.save_simulation_plot(
            report.y, report.y_hat_sim, Path(args.report).with_suffix(".freerun.png"), report.row_index
        )
    rmse = f"{report.rmse:.6g}" if np.isfinite(report.rmse) else "inf (diverged)"
    print(f"wrote {args.report}; free-run RMSE = {rmse}")
    for res in report.residual_results:
        status = "pass" if res.passed else "FAIL"
        print(f"  {res.name:8s} {status} ({res.n_outside}/{len(res.lags)} lags outside band)")
    return EXIT_OK if report.all_tests_passed and not report.diverged else EXIT_VALIDATION


def cmd_pareto(args) -> int:
    ts = load_csv(args.data)
    structure = _load_structure(args.structure)
    prob = build_regression(ts, structure)
    dyn = affine_pair_from_regression(prob)
    ss = affine_pair_from_static_points(structure, _load_ss_points(args.ss_points))
    points = pareto_sweep(dyn, ss, args.lambda_grid)
    pick_data = load_csv(args.pick_data) if args.pick_data else ts
    picked = pick_from_pareto(points, structure, pick_data)
    with open(args.out, "w", newline="\n") as fh:
        fh.write("lambda,j_dyn,j_ss,picked\n")
        for p in points:
            fh.write(f"{p.lam:.17g},{p.j_dyn:.17g},{p.j_ss:.17g},{int(p is picked)}\n")
    if not args.no_plots:
        plots.save_pareto_plot(points, _png_twin(args.out), picked)
    if args.out_model:
        PolynomialModel(structure, picked.theta).save(args.out_model)
        print(f"wrote {args.out_model}")
    print(f"wrote {args.out}; picked lambda = {picked.lam:g}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if args.no_plots:
        overrides["plots"] = False
    config = PipelineConfig.load(args.config, overrides)
    result = run_pipeline(config)
    print(f"pipeline ok; artifacts in {result.out_dir}")
    for name in result.manifest["artifacts"]:
        print(f"  {name}")
    if result.manifest.get("validation_passed") is False and args.strict:
        return EXIT_VALIDATION
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="narx", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_no_plots(p):
        p.add_argument("--no-plots", action="store_true", help="skip PNG rendering")

    p = sub.add_parser("data", help="generate, decimate or split data files")
    data_sub = p.add_subparsers(dest="data_cmd", required=True)
    g = data_sub.add_parser("gen-hammerstein", help="dead-zone Hammerstein benchmark")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--noise-std", type=float, default=0.1)
    g.add_argument("--out", required=True)
    add_no_plots(g)
    d = data_sub.add_parser("decimate", help="sampling-period selection and decimation")
    d.add_argument("--in", dest="infile", required=True)
    d.add_argument("--tau-max", type=int, default=500)
    d.add_argument("--out")
    add_no_plots(d)
    s = data_sub.add_parser("split", help="identification/validation split")
    s.add_argument("--in", dest="infile", required=True)
    s.add_argument("--n-ident", type=int, required=True)
    p.set_defaults(func=cmd_data)

    p = sub.add_parser("select", help="forward structure selection")
    p.add_argument("--data", required=True)
    p.add_argument("--meta", required=True, help='e.g. "ny=3,nu=3,l=3,d=1"')
    p.add_argument("method", choices=["err", "srr", "ssmr"])
    p.add_argument("--n-max", type=int, default=10)
    p.add_argument("--stop", choices=["aic", "none"], default="aic")
    p.add_argument("--no-constant", action="store_true")
    p.add_argument("--hysteresis", action="store_true")
    p.add_argument("--forbid", help='clusters to prune, e.g. "const;u;y^2"')
    p.add_argument("--out", required=True, help="trace CSV path")
    p.add_argument("--out-structure", help="write selected structure JSON here")
    add_no_plots(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("constrain", help="build constraint sets from auxiliary information")
    con_sub = p.add_subparsers(dest="constrain_cmd", required=True)
    c = con_sub.add_parser("static-points")
    c.add_argument("--structure", required=True)
    c.add_argument("--points", required=True, help="CSV of u,y[,branch]")
    c.add_argument("--out", required=True)
    c = con_sub.add_parser("clusters")
    c.add_argument("--structure", required=True)
    c.add_argument("--targets", required=True, help='e.g. "u^2=0.0615;u*y=-0.036;y=0.9128"')
    c.add_argument("--out", required=True)
    c = con_sub.add_parser("transcritical")
    c.add_argument("--structure", required=True)
    c.add_argument("--u-c", dest="u_c", type=float, required=True)
    c.add_argument("--alpha", type=float, required=True)
    c.add_argument("--out", required=True)
    c = con_sub.add_parser("fixed-point")
    c.add_argument("--structure", required=True, help="equation 1 structure JSON")
    c.add_argument("--structure2", required=True, help="equation 2 structure JSON")
    c.add_argument("--target", required=True, help='"y1,y2"')
    c.add_argument("--out", required=True)
    p.set_defaults(func=cmd_constrain)

    p = sub.add_parser("fit", help="estimate parameters")
    p.add_argument("estimator", choices=["ls", "wls", "cls", "els", "mo"])
    p.add_argument("--data", required=True)
    p.add_argument("--structure", required=True)
    p.add_argument("--constraints", help="constraint JSON (cls)")
    p.add_argument("--forgetting", type=float, default=0.99, help="forgetting factor (wls)")
    p.add_argument("--ss-points", help="steady-state CSV (mo)")
    p.add_argument("--lam", type=float, default=0.5, help="dynamical weight lambda (mo)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="free-run simulation on an input file")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="CSV whose u column drives the model")
    p.add_argument("--init", help='initial output lags, e.g. "0,0"')
    p.add_argument("--out", required=True)
    add_no_plots(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("static", help="static curve over an input grid")
    p.add_argument("--model", required=True)
    p.add_argument("--u-min", type=float, required=True)
    p.add_argument("--u-max", type=float, required=True)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--out", required=True)
    add_no_plots(p)
    p.set_defaults(func=cmd_static)

    p = sub.add_parser("hysteresis", help="loading/unloading branches and loop area")
    p.add_argument("--model", required=True)
    p.add_argument("--u-min", type=float, default=0.0)
    p.add_argument("--u-max", type=float, default=1.0)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--out", required=True)
    add_no_plots(p)
    p.set_defaults(func=cmd_hysteresis)

    p = sub.add_parser("validate", help="free-run metrics and residual tests")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tau-max", type=int, default=25)
    p.add_argument("--report", required=True)
    add_no_plots(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("pareto", help="bi-objective sweep and J_corr model picking")
    p.add_argument("--data", required=True)
    p.add_argument("--structure", required=True)
    p.add_argument("--ss-points", required=True)
    p.add_argument("--lambda-grid", type=int, default=21)
    p.add_argument("--pick-data", help="data for J_corr ranking (default: --data)")
    p.add_argument("--out", required=True)
    p.add_argument("--out-model", help="write the picked model JSON here")
    add_no_plots(p)
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("pipeline", help="run a configured end-to-end pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out-dir", help="override the config output directory")
    p.add_argument("--strict", action="store_true", help="exit 4 if validation fails")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc.cause, (ConfigError, DataError, OSError)) else EXIT_NUMERIC
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
