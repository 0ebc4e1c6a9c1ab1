"""Batch pipeline: data -> prune -> select -> constrain -> fit -> analyze -> validate.

Configured by a single JSON document with one section per stage; a fixed
seed makes the whole run (and its artifacts) reproducible byte for byte.
On a stage failure the artifacts written so far are kept with a
``.partial`` suffix so a crashed run can be inspected.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plots
from .dataset import (
    DataError,
    SplitSpec,
    TimeSeries,
    choose_decimation,
    covariance_analysis,
    decimate,
    generate_hammerstein_benchmark,
    load_csv,
    save_csv,
    split,
)
from .estimators import (
    ConstraintSet,
    EstimationError,
    build_regression,
    constrained_least_squares,
    extended_least_squares,
    least_squares,
    weighted_least_squares,
    forgetting_weights,
)
from .greybox import (
    GreyboxError,
    SteadyStatePoint,
    constraints_from_cluster_targets,
    constraints_from_static_points,
    constraints_transcritical,
    prune_clusters,
)
from .selection import SelectionError, aic_stop, frols_err, srr_select, ssmr_select
from .structure import (
    MetaParams,
    ModelStructure,
    PolynomialModel,
    StructureError,
    cluster_of,
    generate_candidates,
    parse_cluster,
)
from .dynamics import DynamicsError, static_curve
from .validation import ValidationError, validate_model

logger = logging.getLogger(__name__)

NUMERIC_ERRORS = (
    EstimationError,
    SelectionError,
    GreyboxError,
    DynamicsError,
    ValidationError,
    np.linalg.LinAlgError,
)


class ConfigError(ValueError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    """Parsed pipeline configuration; see ``from_json`` for the schema."""

    seed: int
    out_dir: Path
    data: dict
    candidates: dict
    prune: dict = field(default_factory=dict)
    select: dict = field(default_factory=dict)
    constraints: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    static: dict = field(default_factory=dict)
    validate: dict = field(default_factory=dict)
    plots: bool = True

    @classmethod
    def from_json(cls, raw: dict, overrides: dict | None = None) -> "PipelineConfig":
        raw = dict(raw)
        for key, value in (overrides or {}).items():
            if value is not None:
                raw[key] = value
        try:
            return cls(
                seed=int(raw.get("seed", 0)),
                out_dir=Path(raw["out_dir"]),
                data=dict(raw["data"]),
                candidates=dict(raw["candidates"]),
                prune=dict(raw.get("prune", {})),
                select=dict(raw.get("select", {})),
                constraints=dict(raw.get("constraints", {})),
                fit=dict(raw.get("fit", {})),
                static=dict(raw.get("static", {})),
                validate=dict(raw.get("validate", {})),
                plots=bool(raw.get("plots", True)),
            )
        except KeyError as exc:
            raise ConfigError(f"pipeline config missing required section {exc}") from exc

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"no such config file: {path}")
        with open(path) as fh:
            return cls.from_json(json.load(fh), overrides)


@dataclass
class PipelineResult:
    manifest: dict
    model: PolynomialModel | None
    out_dir: Path


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_trace_csv(path: Path, trace) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("step,regressor,criterion,error\n")
        errors = trace.msse if trace.msse else trace.ms1pe
        for i, ((reg, crit), err) in enumerate(zip(trace.picks, errors), start=1):
            fh.write(f"{i},{reg.render()},{crit:.17g},{err:.17g}\n")


def _write_curve_csv(path: Path, curve) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("u,y\n")
        for u, values in curve:
            for y in values:
                fh.write(f"{u:.17g},{y:.17g}\n")


def _load_data(config: PipelineConfig) -> tuple[TimeSeries, TimeSeries]:
    section = config.data
    if "path" in section:
        ts = load_csv(section["path"])
    elif "generate" in section:
        gen = section["generate"]
        kind = gen.get("kind", "hammerstein")
        if kind != "hammerstein":
            raise ConfigError(f"unknown generator kind {kind!r}")
        ts = generate_hammerstein_benchmark(
            seed=config.seed, n=int(gen.get("n", 500)), noise_std=float(gen.get("noise_std", 0.1))
        )
        discard = int(gen.get("discard", 0))
        if discard:
            ts = TimeSeries(ts.u[discard:], ts.y[discard:], ts.t_s, ts.name)
    else:
        raise ConfigError("data section needs either 'path' or 'generate'")

    if "decimate" in section:
        tau_max = int(section["decimate"].get("tau_max", min(ts.n // 4, 500)))
        report = covariance_analysis(ts.y, tau_max)
        if report.tau_m_star is None:
            raise DataError("covariance analysis found no first minimum; cannot decimate")
        choice = choose_decimation(report.tau_m_star)
        logger.info("decimation: delta=%d tau_m=%d relaxed=%s", choice.delta, choice.tau_m, choice.relaxed)
        ts = decimate(ts, choice.delta)

    if "split" in section:
        n_ident = int(section["split"]["n_ident"])
        spec = SplitSpec(n_ident, ts.n - n_ident)
        return split(ts, spec)
    return ts, ts


def _build_constraints(config: PipelineConfig, structure: ModelStructure) -> ConstraintSet | None:
    section = config.constraints
    if not section:
        return None
    if "file" in section:
        with open(section["file"]) as fh:
            return ConstraintSet.from_json(json.load(fh))
    if "transcritical" in section:
        tc = section["transcritical"]
        return constraints_transcritical(structure, float(tc["u_c"]), float(tc["alpha"]))
    if "cluster_targets" in section:
        targets = {
            parse_cluster(label): float(value)
            for label, value in section["cluster_targets"].items()
        }
        return constraints_from_cluster_targets(structure, targets)
    if "static_points" in section:
        points = [
            SteadyStatePoint(float(p["u"]), float(p["y"]), int(p.get("branch", 1)))
            for p in section["static_points"]
        ]
        return constraints_from_static_points(structure, points)
    raise ConfigError(f"unrecognized constraints section: {sorted(section)}")


def _required_clusters(config: PipelineConfig) -> list:
    if "transcritical" in config.constraints:
        return [parse_cluster(s) for s in ("u^2", "y", "u*y", "y^2")]
    if "cluster_targets" in config.constraints:
        return [parse_cluster(s) for s in config.constraints["cluster_targets"]]
    return []


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Execute the configured stages in order, writing artifacts as they complete.

    Returns the artifact manifest; raises StageFailure (with completed
    artifacts renamed to ``.partial``) when a stage cannot proceed.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"seed": config.seed, "stages": [], "artifacts": []}
    written: list[Path] = []

    def emit(name: str, writer) -> Path:
        path = out_dir / name
        writer(path)
        written.append(path)
        manifest["artifacts"].append(name)
        return path

    def fail(stage: str, exc: Exception):
        for path in written:
            path.rename(path.with_suffix(path.suffix + ".partial"))
        raise StageFailure(stage, exc) from exc

    stage = "data"
    try:
        ident, valid = _load_data(config)
        emit("ident.csv", lambda p: save_csv(ident, p))
        if valid is not ident:
            emit("valid.csv", lambda p: save_csv(valid, p))
        manifest["stages"].append(stage)
    except (DataError, ConfigError, OSError) as exc:
        fail(stage, exc)

    stage = "candidates"
    try:
        meta = MetaParams(
            n_y=int(config.candidates["ny"]),
            n_u=int(config.candidates["nu"]),
            n_e=int(config.candidates.get("ne", 0)),
            ell=int(config.candidates.get("ell", 1)),
            d=int(config.candidates.get("d", 1)),
        )
        pool = generate_candidates(
            meta,
            include_constant=bool(config.candidates.get("constant", True)),
            include_noise=bool(config.candidates.get("noise", False)),
            include_hysteresis=bool(config.candidates.get("hysteresis", False)),
        )
        if config.prune.get("forbidden"):
            forbidden = [parse_cluster(s) for s in config.prune["forbidden"]]
            pool = prune_clusters(pool, forbidden)
        manifest["stages"].append(stage)
        manifest["n_candidates"] = len(pool)
    except (StructureError, GreyboxError, KeyError, ConfigError) as exc:
        fail(stage, exc)

    stage = "select"
    try:
        method = config.select.get("method", "err")
        n_max = int(config.select.get("n_max", 10))
        if method == "err":
            trace = frols_err(ident, pool, n_max)
        elif method == "srr":
            trace = srr_select(ident, pool, n_max)
        elif method == "ssmr":
            trace = ssmr_select(ident, pool, n_max)
        else:
            raise ConfigError(f"unknown selection method {method!r}")
        if config.select.get("stop", "aic") == "aic":
            aic_stop(trace, ident.n)
        else:
            trace.stop_index = len(trace.picks)
        structure = trace.selected_structure(trace.stop_index)

        # constraints need their clusters represented; append the best-ranked
        # candidate of any missing cluster before fitting
        required = _required_clusters(config)
        have = {cluster_of(r) for r in structure.regressors}
        added = []
        regressors = list(structure.regressors)
        for cluster in required:
            if cluster not in have:
                extras = [r for r in pool if cluster_of(r) == cluster and r not in regressors]
                if not extras:
                    raise GreyboxError(
                        f"constraint needs cluster {cluster.label} but no candidate provides it"
                    )
                regressors.append(extras[0])
                added.append(extras[0].render())
        if added:
            logger.info("select: appended %s for constraint coverage", added)
            manifest["appended_for_constraints"] = added
            structure = ModelStructure(structure.meta, tuple(regressors))
        emit("selection_trace.csv", lambda p: _write_trace_csv(p, trace))
        if config.plots:
            emit("selection_trace.png", lambda p: plots.save_selection_plot(trace, p))
        manifest["stages"].append(stage)
        manifest["selected"] = [r.render() for r in structure.regressors]
    except NUMERIC_ERRORS as exc:
        fail(stage, exc)
    except ConfigError as exc:
        fail(stage, exc)

    stage = "fit"
    try:
        cons = _build_constraints(config, structure)
        estimator = config.fit.get("estimator", "cls" if cons is not None else "ls")
        prob = build_regression(ident, structure)
        if estimator == "ls":
            theta = least_squares(prob)
        elif estimator == "wls":
            lam = float(config.fit.get("forgetting", 1.0))
            theta = weighted_least_squares(prob, forgetting_weights(lam, prob.target.size))
        elif estimator == "cls":
            theta = constrained_least_squares(prob, cons or ConstraintSet.empty(prob.n_params))
        elif estimator == "els":
            result = extended_least_squares(ident, structure)
            theta = result.model.theta
        else:
            raise ConfigError(f"unknown estimator {estimator!r}")
        model = PolynomialModel(structure, theta)
        if cons is not None:
            manifest["constraint_violation"] = float(np.max(np.abs(cons.S @ theta - cons.c)))
        emit("model.json", lambda p: model.save(p))
        manifest["stages"].append(stage)
    except NUMERIC_ERRORS as exc:
        fail(stage, exc)
    except (ConfigError, OSError) as exc:
        fail(stage, exc)

    stage = "static"
    if config.static:
        try:
            grid = np.linspace(
                float(config.static.get("u_min", 0.0)),
                float(config.static.get("u_max", 1.0)),
                int(config.static.get("points", 100)),
            )
            curve = static_curve(model, grid)
            emit("static_curve.csv", lambda p: _write_curve_csv(p, curve))
            if config.plots:
                emit("static_curve.png", lambda p: plots.save_static_curve_plot(curve, p))
            manifest["stages"].append(stage)
        except NUMERIC_ERRORS as exc:
            fail(stage, exc)

    stage = "validate"
    if config.validate:
        try:
            tau_max = int(config.validate.get("tau_max", 25))
            report = validate_model(model, valid, tau_max=tau_max)
            emit("report.json", lambda p: report.save(p))
            if config.plots:
                emit("residual_tests.png", lambda p: plots.save_residual_plot(report.residual_results, p))
                emit(
                    "free_run.png",
                    lambda p: plots.save_simulation_plot(
                        report.y, report.y_hat_sim, p, report.row_index
                    ),
                )
            manifest["stages"].append(stage)
            manifest["validation_passed"] = report.all_tests_passed
            manifest["rmse"] = report.rmse if np.isfinite(report.rmse) else None
        except NUMERIC_ERRORS as exc:
            fail(stage, exc)

    _write_json(out_dir / "manifest.json", manifest)
    return PipelineResult(manifest, model, out_dir)
