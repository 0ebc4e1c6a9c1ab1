"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with ``pytest tests/test_acceptance.py -v -s``).

Experimental results from physical plants are not reproducible here;
printed model parameters stand in for them through constraint-algebra
checks, and the simulated dead-zone benchmark carries the end-to-end
gates.
"""

import numpy as np
import pytest

from conftest import ts_from
from oracles import (
    bisection_roots,
    fd_jacobian,
    generate_narx,
    kkt_cls,
    normal_equation_ls,
    simulate_reference,
)
from narxkit.dataset import (
    SplitSpec,
    TimeSeries,
    choose_decimation,
    covariance_analysis,
    generate_hammerstein_benchmark,
    split,
)
from narxkit.dynamics import (
    FixedPoint,
    NARPair,
    classify_fixed_point,
    hysteresis_branches,
    loop_area,
    simulate_free_run,
    simulated_loop_area,
    solve_fixed_points,
    static_curve,
    settle_constant_input,
)
from narxkit.estimators import (
    AffinePair,
    ConstraintSet,
    RegressionProblem,
    build_regression,
    constrained_least_squares,
    least_squares,
    pareto_sweep,
    weighted_least_squares,
)
from narxkit.greybox import constraints_transcritical, prune_clusters
from narxkit.pipeline import PipelineConfig, run_pipeline
from narxkit.selection import aic_stop, frols_err, srr_select, ssmr_select
from narxkit.structure import (
    MetaParams,
    ModelStructure,
    PolynomialModel,
    Regressor,
    TermCluster,
    cluster_coefficients,
    cluster_of,
    generate_candidates,
    meta_from_regressors,
    parse_cluster,
)
from narxkit.estimators import ParetoPoint
from narxkit.validation import pick_from_pareto, residual_tests

R = Regressor.parse


def report(criterion: int, message: str) -> None:
    print(f"[criterion {criterion}] PASS: {message}")


def model_of(term_theta):
    regs = tuple(R(t) for t, _ in term_theta)
    theta = np.array([v for _, v in term_theta])
    return PolynomialModel(ModelStructure(meta_from_regressors(regs), regs), theta)


# ---------------------------------------------------------------------------
# 1. Constraint algebra against printed model parameters
# ---------------------------------------------------------------------------


def test_criterion_1_constraint_algebra():
    thermal = model_of(
        [
            ("y(k-1)", 1.2796),
            ("u(k-1)*u(k-2)", 0.0178),
            ("u(k-1)^2", 0.0408),
            ("y(k-2)", -0.3668),
            ("y(k-1)*u(k-2)", -0.2565),
            ("y(k-2)*u(k-2)", 0.2205),
            ("u(k-2)^2", 0.0029),
        ]
    )
    sums = cluster_coefficients(thermal)
    assert sums[TermCluster(0, 2)] == pytest.approx(0.0615, abs=1e-4)
    assert sums[TermCluster(1, 1)] == pytest.approx(-0.0360, abs=1e-4)
    assert sums[TermCluster(1, 0)] == pytest.approx(0.9128, abs=1e-4)

    deadzone_structure = ModelStructure(
        MetaParams(n_y=1, n_u=3, ell=2, d=1),
        tuple(
            R(t)
            for t in (
                "y(k-1)",
                "u(k-1)^2",
                "u(k-1)*u(k-3)",
                "y(k-1)*u(k-3)",
                "u(k-3)^2",
                "y(k-1)^2",
            )
        ),
    )
    theta = np.array([0.82469, 0.25589, -0.15788, 0.17531, -0.09801, -0.02505])
    cons = constraints_transcritical(deadzone_structure, u_c=1.0, alpha=7.0)
    violation = np.max(np.abs(cons.S @ theta - cons.c))
    assert violation < 5e-5
    report(1, f"printed cluster sums within 1e-4; bifurcation rows within {violation:.1e}")


# ---------------------------------------------------------------------------
# 2. Dead-zone benchmark pipeline over 20 seeds
# ---------------------------------------------------------------------------

REQUIRED_CLUSTERS = [parse_cluster(s) for s in ("u^2", "y", "u*y", "y^2")]


def _deadzone_run(seed: int):
    """generate -> prune -> ERR select -> transcritical CLS, plus a black-box fit."""
    full = generate_hammerstein_benchmark(seed, 500)
    work = TimeSeries(full.u[100:], full.y[100:])
    ident, valid = split(work, SplitSpec(200, 200))
    meta = MetaParams(n_y=1, n_u=3, ell=2, d=1)
    pool = generate_candidates(meta)

    trace_bb = frols_err(ident, pool, 8)
    aic_stop(trace_bb, ident.n)
    structure_bb = trace_bb.selected_structure(trace_bb.stop_index)
    model_bb = PolynomialModel(structure_bb, least_squares(build_regression(ident, structure_bb)))

    pruned = prune_clusters(pool, [parse_cluster("const"), parse_cluster("u")])
    trace = frols_err(ident, pruned, 8)
    aic_stop(trace, ident.n)
    regressors = list(trace.selected_structure(trace.stop_index).regressors)
    have = {cluster_of(r) for r in regressors}
    for cluster in REQUIRED_CLUSTERS:
        if cluster not in have:
            regressors.append(
                next(r for r in pruned if cluster_of(r) == cluster and r not in regressors)
            )
    structure = ModelStructure(trace.meta, tuple(regressors))
    cons = constraints_transcritical(structure, u_c=1.0, alpha=7.0)
    theta = constrained_least_squares(build_regression(ident, structure), cons)
    model = PolynomialModel(structure, theta)
    violation = float(np.max(np.abs(cons.S @ theta - cons.c)))

    curve = static_curve(model, np.linspace(0.0, 2.8, 281))
    points = np.array([(u, y) for u, ys in curve for y in ys])
    zero_u = points[np.abs(points[:, 1]) < 1e-6, 0]
    breakpoint_u = float(zero_u.max()) if zero_u.size else float("nan")
    line = points[(points[:, 0] >= 1.3) & (points[:, 0] <= 2.7) & (np.abs(points[:, 1]) > 1e-6)]
    slope = float(np.polyfit(line[:, 0], line[:, 1], 1)[0]) if len(line) > 2 else float("nan")

    def free_run_rmse(m):
        k0 = m.structure.max_lag
        sim = simulate_free_run(m, valid.u, init=valid.y[: max(k0, 1)])
        if sim.diverged:
            return float("inf")
        return float(np.sqrt(np.mean((valid.y[k0:] - sim.y[k0:]) ** 2)))

    return violation, breakpoint_u, slope, free_run_rmse(model_bb), free_run_rmse(model)


def test_criterion_2_deadzone_pipeline():
    shape_ok = 0
    ordering_ok = 0
    worst_violation = 0.0
    for seed in range(20):
        violation, breakpoint_u, slope, rmse_bb, rmse_gb = _deadzone_run(seed)
        assert violation < 1e-10, f"seed {seed}: constraint violation {violation:.2e}"
        worst_violation = max(worst_violation, violation)
        if 0.95 <= breakpoint_u <= 1.05 and 6.5 <= slope <= 7.5:
            shape_ok += 1
        if rmse_gb >= rmse_bb:
            ordering_ok += 1
    assert shape_ok >= 18, f"breakpoint/slope recovered in only {shape_ok}/20 runs"
    assert ordering_ok >= 16, f"constrained RMSE >= black-box RMSE in only {ordering_ok}/20"
    report(
        2,
        f"constraints exact (worst {worst_violation:.1e}); shape {shape_ok}/20; "
        f"RMSE trade-off {ordering_ok}/20",
    )


# ---------------------------------------------------------------------------
# 3. Estimator oracles
# ---------------------------------------------------------------------------


def test_criterion_3_estimator_oracles():
    rng = np.random.default_rng(7)

    prob = RegressionProblem(rng.standard_normal((80, 5)), rng.standard_normal(80), 0)
    assert least_squares(prob) == pytest.approx(
        normal_equation_ls(prob.psi, prob.target), abs=1e-8
    )

    worst = 0.0
    for _ in range(100):
        psi = rng.standard_normal((40, 6))
        y = rng.standard_normal(40)
        S = rng.standard_normal((2, 6))
        c = rng.standard_normal(2)
        prob = RegressionProblem(psi, y, 0)
        theta = constrained_least_squares(prob, ConstraintSet(c, S))
        worst = max(worst, float(np.max(np.abs(theta - kkt_cls(psi, y, S, c)))))
    assert worst < 1e-9

    prob = RegressionProblem(rng.standard_normal((60, 4)), rng.standard_normal(60), 0)
    theta_ls = least_squares(prob)
    assert constrained_least_squares(prob, ConstraintSet.empty(4)) == pytest.approx(
        theta_ls, abs=1e-12
    )
    assert weighted_least_squares(prob, np.ones(60)) == pytest.approx(theta_ls, abs=1e-12)

    g1, g2 = rng.standard_normal((50, 4)), rng.standard_normal((12, 4))
    v1, v2 = rng.standard_normal(50), rng.standard_normal(12)
    dyn, ss = AffinePair(v1, g1), AffinePair(v2, g2)
    points = pareto_sweep(dyn, ss, np.array([0.0, 1.0]))
    mono_ss, *_ = np.linalg.lstsq(g2, v2, rcond=None)
    mono_dyn, *_ = np.linalg.lstsq(g1, v1, rcond=None)
    assert points[0].theta == pytest.approx(mono_ss, abs=1e-10)
    assert points[1].theta == pytest.approx(mono_dyn, abs=1e-10)
    report(3, f"LS/CLS/WLS/MO agree with their oracles (worst CLS gap {worst:.1e})")


# ---------------------------------------------------------------------------
# 4. Structure-selection recovery and criterion definition oracles
# ---------------------------------------------------------------------------

PLANTED_SYSTEMS = [
    [(0.5, [("y", 1, 1)]), (0.8, [("u", 1, 1)])],
    [(0.3, [("y", 1, 1)]), (0.6, [("u", 2, 1)]), (0.2, [("y", 1, 1), ("u", 1, 1)])],
    [(0.8, [("y", 1, 1)]), (-0.2, [("u", 1, 2)])],
    [(0.4, [("y", 2, 1)]), (0.5, [("u", 1, 1)]), (0.1, [("u", 1, 1), ("u", 2, 1)])],
    [(0.25, []), (0.5, [("y", 1, 1)]), (0.3, [("u", 3, 1)])],
]


def _truth_set(terms):
    return {Regressor(tuple(factors)) for _, factors in terms}


def test_criterion_4_selection_recovery():
    pool = generate_candidates(MetaParams(n_y=3, n_u=3, ell=3, d=1))
    assert len(pool) == 84

    exact = 0
    for i, terms in enumerate(PLANTED_SYSTEMS):
        truth = _truth_set(terms)
        u, y = generate_narx(terms, 600, seed=100 + i)
        trace = frols_err(ts_from(u, y), pool, 8)
        picks = [r for r, _ in trace.picks]
        if set(picks[: len(truth)]) == truth and trace.criterion_sum() >= 1.0 - 1e-9:
            exact += 1
    assert exact == 5, f"noiseless exact recovery {exact}/5"

    # under noise the true terms must rank first and survive into the
    # AIC-stopped model; greedy selection over 80+ candidates keeps
    # admitting small spurious gains, so exact-size stopping is not the gate
    recovered = 0
    for i, terms in enumerate(PLANTED_SYSTEMS):
        truth = _truth_set(terms)
        u, y = generate_narx(terms, 600, seed=100 + i, noise_std=0.05)
        ts = ts_from(u, y)
        trace = frols_err(ts, pool, 8)
        stop = aic_stop(trace, ts.n)
        picks = [r for r, _ in trace.picks]
        if set(picks[: len(truth)]) == truth and truth <= set(picks[:stop]):
            recovered += 1
    assert recovered >= 4, f"noisy recovery {recovered}/5"

    # definition oracles for all three criteria on a small pool
    small_pool = generate_candidates(MetaParams(n_y=1, n_u=2, ell=2, d=1))
    terms = [(0.5, [("y", 1, 1)]), (0.7, [("u", 1, 1)])]
    u, y = generate_narx(terms, 300, seed=55, noise_std=0.1)
    ts = ts_from(u, y)
    k0 = max(r.max_effective_lag for r in small_pool)
    rows = np.arange(k0, ts.n)
    sigma_y2 = float(np.mean(ts.y[rows] ** 2))

    def refit(chosen):
        cols = []
        for reg in chosen:
            col = np.ones(rows.size)
            for kind, lag, exp in reg.factors:
                col = col * {"y": ts.y, "u": ts.u}[kind][rows - lag] ** exp
            cols.append(col)
        psi = np.column_stack(cols)
        theta, *_ = np.linalg.lstsq(psi, ts.y[rows], rcond=None)
        resid = ts.y[rows] - psi @ theta
        return theta, float(np.mean(resid**2))

    worst = 0.0
    trace = frols_err(ts, small_pool, 4)
    prev = sigma_y2
    chosen = []
    for reg, err in trace.picks:
        chosen.append(reg)
        _, ms1pe = refit(chosen)
        worst = max(worst, abs(err - (prev - ms1pe) / sigma_y2))
        prev = ms1pe

    def free_run(chosen, theta):
        fit_terms = [(t, list(r.factors)) for t, r in zip(theta, chosen)]
        own_k0 = max(r.max_effective_lag for r in chosen)
        return simulate_reference(fit_terms, ts.u, ts.y[: max(own_k0, 1)])[k0:]

    trace = srr_select(ts, small_pool, 3)
    prev = sigma_y2
    chosen = []
    for step, (reg, srr) in enumerate(trace.picks):
        chosen.append(reg)
        theta, _ = refit(chosen)
        msse = float(np.mean((ts.y[rows] - free_run(chosen, theta)) ** 2))
        worst = max(worst, abs(srr - (prev - msse) / sigma_y2))
        prev = msse

    sigma_k = 0.4
    trace = ssmr_select(ts, small_pool, 3, kernel_sigma=sigma_k)
    v_prev = float(np.mean(np.exp(-(ts.y[rows] ** 2) / (2 * sigma_k**2))))
    chosen = []
    for reg, ssmr in trace.picks:
        chosen.append(reg)
        theta, _ = refit(chosen)
        diff = ts.y[rows] - free_run(chosen, theta)
        v_new = float(np.mean(np.exp(-(diff**2) / (2 * sigma_k**2))))
        worst = max(worst, abs(ssmr - (v_new - v_prev) / sigma_y2))
        v_prev = v_new

    assert worst < 1e-8
    report(
        4,
        f"noiseless exact 5/5; noisy ranked-and-contained {recovered}/5; "
        f"criterion oracles within {worst:.1e}",
    )


# ---------------------------------------------------------------------------
# 5. Dynamics suite
# ---------------------------------------------------------------------------

VALVE_TERMS = [
    ("y(k-1)", 0.80665),
    ("u(k-1)", 0.02888),
    ("1", 0.30362),
    ("u(k-1)*u2(k-1)", 0.57737),
    ("y(k-1)*u2(k-1)", -0.52294),
    ("y(k-1)*u(k-1)", 0.022105),
    ("u(k-1)*u3(k-1)", -0.00864),
    ("y(k-1)*u3(k-1)", 0.00787),
]

DEADZONE_TERMS = [
    ("y(k-1)", 0.82469),
    ("u(k-1)^2", 0.25589),
    ("u(k-1)*u(k-3)", -0.15788),
    ("y(k-1)*u(k-3)", 0.17531),
    ("u(k-3)^2", -0.09801),
    ("y(k-1)^2", -0.02505),
]


def test_criterion_5_dynamics_suite():
    from narxkit.dynamics import SteadyStateRelation

    rng = np.random.default_rng(17)
    for _ in range(50):
        coeffs = rng.uniform(-2, 2, 4)
        coeffs[3] = float(rng.choice([-1.0, 1.0])) * rng.uniform(0.5, 2.0)
        rel = SteadyStateRelation(
            {TermCluster(p, 0): float(coeffs[p]) for p in range(4)}, 0
        )
        roots = sorted(fp.y_bar for fp in solve_fixed_points(rel, 0.0))

        def g(x):
            return coeffs[0] + (coeffs[1] - 1.0) * x + coeffs[2] * x**2 + coeffs[3] * x**3

        for oracle_root in bisection_roots(g, -20.0, 20.0, n_grid=40001):
            assert any(abs(r - oracle_root) < 1e-6 for r in roots)

    # Jacobian eigenvalues against central finite differences
    regs = ("y(k-1)", "u(k-1)", "y(k-1)^2", "y(k-1)*u(k-1)", "u(k-1)^3")
    pair = NARPair(
        model_of(list(zip(regs, rng.uniform(-0.5, 0.5, 5)))),
        model_of(list(zip(regs, rng.uniform(-0.5, 0.5, 5)))),
    )
    for _ in range(10):
        point = rng.uniform(-1, 1, 2)
        jac_fd = fd_jacobian(lambda x: np.array(pair.evaluate(x[0], x[1])), point)
        fp = classify_fixed_point(pair, FixedPoint((point[0], point[1])))
        eig_fd = np.sort_complex(np.linalg.eigvals(jac_fd))
        assert np.max(np.abs(np.sort_complex(fp.eigvals) - eig_fd)) < 1e-5

    # stable static-curve points confirmed by free-run settling
    deadzone = model_of(DEADZONE_TERMS)
    for u_bar, stable in static_curve(deadzone, np.array([0.3, 0.7, 1.4, 2.0, 2.6])):
        for y_bar in stable:
            settled, ok = settle_constant_input(deadzone, u_bar, init=y_bar + 0.03)
            assert ok and abs(settled - y_bar) < 1e-6

    # hysteresis: zero u3 coefficients collapse the loop exactly
    collapsed = model_of([(t, 0.0 if "u3" in t else v) for t, v in VALVE_TERMS])
    assert loop_area(hysteresis_branches(collapsed), 1.8, 3.4) == 0.0

    # quasi-static rate invariance of the valve loop
    valve = model_of(VALVE_TERMS)
    area = simulated_loop_area(valve, 1.8, 3.4, period=400_000, cycles=2)
    area_slow = simulated_loop_area(valve, 1.8, 3.4, period=800_000, cycles=2)
    change = abs(area_slow - area) / area
    assert change < 0.01
    report(5, f"roots/Jacobians/settling verified; loop area rate change {change:.2%}")


# ---------------------------------------------------------------------------
# 6. Decimation criterion
# ---------------------------------------------------------------------------


def test_criterion_6_decimation():
    choice = choose_decimation(55)
    assert choice.delta == 4
    assert choice.tau_m == 14
    assert not choice.relaxed

    rng = np.random.default_rng(23)
    y = np.sin(np.arange(900) / 7.0) + 0.1 * rng.standard_normal(900)
    result = covariance_analysis(y, 80)
    mean = y.mean()
    worst = 0.0
    for tau in range(81):
        acc = 0.0
        for k in range(tau, y.size):
            acc += (y[k] - mean) * (y[k - tau] - mean)
        worst = max(worst, abs(result.r_lin[tau] - acc / y.size))
    assert worst < 1e-12 * float(np.max(np.abs(result.r_lin)))
    report(6, f"delta(55) = 4 with tau_m = 14; covariance oracle gap {worst:.1e}")


# ---------------------------------------------------------------------------
# 7. Residual-test calibration
# ---------------------------------------------------------------------------


def test_criterion_7_residual_calibration():
    failures = {name: 0 for name in ("xi_xi", "u_xi", "u2_xi", "u2_xi2", "xi_xiu")}
    for seed in range(500):
        rng = np.random.default_rng(seed)
        xi = rng.standard_normal(400)
        u = rng.standard_normal(400)
        for res in residual_tests(xi, u, tau_max=25):
            failures[res.name] += not res.passed
    rates = {name: count / 500 for name, count in failures.items()}
    for name, rate in rates.items():
        assert 0.02 <= rate <= 0.10, f"{name}: false-alarm rate {rate:.3f}"

    ma_failures = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal(400)
        xi = raw.copy()
        xi[1:] += raw[:-1]
        u = rng.standard_normal(400)
        results = {r.name: r for r in residual_tests(xi, u, tau_max=25)}
        ma_failures += not results["xi_xi"].passed
    assert ma_failures == 100
    pretty = ", ".join(f"{k}={v:.1%}" for k, v in rates.items())
    report(7, f"false alarms in [2%, 10%] ({pretty}); MA residuals rejected 100/100")


# ---------------------------------------------------------------------------
# 8. Pareto sweep and J_corr picking
# ---------------------------------------------------------------------------


def test_criterion_8_pareto_jcorr():
    terms = [(0.5, [("y", 1, 1)]), (0.8, [("u", 1, 1)])]
    regs = (R("y(k-1)"), R("u(k-1)"))
    structure = ModelStructure(meta_from_regressors(regs), regs)
    truth = np.array([0.5, 0.8])
    hits = 0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        u, y = generate_narx(terms, 600, seed=seed, noise_std=0.05)
        valid = ts_from(u[300:], y[300:])
        thetas = [truth] + [
            truth * (1 + rng.uniform(0.1, 0.25, 2) * rng.choice([-1.0, 1.0], 2))
            for _ in range(4)
        ]
        order = rng.permutation(5)
        points = [
            ParetoPoint(lam=j / 4.0, theta=thetas[i], j_dyn=0.0, j_ss=0.0)
            for j, i in enumerate(order)
        ]
        picked = pick_from_pareto(points, structure, valid)
        hits += bool(np.array_equal(picked.theta, truth))
    assert hits >= 48, f"planted truth picked in only {hits}/50 sweeps"

    rng = np.random.default_rng(31)
    for _ in range(20):
        g1 = rng.standard_normal((60, 4))
        g2 = rng.standard_normal((10, 4))
        base = rng.standard_normal(4)
        dyn = AffinePair(g1 @ base + 0.3 * rng.standard_normal(60), g1)
        ss = AffinePair(g2 @ base + 0.1 * rng.standard_normal(10), g2)
        points = pareto_sweep(dyn, ss, 21)
        j_dyn = [p.j_dyn for p in points]
        j_ss = [p.j_ss for p in points]
        scale = max(j_dyn[0], 1.0)
        assert all(a >= b - 1e-9 * scale for a, b in zip(j_dyn, j_dyn[1:]))
        assert all(a <= b + 1e-9 * scale for a, b in zip(j_ss, j_ss[1:]))
    report(8, f"planted truth picked {hits}/50; sweep costs monotone on 20 problems")


# ---------------------------------------------------------------------------
# 9. Pipeline determinism
# ---------------------------------------------------------------------------


def test_criterion_9_determinism(tmp_path):
    def config(out):
        return PipelineConfig.from_json(
            {
                "seed": 42,
                "out_dir": str(out),
                "data": {
                    "generate": {"kind": "hammerstein", "n": 500, "discard": 100},
                    "split": {"n_ident": 200},
                },
                "candidates": {"ny": 1, "nu": 3, "ell": 2, "d": 1, "constant": True},
                "prune": {"forbidden": ["const", "u"]},
                "select": {"method": "err", "n_max": 8, "stop": "aic"},
                "constraints": {"transcritical": {"u_c": 1.0, "alpha": 7.0}},
                "fit": {"estimator": "cls"},
                "static": {"u_min": 0.0, "u_max": 2.8, "points": 281},
                "validate": {"tau_max": 25},
                "plots": False,
            }
        )

    first = run_pipeline(config(tmp_path / "a"))
    second = run_pipeline(config(tmp_path / "b"))
    for name in ("model.json", "selection_trace.csv", "static_curve.csv", "ident.csv"):
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        assert a == b, f"{name} differs between identical runs"
    assert first.manifest["artifacts"] == second.manifest["artifacts"]
    report(9, "repeated pipeline runs are byte-identical (model, traces, data)")
