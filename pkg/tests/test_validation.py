import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import ts_from
from oracles import generate_narx, simulate_reference
from narxkit.estimators import ParetoPoint, build_regression, least_squares
from narxkit.structure import (
    ModelStructure,
    PolynomialModel,
    Regressor,
    meta_from_regressors,
)
from narxkit.validation import (
    ValidationError,
    j_corr,
    metrics,
    normalized_correlation,
    pick_from_pareto,
    residual_tests,
    validate_model,
)

R = Regressor.parse


def model_of(term_theta):
    regs = tuple(R(t) for t, _ in term_theta)
    theta = np.array([v for _, v in term_theta])
    return PolynomialModel(ModelStructure(meta_from_regressors(regs), regs), theta)


class TestResidualTests:
    def test_independent_white_signals_pass_per_test(self):
        # per-test pass rate must stay high when there is nothing to detect
        counts = {}
        for seed in range(100):
            rng = np.random.default_rng(seed)
            xi = rng.standard_normal(400)
            u = rng.standard_normal(400)
            for res in residual_tests(xi, u, tau_max=25):
                counts[res.name] = counts.get(res.name, 0) + res.passed
        assert set(counts) == {"xi_xi", "u_xi", "u2_xi", "u2_xi2", "xi_xiu"}
        for name, passes in counts.items():
            assert passes >= 90, f"{name}: {passes}/100"

    def test_ma_colored_residuals_fail_whiteness(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            raw = rng.standard_normal(400)
            xi = raw.copy()
            xi[1:] += raw[:-1]  # one-pole moving average
            u = rng.standard_normal(400)
            results = {r.name: r for r in residual_tests(xi, u, tau_max=25)}
            whiteness = results["xi_xi"]
            assert not whiteness.passed
            assert abs(whiteness.values[0]) > 3 * whiteness.band  # rho(1) far outside

    def test_zero_residuals_vacuous_pass(self):
        results = residual_tests(np.zeros(200), np.random.default_rng(0).standard_normal(200))
        assert all(r.passed and r.vacuous for r in results)

    def test_input_correlated_residuals_detected(self):
        rng = np.random.default_rng(1)
        u = rng.standard_normal(400)
        xi = 0.3 * rng.standard_normal(400)
        xi[1:] += 0.5 * u[:-1]  # leftover input correlation
        results = {r.name: r for r in residual_tests(xi, u, tau_max=25)}
        assert not results["u_xi"].passed

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            residual_tests(np.zeros(50), np.zeros(60))

    def test_correlation_normalization(self, rng):
        x = rng.standard_normal(500)
        rho = normalized_correlation(x, x, np.array([0]))
        assert rho[0] == pytest.approx(1.0, abs=1e-12)


class TestMetrics:
    def test_perfect_prediction(self):
        m = metrics(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
        assert (m.rmse, m.mape, m.mse) == (0.0, 0.0, 0.0)

    def test_hand_computed_values(self):
        m = metrics(np.array([1.0, 1.0]), np.array([2.0, 0.0]))
        assert m.rmse == pytest.approx(1.0)
        assert m.mape == pytest.approx(100.0)
        assert m.mse == pytest.approx(1.0)

    def test_zero_reference_flags_mape(self):
        m = metrics(np.array([0.0, 1.0]), np.array([0.5, 1.0]))
        assert not m.mape_defined
        assert math.isnan(m.mape)
        assert m.rmse > 0  # other metrics still returned

    # keep magnitudes where squaring cannot underflow to zero
    _values = st.floats(-10, 10).filter(lambda v: v == 0.0 or abs(v) > 1e-100)

    @given(st.lists(_values, min_size=1, max_size=20), st.lists(_values, min_size=1, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative_and_zero_iff_equal(self, a, b):
        n = min(len(a), len(b))
        y = np.asarray(a[:n])
        y_hat = np.asarray(b[:n])
        m = metrics(y, y_hat)
        assert m.rmse >= 0.0 and m.mse >= 0.0
        assert (m.rmse == 0.0) == bool(np.array_equal(y, y_hat))


class TestJCorr:
    def test_perfect_model_scores_zero(self):
        terms = [(0.6, [("y", 1, 1)]), (0.4, [("u", 1, 1)])]
        u, y = generate_narx(terms, 200, seed=0)
        model = model_of([("y(k-1)", 0.6), ("u(k-1)", 0.4)])
        assert j_corr(model, ts_from(u, y)) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_error_scores_zero(self):
        # free run settles to exactly 2; the measured output adds a zero-mean
        # sinusoid over the compared window, orthogonal to the constant output
        n = 401
        u = np.full(n, 2.0)
        y = np.full(n, 2.0)
        k = np.arange(1, n)
        y[1:] += 0.5 * np.sin(2 * np.pi * 4 * (k - 1) / (n - 1))
        model = model_of([("y(k-1)", 0.5), ("u(k-1)", 0.5)])
        assert j_corr(model, ts_from(u, y)) < 1e-12

    def test_matches_direct_summation_oracle(self):
        terms = [(0.5, [("y", 1, 1)]), (0.7, [("u", 1, 1)])]
        u, y = generate_narx(terms, 300, seed=2, noise_std=0.1)
        model = model_of([("y(k-1)", 0.45), ("u(k-1)", 0.75)])
        y_sim = simulate_reference([(0.45, [("y", 1, 1)]), (0.75, [("u", 1, 1)])], u, y[:1])
        eta = y[1:] - y_sim[1:]
        direct = abs(sum(eta * y_sim[1:]) / len(eta))
        assert j_corr(model, ts_from(u, y)) == pytest.approx(direct, rel=1e-12)

    def test_divergent_run_scores_infinite(self):
        model = model_of([("y(k-1)", 1.2)])
        u = np.zeros(200)
        y = np.ones(200)
        assert math.isinf(j_corr(model, ts_from(u, y)))

    def test_true_model_never_scores_above_perturbed(self):
        terms = [(0.5, [("y", 1, 1)]), (0.8, [("u", 1, 1)])]
        for seed in range(50):
            u, y = generate_narx(terms, 500, seed=seed, noise_std=0.05)
            ts = ts_from(u, y)
            true_model = model_of([("y(k-1)", 0.5), ("u(k-1)", 0.8)])
            perturbed = model_of([("y(k-1)", 0.55), ("u(k-1)", 0.8)])  # 10% off
            assert j_corr(true_model, ts) <= j_corr(perturbed, ts)


class TestPickFromPareto:
    @staticmethod
    def _points(thetas, lams=None):
        lams = lams or np.linspace(0, 1, len(thetas))
        return [
            ParetoPoint(float(l), np.asarray(t, dtype=float), 0.0, 0.0)
            for l, t in zip(lams, thetas)
        ]

    def test_planted_truth_selected(self):
        terms = [(0.5, [("y", 1, 1)]), (0.8, [("u", 1, 1)])]
        structure = ModelStructure(
            meta_from_regressors((R("y(k-1)"), R("u(k-1)"))), (R("y(k-1)"), R("u(k-1)"))
        )
        hits = 0
        for seed in range(10):
            u, y = generate_narx(terms, 400, seed=seed, noise_std=0.05)
            ts = ts_from(u, y)
            points = self._points(
                [[0.42, 0.8], [0.46, 0.85], [0.5, 0.8], [0.56, 0.74], [0.6, 0.9]]
            )
            picked = pick_from_pareto(points, structure, ts)
            hits += picked.theta.tolist() == [0.5, 0.8]
        assert hits >= 9

    def test_single_point_sweep(self):
        structure = ModelStructure(meta_from_regressors((R("y(k-1)"),)), (R("y(k-1)"),))
        u, y = generate_narx([(0.5, [("y", 1, 1)]), (0.1, [("u", 1, 1)])], 100, seed=1)
        points = self._points([[0.5]], lams=[0.3])
        assert pick_from_pareto(points, structure, ts_from(u, y)) is points[0]

    def test_reordering_invariance(self):
        terms = [(0.5, [("y", 1, 1)]), (0.8, [("u", 1, 1)])]
        structure = ModelStructure(
            meta_from_regressors((R("y(k-1)"), R("u(k-1)"))), (R("y(k-1)"), R("u(k-1)"))
        )
        u, y = generate_narx(terms, 300, seed=3, noise_std=0.05)
        ts = ts_from(u, y)
        points = self._points([[0.42, 0.8], [0.5, 0.8], [0.6, 0.9]])
        picked = pick_from_pareto(points, structure, ts)
        reordered = pick_from_pareto(points[::-1], structure, ts)
        assert np.array_equal(picked.theta, reordered.theta)

    def test_all_divergent_rejected(self):
        structure = ModelStructure(meta_from_regressors((R("y(k-1)"),)), (R("y(k-1)"),))
        u = np.zeros(100)
        y = np.ones(100)
        points = self._points([[1.5], [2.0]])
        with pytest.raises(ValidationError, match="diverge"):
            pick_from_pareto(points, structure, ts_from(u, y))


class TestValidateModel:
    def test_report_metrics_recomputable(self):
        terms = [(0.5, [("y", 1, 1)]), (0.8, [("u", 1, 1)])]
        u, y = generate_narx(terms, 300, seed=4, noise_std=0.05)
        ts = ts_from(u, y)
        structure = ModelStructure(
            meta_from_regressors((R("y(k-1)"), R("u(k-1)"))), (R("y(k-1)"), R("u(k-1)"))
        )
        theta = least_squares(build_regression(ts, structure))
        model = PolynomialModel(structure, theta)
        report = validate_model(model, ts, tau_max=20)
        assert report.rmse == pytest.approx(
            math.sqrt(np.mean((report.y - report.y_hat_sim) ** 2)), rel=1e-12
        )
        assert report.ms1pe == pytest.approx(
            float(np.mean((report.y - report.y_hat_osa) ** 2)), rel=1e-12
        )
        assert report.j_corr == pytest.approx(
            abs(np.mean((report.y - report.y_hat_sim) * report.y_hat_sim)), rel=1e-12
        )
        assert not report.diverged

    def test_report_json_schema(self, tmp_path):
        terms = [(0.5, [("y", 1, 1)]), (0.8, [("u", 1, 1)])]
        u, y = generate_narx(terms, 200, seed=5, noise_std=0.05)
        ts = ts_from(u, y)
        model = model_of([("y(k-1)", 0.5), ("u(k-1)", 0.8)])
        report = validate_model(model, ts, tau_max=15)
        payload = report.to_json()
        assert set(payload["series"]) == {"y", "y_hat_osa", "y_hat_sim"}
        assert len(payload["residual_tests"]) == 5
        report.save(tmp_path / "report.json")
        assert (tmp_path / "report.json").exists()

    def test_divergent_model_flagged(self):
        model = model_of([("y(k-1)", 1.3)])
        u = np.zeros(200)
        y = np.ones(200)
        report = validate_model(model, ts_from(u, y), tau_max=10)
        assert report.diverged
        assert math.isinf(report.rmse)
