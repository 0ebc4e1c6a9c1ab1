"""Model dynamics: OSA prediction, free-run simulation, fixed points,
static curves and hysteresis branches.

Steady state collapses all lags: y(k-i) -> y_bar, u(k-j) -> u_bar, the
input difference u2 -> 0 and its sign u3 -> +1 (loading), -1 (unloading)
or 0 (constant input).  The coefficients of the collapsed relation are the
model's cluster coefficients.

Two-equation NAR vector fields use the convention that kind ``y`` is the
first state coordinate and kind ``u`` the second; both equations are
ordinary polynomial structures under that reading.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .dataset import TimeSeries
from .structure import (
    PolynomialModel,
    TermCluster,
    evaluate_regressor_matrix,
    regressor_steady_value,
    variable_series,
)

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12
NONHYPERBOLIC_TOL = 1e-8


class DynamicsError(ValueError):
    """Raised for requests a model's dynamics cannot satisfy."""


class DegenerateRelationError(DynamicsError):
    """Steady-state relation is identically satisfied: every value is an equilibrium."""


# ---------------------------------------------------------------------------
# Prediction and simulation
# ---------------------------------------------------------------------------


def predict_osa(model: PolynomialModel, ts: TimeSeries) -> np.ndarray:
    """One-step-ahead predictions from measured lags.

    Returns yhat_1(k) for k = max_lag..N-1 (compare against
    ``ts.y[model.structure.max_lag:]``).  Noise regressors contribute
    zero.
    """
    regs, theta = model.process_part()
    k0 = model.structure.max_lag
    if ts.n <= k0:
        raise DynamicsError(f"series length {ts.n} too short for max lag {k0}")
    rows = np.arange(k0, ts.n)
    series = variable_series(ts.u, ts.y)
    psi = evaluate_regressor_matrix(regs, series, rows)
    return psi @ theta


def osa_residuals(model: PolynomialModel, ts: TimeSeries) -> np.ndarray:
    """xi(k) = y(k) - yhat_1(k) over the valid rows."""
    return ts.y[model.structure.max_lag :] - predict_osa(model, ts)


@dataclass
class SimulationResult:
    y: np.ndarray
    diverged: bool = False
    k_diverged: int | None = None


def simulate_free_run(
    model: PolynomialModel,
    u: np.ndarray,
    init: np.ndarray | float | None = None,
    pin_u3: int | None = None,
) -> SimulationResult:
    """Free-run simulation: the recursion feeds on its own past outputs.

    ``init`` supplies the starting output lags (at least the maximum
    output lag of the structure; a scalar is broadcast).  ``pin_u3``
    forces the sign variable to +1 (loading) or -1 (unloading) instead of
    deriving it from the input, which realizes one hysteresis branch under
    constant input.  Divergence (|yhat| > 1e12) truncates the run and
    flags the result instead of raising.
    """
    u = np.asarray(u, dtype=float).ravel()
    regs, theta = model.process_part()
    k0 = model.structure.max_lag
    n_y = model.structure.max_output_lag
    if u.size <= k0:
        raise DynamicsError(f"input length {u.size} too short for max lag {k0}")

    y = np.zeros(u.size)
    if n_y > 0:
        if init is None:
            raise DynamicsError(f"init must supply {n_y} starting output value(s)")
        init = np.atleast_1d(np.asarray(init, dtype=float))
        if init.size == 1:
            init = np.full(max(k0, n_y), float(init[0]))
        if init.size < n_y:
            raise DynamicsError(f"init supplies {init.size} values, need {n_y}")
        head = min(init.size, k0)
        y[:k0] = init[0]
        y[k0 - head : k0] = init[-head:]

    series = variable_series(u, y)
    series["y"] = y  # simulated outputs are read back through the same array
    if pin_u3 is not None:
        series["u3"] = np.full(u.size, float(pin_u3))
    terms = [(float(t), reg.factors) for t, reg in zip(theta, regs)]
    for k in range(k0, u.size):
        acc = 0.0
        for coeff, factors in terms:
            value = coeff
            for kind, lag, exp in factors:
                base = series[kind][k - lag]
                value *= base if exp == 1 else base**exp
            acc += value
        if not math.isfinite(acc) or abs(acc) > DIVERGENCE_LIMIT:
            y[k:] = np.nan
            return SimulationResult(y, diverged=True, k_diverged=k)
        y[k] = acc
    return SimulationResult(y)


def settle_constant_input(
    model: PolynomialModel,
    u_bar: float,
    init: np.ndarray | float | None = 0.0,
    window: int = 1000,
    tol: float = 1e-8,
    max_steps: int = 10**6,
    pin_u3: int | None = None,
) -> tuple[float, bool]:
    """Run the model at constant input until a window of outputs is flat.

    Returns (settled value, settled flag); the flag is False when the
    range of the last window still exceeds ``tol`` at the step cap or the
    run diverges.  ``pin_u3`` settles onto one hysteresis branch.
    """
    k0 = max(model.structure.max_lag, 1)
    chunk = max(window * 4, 4000)
    state = np.atleast_1d(np.asarray(init, dtype=float))
    steps = 0
    while steps < max_steps:
        u = np.full(chunk + k0, u_bar)
        sim = simulate_free_run(model, u, init=state, pin_u3=pin_u3)
        if sim.diverged:
            return float("nan"), False
        tail = sim.y[-window:]
        if np.ptp(tail) < tol:
            return float(tail[-1]), True
        state = sim.y[-max(k0, model.structure.max_output_lag, 1) :]
        steps += chunk
    return float(sim.y[-1]), False


# ---------------------------------------------------------------------------
# Steady-state relations and fixed points
# ---------------------------------------------------------------------------


@dataclass
class SteadyStateRelation:
    """Collapsed relation y_bar = F_ss[y_bar, u_bar] keyed by (p, m) clusters."""

    terms: dict[TermCluster, float]
    branch: int = 0

    def evaluate(self, y_bar: float, u_bar: float) -> float:
        return sum(c * y_bar**cl.p * u_bar**cl.m for cl, c in self.terms.items())

    @property
    def output_degree(self) -> int:
        return max((cl.p for cl, c in self.terms.items() if c != 0.0), default=0)

    def poly_coeffs(self, u_bar: float) -> np.ndarray:
        """Ascending coefficients of F_ss(y_bar, u_bar) - y_bar as a polynomial in y_bar."""
        degree = max(self.output_degree, 1)
        coeffs = np.zeros(degree + 1)
        for cl, c in self.terms.items():
            coeffs[cl.p] += c * u_bar**cl.m
        coeffs[1] -= 1.0
        return coeffs


def steady_state_relation(model: PolynomialModel, branch: int = 0) -> SteadyStateRelation:
    """Cluster-coefficient polynomial of the model in steady state.

    Noise terms drop; u2 terms vanish; u3 terms are resolved by
    ``branch``.  The returned coefficients are the cluster coefficients of
    the source model (branch-signed for u3 clusters).
    """
    if branch not in (-1, 0, 1):
        raise DynamicsError("branch must be -1, 0 or +1")
    terms: dict[TermCluster, float] = {}
    for reg, theta in zip(model.structure.regressors, model.theta):
        if "e" in reg.kinds():
            continue
        weight = 1.0
        dead = False
        for kind, _, exp in reg.factors:
            if kind == "u2":
                dead = True
                break
            if kind == "u3":
                weight *= float(branch) ** exp
        if dead or weight == 0.0:
            continue
        cluster = TermCluster(reg.exponent_of("y"), reg.exponent_of("u"))
        terms[cluster] = terms.get(cluster, 0.0) + float(theta) * weight
    return SteadyStateRelation(terms, branch)


@dataclass
class FixedPoint:
    """An equilibrium with optional Jacobian eigenvalues and stability class."""

    y_bar: float | tuple[float, float]
    u_bar: float | None = None
    eigvals: np.ndarray | None = None
    stability: str | None = None
    residual: float = 0.0

    @property
    def is_stable(self) -> bool:
        return self.stability == "attractor"


def _classify_eigvals(eigvals: np.ndarray) -> str:
    mags = np.abs(eigvals)
    if mags.size == 0:
        return "attractor"
    if np.any(np.abs(mags - 1.0) < NONHYPERBOLIC_TOL):
        return "nonhyperbolic"
    if np.all(mags < 1.0):
        return "attractor"
    if np.all(mags > 1.0):
        return "repellor"
    return "saddle"


def solve_fixed_points(rel: SteadyStateRelation, u_bar: float) -> list[FixedPoint]:
    """All real equilibria of the relation at a given input level.

    F_ss(y_bar, u_bar) - y_bar = 0 is a univariate polynomial in y_bar;
    its real roots come from the companion-matrix eigenvalues, polished by
    a few Newton steps.  The root count is bounded by the output degree.
    """
    coeffs = rel.poly_coeffs(u_bar)
    scale = np.max(np.abs(coeffs))
    if scale == 0.0:
        raise DegenerateRelationError(
            f"relation is identically satisfied at u_bar={u_bar}: every y_bar is an equilibrium"
        )
    trimmed = np.trim_zeros(np.where(np.abs(coeffs) > 1e-14 * scale, coeffs, 0.0), "b")
    if trimmed.size <= 1:
        return []  # nonzero constant: no equilibria
    roots = np.roots(trimmed[::-1])
    real = [float(r.real) for r in roots if abs(r.imag) <= 1e-8 * (1.0 + abs(r))]

    deriv = np.polyder(np.poly1d(trimmed[::-1]))
    poly = np.poly1d(trimmed[::-1])
    polished = []
    for root in real:
        x = root
        for _ in range(3):
            d = deriv(x)
            if d == 0.0:
                break
            x -= poly(x) / d
        polished.append(x)

    unique: list[float] = []
    for x in sorted(polished):
        if not unique or abs(x - unique[-1]) > 1e-10 * max(1.0, abs(x)):
            unique.append(x)
    return [
        FixedPoint(x, u_bar, residual=abs(rel.evaluate(x, u_bar) - x)) for x in unique
    ]


def _steady_partial(
    regressors,
    theta: np.ndarray,
    wrt_kind: str,
    wrt_lag: int | None,
    y_bar: float,
    u_bar: float,
    branch: int,
) -> float:
    """d(sum theta_i psi_i)/d(variable) with all lags at steady state.

    ``wrt_lag=None`` differentiates with respect to the collapsed variable
    (all lags of that kind at once), as needed for 2-D vector fields.
    """
    total = 0.0
    values = {"y": y_bar, "u": u_bar, "u3": float(branch)}
    for reg, coeff in zip(regressors, theta):
        for kind, lag, exp in reg.factors:
            if kind != wrt_kind or (wrt_lag is not None and lag != wrt_lag):
                continue
            part = float(coeff) * exp * values[kind] ** (exp - 1)
            dead = False
            for okind, olag, oexp in reg.factors:
                if (okind, olag) == (kind, lag):
                    continue
                if okind == "u2" or okind == "e":
                    dead = True
                    break
                part *= values[okind] ** oexp
            if not dead:
                total += part
    return total


@dataclass
class NARPair:
    """Two coupled first-order NAR equations over state (y1, y2).

    Kind ``y`` reads the first coordinate and kind ``u`` the second in
    both equations.
    """

    eq1: PolynomialModel
    eq2: PolynomialModel

    def evaluate(self, y1: float, y2: float) -> tuple[float, float]:
        f1 = sum(
            t * regressor_steady_value(r, y1, y2)
            for r, t in zip(self.eq1.structure.regressors, self.eq1.theta)
        )
        f2 = sum(
            t * regressor_steady_value(r, y1, y2)
            for r, t in zip(self.eq2.structure.regressors, self.eq2.theta)
        )
        return f1, f2

    def jacobian(self, y1: float, y2: float) -> np.ndarray:
        rows = []
        for eq in (self.eq1, self.eq2):
            rows.append(
                [
                    _steady_partial(eq.structure.regressors, eq.theta, "y", None, y1, y2, 0),
                    _steady_partial(eq.structure.regressors, eq.theta, "u", None, y1, y2, 0),
                ]
            )
        return np.array(rows)


def classify_fixed_point(
    model: PolynomialModel | NARPair, fp: FixedPoint, branch: int = 0
) -> FixedPoint:
    """Attach Jacobian eigenvalues and a stability class to a fixed point.

    SISO models are put in companion form of dimension equal to the
    maximum output lag; the eigenvalue rule is attractor for all |l|<1,
    repellor for all |l|>1, saddle for a mix, nonhyperbolic within 1e-8 of
    the unit circle.
    """
    if isinstance(model, NARPair):
        y1, y2 = fp.y_bar  # type: ignore[misc]
        eigvals = np.linalg.eigvals(model.jacobian(float(y1), float(y2)))
        return replace(fp, eigvals=eigvals, stability=_classify_eigvals(eigvals))

    n = model.structure.max_output_lag
    u_bar = 0.0 if fp.u_bar is None else float(fp.u_bar)
    y_bar = float(fp.y_bar)  # type: ignore[arg-type]
    if n == 0:
        eigvals = np.zeros(0)
        return replace(fp, eigvals=eigvals, stability="attractor")
    companion = np.zeros((n, n))
    for i in range(1, n + 1):
        companion[0, i - 1] = _steady_partial(
            model.structure.regressors, model.theta, "y", i, y_bar, u_bar, branch
        )
    if n > 1:
        companion[1:, :-1] = np.eye(n - 1)
    eigvals = np.linalg.eigvals(companion)
    return replace(fp, eigvals=eigvals, stability=_classify_eigvals(eigvals))


def solve_fixed_points_2d(
    pair: NARPair,
    starts: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 100,
) -> list[FixedPoint]:
    """Fixed points of a 2-D NAR pair by damped Newton from a grid of starts.

    Roots closer than 1e-6 are merged.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    found: list[np.ndarray] = []
    for start in starts:
        x = start.copy()
        ok = False
        for _ in range(max_iter):
            f1, f2 = pair.evaluate(x[0], x[1])
            h = np.array([f1 - x[0], f2 - x[1]])
            if np.max(np.abs(h)) < tol:
                ok = True
                break
            jac = pair.jacobian(x[0], x[1]) - np.eye(2)
            try:
                step = np.linalg.solve(jac, -h)
            except np.linalg.LinAlgError:
                break
            alpha = 1.0
            base = np.linalg.norm(h)
            while alpha > 1e-6:
                trial = x + alpha * step
                t1, t2 = pair.evaluate(trial[0], trial[1])
                if np.linalg.norm([t1 - trial[0], t2 - trial[1]]) < base:
                    break
                alpha /= 2.0
            x = x + alpha * step
        if not ok:
            continue
        if not any(np.linalg.norm(x - prev) < 1e-6 for prev in found):
            found.append(x)
    return [FixedPoint((float(x[0]), float(x[1]))) for x in found]


# ---------------------------------------------------------------------------
# Static curves and hysteresis
# ---------------------------------------------------------------------------


def static_curve(
    model: PolynomialModel, u_grid: np.ndarray, branch: int = 0
) -> list[tuple[float, list[float]]]:
    """Stable equilibria per input level: the model's static function.

    Multistability is preserved (several stable values per input);
    degenerate or rootless grid points yield empty lists.  For hysteresis
    models this is the constant-input skeleton; use
    ``hysteresis_branches`` for the loading/unloading curves.
    """
    u_grid = np.atleast_1d(np.asarray(u_grid, dtype=float))
    if u_grid.size == 0:
        raise DynamicsError("u grid must be nonempty")
    rel = steady_state_relation(model, branch)
    curve = []
    for u_bar in u_grid:
        try:
            points = solve_fixed_points(rel, float(u_bar))
        except DegenerateRelationError:
            curve.append((float(u_bar), []))
            continue
        stable = [
            float(fp.y_bar)
            for fp in (classify_fixed_point(model, fp, branch) for fp in points)
            if fp.is_stable
        ]
        curve.append((float(u_bar), sorted(stable)))
    return curve


@dataclass
class RationalCurve:
    """num(u)/den(u) with ascending coefficient arrays."""

    num: np.ndarray
    den: np.ndarray

    def __call__(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.polyval(self.num[::-1], u) / np.polyval(self.den[::-1], u)


@dataclass
class HysteresisBranches:
    loading: RationalCurve
    unloading: RationalCurve


def hysteresis_branches(model: PolynomialModel) -> HysteresisBranches:
    """Loading/unloading steady-state curves of a hysteresis model.

    Substitutes u2 = 0 and u3 = +1 (loading) or -1 (unloading) and
    rearranges the collapsed relation into a rational curve in u_bar.  The
    branch formulas are derived from the regressor list itself, so they
    hold for any term ordering.
    """
    if not any("u3" in r.kinds() for r in model.structure.regressors):
        raise DynamicsError(
            "model has no u3 regressors and cannot exhibit rate-independent hysteresis"
        )
    curves = []
    for branch in (+1, -1):
        rel = steady_state_relation(model, branch)
        if rel.output_degree > 1:
            raise DynamicsError(
                "closed-form branches need output degree <= 1 in steady state; "
                f"got degree {rel.output_degree}"
            )
        m_max = max((cl.m for cl in rel.terms), default=0)
        num = np.zeros(m_max + 1)
        den = np.zeros(m_max + 1)
        den[0] = 1.0
        for cl, coeff in rel.terms.items():
            if cl.p == 0:
                num[cl.m] += coeff
            else:
                den[cl.m] -= coeff
        curves.append(RationalCurve(num, den))
    return HysteresisBranches(loading=curves[0], unloading=curves[1])


def loop_area(branches: HysteresisBranches, u_min: float, u_max: float, n: int = 2001) -> float:
    """Area between the loading and unloading curves over [u_min, u_max]."""
    if u_max <= u_min:
        raise DynamicsError("u_max must exceed u_min")
    u = np.linspace(u_min, u_max, n)
    gap = branches.loading(u) - branches.unloading(u)
    return float(np.trapezoid(gap, u))


def triangular_input(u_min: float, u_max: float, period: int, cycles: int = 2) -> np.ndarray:
    """Symmetric triangular sweep u_min -> u_max -> u_min, repeated."""
    if period < 4 or period % 2:
        raise DynamicsError("period must be an even integer >= 4")
    half = period // 2
    up = np.linspace(u_min, u_max, half, endpoint=False)
    down = np.linspace(u_max, u_min, half, endpoint=False)
    return np.tile(np.concatenate([up, down]), cycles)


def simulated_loop_area(
    model: PolynomialModel,
    u_min: float,
    u_max: float,
    period: int,
    cycles: int = 3,
    init: float = 0.0,
) -> float:
    """Loop area traced on the (u, y) plane under a slow triangular sweep.

    The loop integral of y du over the last full cycle measures the
    enclosed area; for rate-independent hysteresis it is invariant to the
    sweep period in the quasi-static limit.
    """
    u = triangular_input(u_min, u_max, period, cycles)
    sim = simulate_free_run(model, u, init=init)
    if sim.diverged:
        raise DynamicsError("model diverged during the hysteresis sweep")
    u_cycle = u[-period:]
    y_cycle = sim.y[-period:]
    u_closed = np.append(u_cycle, u_cycle[0])
    y_closed = np.append(y_cycle, y_cycle[0])
    return float(abs(np.trapezoid(y_closed, u_closed)))
