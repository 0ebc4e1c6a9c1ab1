"""Parameter estimators: LS, WLS, constrained LS, extended LS, multi-objective.

All solvers go through orthogonal factorizations; normal equations are
never formed for the solve itself.  Rank checks use a pivoted QR with a
relative tolerance of 1e-10 on the leading pivot.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .dataset import TimeSeries
from .structure import (
    ModelStructure,
    PolynomialModel,
    Regressor,
    evaluate_regressor_matrix,
    variable_series,
)

logger = logging.getLogger(__name__)

RANK_RTOL = 1e-10


class EstimationError(RuntimeError):
    """Raised when an estimation problem is ill-posed or a solve fails."""


class RankDeficiencyError(EstimationError):
    """Raised when a design matrix loses column rank; names the dependent columns."""

    def __init__(self, message: str, dependent: list[str]):
        super().__init__(message)
        self.dependent = dependent


@dataclass
class RegressionProblem:
    """One-step regression y = Psi theta + e over the valid row range.

    ``row_index`` is the first target index k where every regressor lag
    exists, so Psi has N - row_index rows.
    """

    psi: np.ndarray
    target: np.ndarray
    row_index: int
    regressors: tuple[Regressor, ...] = ()

    def __post_init__(self):
        self.psi = np.atleast_2d(np.asarray(self.psi, dtype=float))
        self.target = np.asarray(self.target, dtype=float).ravel()
        if self.psi.shape[0] != self.target.size:
            raise EstimationError(
                f"Psi has {self.psi.shape[0]} rows but target has {self.target.size}"
            )
        if not np.all(np.isfinite(self.psi)) or not np.all(np.isfinite(self.target)):
            raise EstimationError("regression problem contains non-finite entries")

    @property
    def n_params(self) -> int:
        return self.psi.shape[1]

    def column_names(self) -> list[str]:
        if self.regressors:
            return [r.render() for r in self.regressors]
        return [f"col{j}" for j in range(self.n_params)]


def build_regression(
    ts: TimeSeries,
    structure: ModelStructure,
    residual_estimates: np.ndarray | None = None,
) -> RegressionProblem:
    """Evaluate the regressor matrix of a structure on measured data.

    Noise regressors require ``residual_estimates`` (full-length vector
    aligned with the series) supplying the lagged-residual columns.
    """
    if structure.has_noise_terms() and residual_estimates is None:
        raise EstimationError("structure has noise regressors but no residual estimates given")
    if residual_estimates is not None:
        residual_estimates = np.asarray(residual_estimates, dtype=float).ravel()
        if residual_estimates.size != ts.n:
            raise EstimationError(
                f"residual estimates length {residual_estimates.size} != series length {ts.n}"
            )
    k0 = structure.max_lag
    if ts.n <= k0:
        raise EstimationError(f"series length {ts.n} too short for max lag {k0}")
    rows = np.arange(k0, ts.n)
    series = variable_series(ts.u, ts.y, residual_estimates)
    psi = evaluate_regressor_matrix(structure.regressors, series, rows)
    return RegressionProblem(psi, ts.y[rows], k0, structure.regressors)


def _column_rank(matrix: np.ndarray) -> tuple[int, np.ndarray]:
    """(rank, pivot order) from a column-pivoted QR."""
    if matrix.shape[1] == 0:
        return 0, np.array([], dtype=int)
    _, r, piv = scipy.linalg.qr(matrix, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return 0, piv
    return int(np.sum(diag > RANK_RTOL * diag[0])), piv


def _require_full_column_rank(prob: RegressionProblem, psi: np.ndarray | None = None) -> None:
    mat = prob.psi if psi is None else psi
    rank, piv = _column_rank(mat)
    if rank < mat.shape[1]:
        names = prob.column_names()
        dependent = [names[j] for j in sorted(piv[rank:])]
        raise RankDeficiencyError(
            f"design matrix is rank deficient (rank {rank} of {mat.shape[1]}); "
            f"dependent columns: {dependent}",
            dependent,
        )


def least_squares(prob: RegressionProblem) -> np.ndarray:
    """Unconstrained LS estimate minimizing the one-step squared error."""
    _require_full_column_rank(prob)
    theta, *_ = scipy.linalg.lstsq(prob.psi, prob.target)
    return theta


def forgetting_weights(lambda_f: float, n: int) -> np.ndarray:
    """Forgetting-factor row weights, oldest to newest: [.., lambda^2, lambda, 1]."""
    if not 0.0 < lambda_f <= 1.0:
        raise EstimationError("forgetting factor must be in (0, 1]")
    return lambda_f ** np.arange(n - 1, -1, -1, dtype=float)


def weighted_least_squares(prob: RegressionProblem, w: np.ndarray) -> np.ndarray:
    """WLS estimate minimizing the weighted one-step squared error."""
    w = np.asarray(w, dtype=float).ravel()
    if w.size != prob.target.size:
        raise EstimationError(f"{w.size} weights for {prob.target.size} rows")
    if np.any(w < 0):
        raise EstimationError("row weights must be nonnegative")
    if np.sum(w > 0) < prob.n_params:
        raise EstimationError("fewer strictly-positive weights than parameters")
    sqrt_w = np.sqrt(w)
    psi_w = prob.psi * sqrt_w[:, None]
    _require_full_column_rank(prob, psi_w)
    theta, *_ = scipy.linalg.lstsq(psi_w, prob.target * sqrt_w)
    return theta


@dataclass
class ConstraintSet:
    """Linear equality constraints c = S theta."""

    c: np.ndarray
    S: np.ndarray
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        self.S = np.atleast_2d(np.asarray(self.S, dtype=float))
        if self.c.size == 0:
            self.S = self.S.reshape(0, self.S.shape[1] if self.S.size else 0)
        if self.S.shape[0] != self.c.size:
            raise EstimationError(f"S has {self.S.shape[0]} rows but c has {self.c.size}")
        if self.S.size and not np.all(np.isfinite(self.S)):
            raise EstimationError("constraint matrix contains non-finite entries")

    @property
    def n_constraints(self) -> int:
        return self.c.size

    @classmethod
    def empty(cls, n_params: int = 0) -> "ConstraintSet":
        return cls(np.zeros(0), np.zeros((0, n_params)))

    def to_json(self) -> dict:
        rows = []
        for i in range(self.n_constraints):
            row = {"s": [float(v) for v in self.S[i]], "c": float(self.c[i])}
            if i < len(self.notes):
                row["note"] = self.notes[i]
            rows.append(row)
        return {"rows": rows}

    @classmethod
    def from_json(cls, data: dict) -> "ConstraintSet":
        rows = data["rows"]
        if not rows:
            return cls.empty()
        S = np.array([row["s"] for row in rows], dtype=float)
        c = np.array([row["c"] for row in rows], dtype=float)
        notes = tuple(row.get("note", "") for row in rows)
        return cls(c, S, notes)


def constrained_least_squares(prob: RegressionProblem, cons: ConstraintSet) -> np.ndarray:
    """Equality-constrained LS: minimize the one-step error subject to S theta = c.

    Solved by the null-space method: a particular solution of the
    constraints from a QR of S^T plus an unconstrained solve in the
    null-space coordinates.  Algebraically identical to the textbook
    closed form, but no normal-equation inverses appear.
    """
    if cons.n_constraints == 0:
        return least_squares(prob)
    n = prob.n_params
    p = cons.n_constraints
    if cons.S.shape[1] != n:
        raise EstimationError(f"constraints have {cons.S.shape[1]} columns for {n} parameters")
    if p > n:
        raise EstimationError(f"{p} constraints exceed {n} parameters")
    rank_s, _ = _column_rank(cons.S.T)
    if rank_s < p:
        raise EstimationError(
            f"constraint matrix is row-rank deficient (rank {rank_s} of {p}); "
            "remove redundant or inconsistent constraints"
        )
    _require_full_column_rank(prob)

    q, r = scipy.linalg.qr(cons.S.T)  # S^T = Q R, Q is n x n
    q1, q2 = q[:, :p], q[:, p:]
    z = scipy.linalg.solve_triangular(r[:p, :p].T, cons.c, lower=True)
    theta_particular = q1 @ z
    if n > p:
        reduced, *_ = scipy.linalg.lstsq(prob.psi @ q2, prob.target - prob.psi @ theta_particular)
        theta = theta_particular + q2 @ reduced
    else:
        theta = theta_particular

    violation = np.max(np.abs(cons.S @ theta - cons.c))
    scale = max(1.0, float(np.max(np.abs(cons.c))) if cons.c.size else 1.0)
    if violation > 1e-10 * scale:
        raise EstimationError(f"constraint residual {violation:.3e} exceeds tolerance")
    return theta


@dataclass
class ELSResult:
    model: PolynomialModel
    residuals: np.ndarray
    n_iter: int
    converged: bool


def extended_least_squares(
    ts: TimeSeries,
    structure: ModelStructure,
    max_iter: int = 20,
    tol: float = 1e-8,
) -> ELSResult:
    """Extended LS for NARMAX structures with lagged-residual regressors.

    Alternates between estimating theta with the current residual columns
    and refreshing the residuals from the one-step predictions, starting
    from a process-only LS fit.  The noise terms stay in the returned
    model for whitening purposes but are excluded from simulation.
    """
    if not structure.has_noise_terms():
        raise EstimationError("extended LS expects at least one noise regressor")
    if max_iter < 1:
        raise EstimationError("max_iter must be >= 1")

    process = structure.process_only()
    theta_proc = least_squares(build_regression(ts, process))
    residuals = np.zeros(ts.n)
    prob_proc = build_regression(ts, process)
    residuals[prob_proc.row_index :] = prob_proc.target - prob_proc.psi @ theta_proc

    noise_idx = [i for i, r in enumerate(structure.regressors) if "e" in r.kinds()]
    theta_prev = np.zeros(len(structure))
    proc_positions = [i for i in range(len(structure)) if i not in noise_idx]
    theta_prev[proc_positions] = theta_proc

    theta = theta_prev
    converged = False
    n_iter = 0
    noise_names = {structure.regressors[i].render() for i in noise_idx}
    for n_iter in range(1, max_iter + 1):
        prob = build_regression(ts, structure, residual_estimates=residuals)
        try:
            theta = least_squares(prob)
        except RankDeficiencyError as exc:
            if not set(exc.dependent) <= noise_names:
                raise
            # residuals vanished (noiseless data): keep the process fit, zero noise terms
            theta = np.zeros(len(structure))
            theta[proc_positions] = least_squares(build_regression(ts, process))
        if np.linalg.norm(theta) > 1e6:
            raise EstimationError(f"extended LS diverged at iteration {n_iter}")
        residuals = np.zeros(ts.n)
        residuals[prob.row_index :] = prob.target - prob.psi @ theta
        change = np.max(np.abs(theta - theta_prev)) / max(1.0, np.max(np.abs(theta_prev)))
        theta_prev = theta
        if change < tol:
            converged = True
            break
    return ELSResult(PolynomialModel(structure, theta), residuals, n_iter, converged)


# ---------------------------------------------------------------------------
# Multi-objective (affine-information) estimation
# ---------------------------------------------------------------------------


@dataclass
class AffinePair:
    """An affine information pair [v, G]: G theta is an estimate of v."""

    v: np.ndarray
    G: np.ndarray
    w: float = 1.0

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float).ravel()
        self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
        if self.G.shape[0] != self.v.size:
            raise EstimationError(f"G has {self.G.shape[0]} rows but v has {self.v.size}")
        if self.w < 0:
            raise EstimationError("pair weight must be nonnegative")
        if not (np.all(np.isfinite(self.v)) and np.all(np.isfinite(self.G))):
            raise EstimationError("affine pair contains non-finite entries")

    def cost(self, theta: np.ndarray) -> float:
        resid = self.v - self.G @ theta
        return float(resid @ resid)


def affine_pair_from_regression(prob: RegressionProblem, w: float = 1.0) -> AffinePair:
    return AffinePair(prob.target, prob.psi, w)


def multiobjective_estimate(pairs: list[AffinePair]) -> np.ndarray:
    """Minimizer of the weighted sum of affine-pair squared errors.

    Reduces to LS on a single pair; the accumulated matrix must be
    positive definite (at least one pair with positive weight and full
    column rank).
    """
    if not pairs:
        raise EstimationError("at least one affine pair is required")
    n = pairs[0].G.shape[1]
    if any(p.G.shape[1] != n for p in pairs):
        raise EstimationError("affine pairs disagree on parameter count")
    if all(p.w == 0 for p in pairs):
        raise EstimationError("all pair weights are zero")
    m = np.zeros((n, n))
    b = np.zeros(n)
    for pair in pairs:
        if pair.w == 0:
            continue
        m += pair.w * (pair.G.T @ pair.G)
        b += pair.w * (pair.G.T @ pair.v)
    try:
        cho = scipy.linalg.cho_factor(m)
        return scipy.linalg.cho_solve(cho, b)
    except scipy.linalg.LinAlgError as exc:
        raise EstimationError("accumulated information matrix is singular") from exc


@dataclass
class ParetoPoint:
    """One weighted-sum solution theta*(lambda) with its two cost values."""

    lam: float
    theta: np.ndarray
    j_dyn: float
    j_ss: float


def pareto_sweep(
    dyn: AffinePair, ss: AffinePair, lambdas: np.ndarray | int = 21
) -> list[ParetoPoint]:
    """Sweep theta*(lambda) over the weighted bi-objective problem.

    lambda = 1 weights only the dynamical pair and lambda = 0 only the
    steady-state pair, reproducing the mono-objective fits at the
    endpoints.  Lambdas whose accumulated matrix is singular are skipped
    with a warning.
    """
    if isinstance(lambdas, (int, np.integer)):
        lambdas = np.linspace(0.0, 1.0, int(lambdas))
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.size == 0 or np.any(lambdas < 0) or np.any(lambdas > 1):
        raise EstimationError("lambda grid must be nonempty within [0, 1]")
    points = []
    for lam in lambdas:
        try:
            theta = multiobjective_estimate(
                [
                    AffinePair(dyn.v, dyn.G, float(lam)),
                    AffinePair(ss.v, ss.G, float(1.0 - lam)),
                ]
            )
        except EstimationError as exc:
            logger.warning("pareto sweep: skipping lambda=%.4g (%s)", lam, exc)
            continue
        points.append(ParetoPoint(float(lam), theta, dyn.cost(theta), ss.cost(theta)))
    if not points:
        raise EstimationError("every lambda in the sweep was singular")
    return points


def simulation_error_estimate(
    ts: TimeSeries,
    structure: ModelStructure,
    theta_init: np.ndarray,
    budget: int = 2000,
) -> np.ndarray:
    """Local free-run-error minimizer (direct-search simplex).

    Minimizes the mean squared simulation error starting from
    ``theta_init`` (normally the LS estimate).  The problem is nonconvex;
    what is returned is the best point seen within the evaluation budget,
    never worse than the start.  Restarts once if the budget allows.
    """
    from . import dynamics  # local import: dynamics must not depend on estimators

    from scipy.optimize import minimize

    theta_init = np.asarray(theta_init, dtype=float).ravel()
    if theta_init.size != len(structure):
        raise EstimationError("theta_init length does not match the structure")
    k0 = structure.max_lag
    y_ref = ts.y[k0:]

    def msse(theta: np.ndarray) -> float:
        model = PolynomialModel(structure, theta)
        sim = dynamics.simulate_free_run(model, ts.u, init=ts.y[:k0])
        if sim.diverged:
            return 1e100
        err = y_ref - sim.y[k0:]
        return float(np.mean(err**2))

    initial = msse(theta_init)
    if initial >= 1e100:
        raise EstimationError("initial free run diverges; refine theta_init first")
    if budget <= 0:
        return theta_init

    best_theta, best_cost = theta_init.copy(), initial
    remaining = int(budget)
    start = theta_init
    for _ in range(2):  # one restart on stagnation
        if remaining <= 0:
            break
        result = minimize(
            msse,
            start,
            method="Nelder-Mead",
            options={"maxfev": remaining, "xatol": 1e-10, "fatol": 1e-12},
        )
        remaining -= int(result.nfev)
        if result.fun < best_cost:
            best_cost, best_theta = float(result.fun), np.asarray(result.x)
            start = best_theta
        else:
            break
    return best_theta
