"""Forward structure selection: ERR, SRR and SSMR criteria, AIC stopping.

Candidates are ranked by how much each reduces the normalized one-step
error (ERR), the free-run simulation error (SRR), or increases the
free-run correntropy (SSMR).  All three produce nested model families and
a trace that downstream code can refit, stop, or override.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .dataset import TimeSeries
from .estimators import build_regression, least_squares
from .dynamics import simulate_free_run
from .structure import (
    MetaParams,
    ModelStructure,
    PolynomialModel,
    Regressor,
    canonical_key,
    meta_from_regressors,
)

logger = logging.getLogger(__name__)

COLLINEARITY_RTOL = 1e-10


class SelectionError(RuntimeError):
    pass


@dataclass
class SelectionTrace:
    """Ordered picks with criterion values and per-step error metrics.

    ``sigma_y2`` is the mean square of the target over the regression
    rows, which is also the error of the empty model, so criterion values
    across a full noiseless selection sum to one.
    """

    method: str
    picks: list[tuple[Regressor, float]]
    ms1pe: list[float]
    sigma_y2: float
    meta: MetaParams
    msse: list[float] | None = None
    stop_index: int | None = None
    early_stop: str | None = None

    def __len__(self) -> int:
        return len(self.picks)

    def selected_structure(self, size: int | None = None) -> ModelStructure:
        size = len(self.picks) if size is None else size
        if not 1 <= size <= len(self.picks):
            raise SelectionError(f"size {size} outside 1..{len(self.picks)}")
        return ModelStructure(self.meta, tuple(r for r, _ in self.picks[:size]))

    def criterion_sum(self) -> float:
        return float(sum(v for _, v in self.picks))


def refit_model(ts: TimeSeries, trace: SelectionTrace, size: int | None = None) -> PolynomialModel:
    """LS refit of the selected structure (default: stop_index, else all picks)."""
    if size is None:
        size = trace.stop_index or len(trace.picks)
    structure = trace.selected_structure(size)
    theta = least_squares(build_regression(ts, structure))
    return PolynomialModel(structure, theta)


def _pool_problem(ts: TimeSeries, candidates: list[Regressor]):
    if not candidates:
        raise SelectionError("candidate pool is empty")
    if any("e" in r.kinds() for r in candidates):
        raise SelectionError("selection pool must contain process terms only")
    ordered = sorted(candidates, key=canonical_key)
    meta = meta_from_regressors(ordered)
    structure = ModelStructure(meta, tuple(ordered))
    prob = build_regression(ts, structure)
    return ordered, meta, prob


def frols_err(ts: TimeSeries, candidates: list[Regressor], n_max: int) -> SelectionTrace:
    """Forward-regression orthogonal least squares ranked by ERR.

    At every step the remaining candidate columns are orthogonalized
    against the chosen ones (modified Gram-Schmidt) and the error
    reduction ratio of each is its squared projection gain over the
    output energy; the largest wins, ties resolved by canonical regressor
    order.  Stops early if everything left is numerically collinear with
    the chosen set.
    """
    ordered, meta, prob = _pool_problem(ts, candidates)
    psi, y = prob.psi, prob.target
    n_eff = y.size
    energy_y = float(y @ y)
    sigma_y2 = energy_y / n_eff
    if energy_y == 0.0:
        raise SelectionError("target signal is identically zero")

    n_max = min(n_max, len(ordered))
    q = psi.copy()
    col_energy0 = np.sum(psi**2, axis=0)
    remaining = list(range(len(ordered)))
    picks: list[tuple[Regressor, float]] = []
    ms1pe: list[float] = []
    residual_energy = energy_y
    early_stop = None

    for _ in range(n_max):
        best_j, best_err = -1, -np.inf
        for j in remaining:
            wj = q[:, j]
            denom = float(wj @ wj)
            if denom <= COLLINEARITY_RTOL * max(col_energy0[j], 1e-300):
                continue
            err_j = (float(wj @ y)) ** 2 / (denom * energy_y)
            if err_j > best_err:
                best_j, best_err = j, err_j
        if best_j < 0:
            early_stop = "all remaining candidates are collinear with the chosen set"
            logger.info("frols_err: %s after %d picks", early_stop, len(picks))
            break
        w = q[:, best_j].copy()
        ww = float(w @ w)
        residual_energy -= (float(w @ y)) ** 2 / ww
        picks.append((ordered[best_j], best_err))
        ms1pe.append(max(residual_energy, 0.0) / n_eff)
        remaining.remove(best_j)
        for j in remaining:
            q[:, j] -= w * (float(w @ q[:, j]) / ww)

    return SelectionTrace(
        method="err",
        picks=picks,
        ms1pe=ms1pe,
        sigma_y2=sigma_y2,
        meta=meta,
        early_stop=early_stop,
    )


def _free_run_scores(
    ts: TimeSeries,
    meta: MetaParams,
    regressors: tuple[Regressor, ...],
    theta: np.ndarray,
    k0_pool: int,
    divergence_level: float,
) -> tuple[float, np.ndarray | None]:
    """(MSSE over the common row range, aligned free-run output); inf on divergence."""
    model = PolynomialModel(ModelStructure(meta, regressors), theta)
    k0 = model.structure.max_lag
    sim = simulate_free_run(model, ts.u, init=ts.y[: max(k0, 1)])
    if sim.diverged:
        return math.inf, None
    y_hat = sim.y[k0_pool:]
    if np.max(np.abs(y_hat)) > divergence_level:
        return math.inf, None
    err = ts.y[k0_pool:] - y_hat
    return float(np.mean(err**2)), y_hat


def _correntropy(a: np.ndarray, b: np.ndarray, sigma: float) -> float:
    return float(np.mean(np.exp(-((a - b) ** 2) / (2.0 * sigma**2))))


def _simulation_select(
    ts: TimeSeries,
    candidates: list[Regressor],
    n_max: int,
    method: str,
    kernel_sigma: float | None = None,
) -> SelectionTrace:
    ordered, meta, prob = _pool_problem(ts, candidates)
    psi, y = prob.psi, prob.target
    n_eff = y.size
    sigma_y2 = float(y @ y) / n_eff
    if sigma_y2 == 0.0:
        raise SelectionError("target signal is identically zero")
    k0_pool = prob.row_index
    divergence_level = 1e3 * float(np.max(np.abs(ts.y)))

    if method == "ssmr":
        if kernel_sigma is None:
            kernel_sigma = 1.06 * float(np.std(y)) * n_eff ** (-0.2)  # Silverman width
        if kernel_sigma <= 0:
            raise SelectionError("kernel width must be positive")

    n_max = min(n_max, len(ordered))
    remaining = list(range(len(ordered)))
    chosen: list[int] = []
    picks: list[tuple[Regressor, float]] = []
    ms1pe: list[float] = []
    msse_trace: list[float] = []
    msse_prev = sigma_y2  # empty model simulates identically zero
    v_prev = (
        _correntropy(y, np.zeros_like(y), kernel_sigma) if method == "ssmr" else 0.0
    )
    early_stop = None

    for _ in range(n_max):
        best = None  # (criterion, j, theta, msse, ms1pe, value_new)
        for j in remaining:
            cols = chosen + [j]
            sub = psi[:, cols]
            theta, _, rank, _ = np.linalg.lstsq(sub, y, rcond=None)
            if rank < len(cols):
                continue
            regs = tuple(ordered[i] for i in cols)
            msse_j, y_hat = _free_run_scores(ts, meta, regs, theta, k0_pool, divergence_level)
            if not math.isfinite(msse_j):
                continue  # diverging candidate scores -inf
            if method == "srr":
                crit = (msse_prev - msse_j) / sigma_y2
                value_new = msse_j
            else:
                v_new = _correntropy(y, y_hat, kernel_sigma)
                crit = (v_new - v_prev) / sigma_y2
                value_new = (msse_j, v_new)
            resid = y - sub @ theta
            candidate = (crit, j, theta, msse_j, float(resid @ resid) / n_eff, value_new)
            if best is None or crit > best[0]:
                best = candidate
        if best is None:
            early_stop = "every remaining candidate diverges in free run or is collinear"
            logger.info("%s: %s after %d picks", method, early_stop, len(picks))
            break
        crit, j, theta, msse_j, ms1pe_j, value_new = best
        picks.append((ordered[j], crit))
        ms1pe.append(ms1pe_j)
        msse_trace.append(msse_j)
        chosen.append(j)
        remaining.remove(j)
        if method == "srr":
            msse_prev = value_new
        else:
            msse_prev, v_prev = value_new

    return SelectionTrace(
        method=method,
        picks=picks,
        ms1pe=ms1pe,
        sigma_y2=sigma_y2,
        meta=meta,
        msse=msse_trace,
        early_stop=early_stop,
    )


def srr_select(ts: TimeSeries, candidates: list[Regressor], n_max: int) -> SelectionTrace:
    """Forward selection ranked by simulation error reduction.

    Each surviving candidate is refit by LS with the candidate added and
    scored by the drop in free-run mean squared simulation error;
    divergent candidates are never selected.  Costs one LS fit and one
    simulation per candidate per step.
    """
    return _simulation_select(ts, candidates, n_max, "srr")


def ssmr_select(
    ts: TimeSeries,
    candidates: list[Regressor],
    n_max: int,
    kernel_sigma: float | None = None,
) -> SelectionTrace:
    """Forward selection ranked by free-run correntropy gain.

    The similarity V(y, yhat) = mean exp(-(y-yhat)^2 / (2 sigma^2)) uses an
    unnormalized Gaussian kernel so V(y, y) = 1; the width defaults to
    Silverman's rule on the target.
    """
    return _simulation_select(ts, candidates, n_max, "ssmr", kernel_sigma)


def aic_stop(trace: SelectionTrace, n_data: int) -> int:
    """Akaike stopping index: argmin over i of n ln(err_i) + 2 i.

    Uses the simulation error for SRR/SSMR traces and the one-step error
    otherwise, with the error floored at 1e-30 before the logarithm.  The
    index is recorded on the trace but callers may override it.
    """
    errors = trace.msse if trace.msse else trace.ms1pe
    if not errors:
        raise SelectionError("trace has no steps")
    finite = [(i + 1, e) for i, e in enumerate(errors) if math.isfinite(e)]
    if not finite:
        raise SelectionError("trace has no finite error values")
    aic = [n_data * math.log(max(e, 1e-30)) + 2 * i for i, e in finite]
    stop = finite[int(np.argmin(aic))][0]
    trace.stop_index = stop
    return stop
