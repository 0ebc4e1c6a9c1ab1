"""Auxiliary information encoded as equality constraints and candidate edits.

Every builder turns one kind of prior knowledge into a ConstraintSet
(c = S theta) ready for the constrained estimator: steady-state points the
static function must pass through, target values for cluster
coefficients, transcritical-bifurcation geometry (breakpoint and slope),
and imposed fixed points of 2-D vector fields.  Cluster pruning edits the
candidate pool itself.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .estimators import (
    AffinePair,
    ConstraintSet,
    RegressionProblem,
    _column_rank,
    build_regression,
    constrained_least_squares,
    least_squares,
)
from .dataset import TimeSeries
from .dynamics import NARPair
from .structure import (
    ModelStructure,
    PolynomialModel,
    Regressor,
    TermCluster,
    cluster_of,
    regressor_steady_value,
)

logger = logging.getLogger(__name__)


class GreyboxError(ValueError):
    pass


@dataclass(frozen=True)
class SteadyStatePoint:
    """A (u_bar, y_bar) pair; ``branch`` tags hysteresis points as loading (+1)
    or unloading (-1)."""

    u_bar: float
    y_bar: float
    branch: int = 1

    def __post_init__(self):
        if not (np.isfinite(self.u_bar) and np.isfinite(self.y_bar)):
            raise GreyboxError("steady-state point must be finite")
        if self.branch not in (-1, 1):
            raise GreyboxError("branch must be +1 (loading) or -1 (unloading)")


def steady_state_row(structure: ModelStructure, point: SteadyStatePoint) -> np.ndarray:
    """Regressors of a structure evaluated at one steady-state point."""
    return np.array(
        [
            regressor_steady_value(r, point.y_bar, point.u_bar, point.branch)
            for r in structure.regressors
        ]
    )


def constraints_from_static_points(
    structure: ModelStructure, points: list[SteadyStatePoint]
) -> ConstraintSet:
    """One constraint row per steady-state point the static function must hit.

    Row i holds every regressor collapsed at (u_bar_i, y_bar_i) and the
    target is y_bar_i.  Duplicate or otherwise dependent points are
    rejected with the offending row indices.
    """
    if not points:
        raise GreyboxError("no steady-state points given")
    if structure.has_noise_terms():
        raise GreyboxError("static-point constraints need a noise-free structure")
    if len(points) > structure.n_params:
        raise GreyboxError(
            f"{len(points)} constraints exceed {structure.n_params} parameters"
        )
    S = np.array([steady_state_row(structure, p) for p in points])
    c = np.array([p.y_bar for p in points])
    rank, piv = _column_rank(S.T)
    if rank < len(points):
        bad = sorted(int(i) for i in piv[rank:])
        raise GreyboxError(
            f"steady-state points give a rank-deficient constraint matrix; "
            f"dependent rows (0-based): {bad}"
        )
    notes = tuple(
        f"static point ({p.u_bar:g}, {p.y_bar:g})"
        + (" unloading" if p.branch == -1 else "")
        for p in points
    )
    return ConstraintSet(c, S, notes)


def constraints_from_cluster_targets(
    structure: ModelStructure, targets: dict[TermCluster, float]
) -> ConstraintSet:
    """Pin cluster coefficients: each row is the 0/1 membership indicator of
    one cluster and the target is the desired coefficient sum."""
    if not targets:
        raise GreyboxError("no cluster targets given")
    clusters = [cluster_of(r) for r in structure.regressors]
    rows = []
    c = []
    notes = []
    for cluster, value in targets.items():
        row = np.array([1.0 if cl == cluster else 0.0 for cl in clusters])
        if not row.any():
            raise GreyboxError(f"cluster {cluster.label} has no regressor in the structure")
        rows.append(row)
        c.append(float(value))
        notes.append(f"cluster {cluster.label} = {value:g}")
    return ConstraintSet(np.array(c), np.array(rows), tuple(notes))


def constraints_transcritical(
    structure: ModelStructure, u_c: float, alpha: float
) -> ConstraintSet:
    """Breakpoint/slope constraints for a dead-zone (transcritical) static curve.

    For a model whose only nonzero cluster coefficients are S_y, S_uy and
    S_y2, the equilibria are the line y=0 and a second line crossing it at
    u_c with slope alpha.  The three ratio conditions are linearized:

        S_u2 = 0,   S_y + u_c S_uy = 1,   S_uy + alpha S_y2 = 0,

    valid when S_uy and S_y2 are nonzero (check the fitted model).  The
    structure must carry all four clusters and be free of constant and
    pure-u terms.
    """
    if alpha == 0.0:
        raise GreyboxError("slope alpha must be nonzero")
    clusters = [cluster_of(r) for r in structure.regressors]
    forbidden = {TermCluster(0, 0): "constant", TermCluster(0, 1): "u"}
    for cl, name in forbidden.items():
        if cl in clusters:
            raise GreyboxError(
                f"structure contains {name} terms; the two-line equilibrium family "
                "requires only y, u*y, y^2 and u^2 clusters"
            )
    required = {
        "u^2": TermCluster(0, 2),
        "y": TermCluster(1, 0),
        "u*y": TermCluster(1, 1),
        "y^2": TermCluster(2, 0),
    }
    for name, cl in required.items():
        if cl not in clusters:
            raise GreyboxError(f"required cluster {name} missing from the structure")

    def indicator(cluster: TermCluster) -> np.ndarray:
        return np.array([1.0 if cl == cluster else 0.0 for cl in clusters])

    S = np.vstack(
        [
            indicator(required["u^2"]),
            indicator(required["y"]) + u_c * indicator(required["u*y"]),
            indicator(required["u*y"]) + alpha * indicator(required["y^2"]),
        ]
    )
    c = np.array([0.0, 1.0, 0.0])
    notes = (
        "S_u2 = 0",
        f"S_y + {u_c:g} S_uy = 1 (breakpoint)",
        f"S_uy + {alpha:g} S_y2 = 0 (slope)",
    )
    return ConstraintSet(c, S, notes)


def constraints_fixed_point(
    structures: tuple[ModelStructure, ModelStructure],
    target: tuple[float, float],
) -> ConstraintSet:
    """Impose a fixed point on a 2-D NAR pair (stacked parameter vector).

    One row per equation: the equation's regressors evaluated at the
    target, block-placed over [theta1; theta2], with the target coordinate
    as the constant.  An all-zero row with zero target is vacuous and
    dropped (the structure already pins that coordinate); with a nonzero
    target it is inconsistent and rejected.
    """
    y1, y2 = float(target[0]), float(target[1])
    if not (np.isfinite(y1) and np.isfinite(y2)):
        raise GreyboxError("target fixed point must be finite")
    s1, s2 = structures
    n1, n2 = s1.n_params, s2.n_params
    rows = []
    c = []
    notes = []
    for index, (structure, coord) in enumerate(((s1, y1), (s2, y2))):
        values = np.array(
            [regressor_steady_value(r, y1, y2, 0) for r in structure.regressors]
        )
        row = np.zeros(n1 + n2)
        if index == 0:
            row[:n1] = values
        else:
            row[n1:] = values
        if not values.any():
            if coord != 0.0:
                raise GreyboxError(
                    f"equation {index + 1}: regressors vanish at the target but the "
                    f"coordinate is {coord:g}; the constraint is inconsistent"
                )
            continue  # vacuous: origin is a fixed point by structure
        rows.append(row)
        c.append(coord)
        notes.append(f"fixed point, equation {index + 1}")
    if not rows:
        return ConstraintSet(np.zeros(0), np.zeros((0, n1 + n2)), ())
    return ConstraintSet(np.array(c), np.array(rows), tuple(notes))


def fit_nar_pair(
    data: np.ndarray,
    structures: tuple[ModelStructure, ModelStructure],
    cons: ConstraintSet | None = None,
) -> NARPair:
    """Estimate a 2-D NAR pair from state trajectories, optionally constrained.

    ``data`` is (N, 2): columns are the two coordinates; each equation
    regresses its own next value on both lagged coordinates (kind y reads
    coordinate 1, kind u coordinate 2).  Constraints couple the stacked
    parameter vector.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[1] != 2:
        raise GreyboxError("data must be an (N, 2) trajectory array")
    # both equations read coordinate 1 through kind y and coordinate 2 through kind u
    series = TimeSeries(u=data[:, 1], y=data[:, 0])
    prob1 = build_regression(series, structures[0])
    prob2 = build_regression(series, structures[1])
    target2 = data[prob2.row_index :, 1]  # equation 2 predicts coordinate 2

    n1, n2 = structures[0].n_params, structures[1].n_params
    psi = np.zeros((prob1.psi.shape[0] + prob2.psi.shape[0], n1 + n2))
    psi[: prob1.psi.shape[0], :n1] = prob1.psi
    psi[prob1.psi.shape[0] :, n1:] = prob2.psi
    target = np.concatenate([prob1.target, target2])
    stacked = RegressionProblem(
        psi,
        target,
        min(prob1.row_index, prob2.row_index),
        structures[0].regressors + structures[1].regressors,
    )
    theta = (
        least_squares(stacked)
        if cons is None or cons.n_constraints == 0
        else constrained_least_squares(stacked, cons)
    )
    return NARPair(
        PolynomialModel(structures[0], theta[:n1]),
        PolynomialModel(structures[1], theta[n1:]),
    )


# ---------------------------------------------------------------------------
# Static-curve template fitting (Example-1 style)
# ---------------------------------------------------------------------------


@dataclass
class RationalClusterTemplate:
    """Single-valued static template y = N(u)/(1 - D(u)) in cluster coefficients.

    Built from a structure whose steady-state output degree is at most
    one: numerator clusters are the (0, m) ones and denominator clusters
    the (1, m) ones.
    """

    num_clusters: tuple[TermCluster, ...]
    den_clusters: tuple[TermCluster, ...]

    @classmethod
    def from_structure(cls, structure: ModelStructure) -> "RationalClusterTemplate":
        clusters = sorted(
            {cluster_of(r) for r in structure.regressors if "e" not in r.kinds()},
            key=lambda cl: (cl.p, cl.m),
        )
        if any(cl.hyst for cl in clusters):
            raise GreyboxError("template fitting does not cover hysteresis clusters")
        if any(cl.p > 1 for cl in clusters):
            raise GreyboxError(
                "template requires output degree <= 1 in steady state "
                "(prune y^p clusters with p > 1 first)"
            )
        num = tuple(cl for cl in clusters if cl.p == 0)
        den = tuple(cl for cl in clusters if cl.p == 1)
        if not num or not den:
            raise GreyboxError("template needs both input-only and output clusters")
        return cls(num, den)

    @property
    def clusters(self) -> tuple[TermCluster, ...]:
        return self.num_clusters + self.den_clusters

    def split(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k = len(self.num_clusters)
        return params[:k], params[k:]

    def denominator(self, params: np.ndarray, u: np.ndarray) -> np.ndarray:
        _, den_p = self.split(params)
        den = np.ones_like(u)
        for cl, value in zip(self.den_clusters, den_p):
            den = den - value * u**cl.m
        return den

    def evaluate(self, params: np.ndarray, u: np.ndarray) -> np.ndarray:
        num_p, _ = self.split(params)
        num = np.zeros_like(u)
        for cl, value in zip(self.num_clusters, num_p):
            num = num + value * u**cl.m
        return num / self.denominator(params, u)

    def jacobian(self, params: np.ndarray, u: np.ndarray) -> np.ndarray:
        den = self.denominator(params, u)
        num = self.evaluate(params, u) * den
        cols = []
        for cl in self.num_clusters:
            cols.append(u**cl.m / den)
        for cl in self.den_clusters:
            cols.append(num * u**cl.m / den**2)
        return np.column_stack(cols)


def fit_static_targets(
    curve_form: RationalClusterTemplate | ModelStructure,
    ss_data: list[SteadyStatePoint],
    anchor: tuple[TermCluster, float] | None = None,
    n_starts: int = 16,
    max_iter: int = 200,
    tol: float = 1e-12,
    seed: int = 0,
) -> dict[TermCluster, float]:
    """Fit a rational static template to steady-state data.

    Nonconvex least squares by damped Gauss-Newton with multistart around
    a linear-rearrangement initialization (y(1-D) = N is linear in the
    unknowns).  Returns cluster-coefficient targets for
    ``constraints_from_cluster_targets``.  A denominator zero inside the
    data range is rejected as ill-posed.

    When the denominator contains the pure output cluster, the curve only
    determines the coefficients up to a common scaling of the numerator
    and (1 - denominator); ``anchor`` pins one cluster (typically the
    output-cluster coefficient of an unconstrained dynamical fit) to
    resolve that scale.  Any representative imposes the same static curve.
    """
    template = (
        curve_form
        if isinstance(curve_form, RationalClusterTemplate)
        else RationalClusterTemplate.from_structure(curve_form)
    )
    n_params = len(template.clusters)
    if len(ss_data) < n_params:
        raise GreyboxError(f"{len(ss_data)} points cannot determine {n_params} coefficients")
    u = np.array([p.u_bar for p in ss_data])
    y = np.array([p.y_bar for p in ss_data])

    if anchor is not None:
        if anchor[0] not in template.clusters:
            raise GreyboxError(f"anchor cluster {anchor[0].label} not in the template")
        anchor_idx = template.clusters.index(anchor[0])
    else:
        anchor_idx = None

    # linear initialization: y = N(u) + y * D(u)
    design = np.column_stack(
        [u**cl.m for cl in template.num_clusters]
        + [y * u**cl.m for cl in template.den_clusters]
    )
    if anchor_idx is None:
        base, *_ = np.linalg.lstsq(design, y, rcond=None)
    else:
        keep = [j for j in range(n_params) if j != anchor_idx]
        rhs = y - design[:, anchor_idx] * anchor[1]
        partial, *_ = np.linalg.lstsq(design[:, keep], rhs, rcond=None)
        base = np.empty(n_params)
        base[anchor_idx] = anchor[1]
        base[keep] = partial

    rng = np.random.default_rng(seed)
    scale = 0.5 * (np.abs(base) + 0.1)
    if anchor_idx is not None:
        scale[anchor_idx] = 0.0
    starts = [base] + [base + rng.normal(0.0, scale) for _ in range(n_starts - 1)]

    def cost(params: np.ndarray) -> float:
        den = template.denominator(params, u)
        if np.any(np.abs(den) < 1e-12):
            return np.inf
        resid = template.evaluate(params, u) - y
        return float(resid @ resid)

    free = [j for j in range(n_params) if j != anchor_idx]
    best: tuple[float, np.ndarray] | None = None
    for start in starts:
        params = start.copy()
        current = cost(params)
        if not np.isfinite(current):
            continue
        damping = 1e-10
        converged = current < 1e-28  # the linear initialization may already be exact
        for _ in range(max_iter):
            if converged:
                break
            resid = template.evaluate(params, u) - y
            jac = template.jacobian(params, u)[:, free]
            g = jac.T @ resid
            h = jac.T @ jac
            try:
                free_step = np.linalg.solve(h + damping * np.eye(len(free)), -g)
            except np.linalg.LinAlgError:
                break
            step = np.zeros(n_params)
            step[free] = free_step
            if np.linalg.norm(step) < 1e-14 * (1.0 + np.linalg.norm(params)):
                converged = True  # stationary point
                break
            trial = params + step
            trial_cost = cost(trial)
            if trial_cost < current:
                improvement = current - trial_cost
                params, current = trial, trial_cost
                damping = max(damping / 4.0, 1e-12)
                converged = improvement < tol * max(current, 1.0) or current < 1e-28
            else:
                damping *= 8.0
                if damping > 1e10:
                    converged = True  # damped to a standstill at a local optimum
        if converged and (best is None or current < best[0]):
            best = (current, params)
    if best is None:
        raise GreyboxError("template fit failed to converge from every start")

    params = best[1]
    u_grid = np.linspace(u.min(), u.max(), 512)
    den = template.denominator(params, u_grid)
    if np.any(np.abs(den) < 1e-9) or np.min(den) * np.max(den) < 0:
        raise GreyboxError(
            "ill-posed template: denominator vanishes inside the data range"
        )
    return {cl: float(v) for cl, v in zip(template.clusters, params)}


def prune_clusters(
    candidates: list[Regressor], forbidden: list[TermCluster]
) -> list[Regressor]:
    """Drop candidates whose cluster is forbidden (e.g. multistability pruning)."""
    forbidden_set = set(forbidden)
    kept = [r for r in candidates if cluster_of(r) not in forbidden_set]
    removed = len(candidates) - len(kept)
    logger.info("prune_clusters: removed %d of %d candidates", removed, len(candidates))
    if not kept:
        raise GreyboxError("pruning removed every candidate")
    return kept


def affine_pair_from_static_points(
    structure: ModelStructure, points: list[SteadyStatePoint], w: float = 1.0
) -> AffinePair:
    """Steady-state affine information pair [y_bar, G] for bi-objective fits."""
    if structure.has_noise_terms():
        raise GreyboxError("steady-state pair needs a noise-free structure")
    G = np.array([steady_state_row(structure, p) for p in points])
    v = np.array([p.y_bar for p in points])
    return AffinePair(v, G, w)
