"""Polynomial NARX/NARMAX structures: regressors, candidate sets, term clusters.

A regressor is a monomial in lagged variables.  Variable kinds:

==========  =====================================================
kind        meaning
==========  =====================================================
``y``       lagged output y(k-i)
``u``       lagged input u(k-i)
``u2``      lagged input first difference u2(k-i) = u(k-i)-u(k-i-1)
``u3``      lagged sign of the first difference, sign[u2(k-i)]
``e``       lagged residual/noise estimate e(k-i)
==========  =====================================================

The empty monomial is the constant term.  Models are linear in their
parameters: y(k) = theta_1 psi_1 + ... + theta_n psi_n.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

KIND_ORDER = {"y": 0, "u": 1, "u2": 2, "u3": 3, "e": 4}
PROCESS_KINDS = ("y", "u")
HYSTERESIS_KINDS = ("u2", "u3")

_FACTOR_RE = re.compile(r"^(y|u|u2|u3|e)\(k-(\d+)\)(?:\^(\d+))?$")


class StructureError(ValueError):
    """Raised for ill-formed regressors, structures or metaparameters."""


@dataclass(frozen=True, order=True)
class Regressor:
    """A monomial in lagged variables; ``factors=()`` is the constant term.

    Each factor is a ``(kind, lag, exponent)`` triple.  Factors are stored
    in canonical order (kind priority, then lag) with repeated variables
    merged, so equality is structural.
    """

    factors: tuple[tuple[str, int, int], ...] = ()

    def __post_init__(self):
        merged: dict[tuple[str, int], int] = {}
        for factor in self.factors:
            if len(factor) != 3:
                raise StructureError(f"factor must be (kind, lag, exponent): {factor!r}")
            kind, lag, exp = factor
            if kind not in KIND_ORDER:
                raise StructureError(f"unknown variable kind {kind!r}")
            if int(lag) < 1:
                raise StructureError(f"lag must be >= 1, got {kind}(k-{lag})")
            if int(exp) < 1:
                raise StructureError(f"exponent must be >= 1 in {factor!r}")
            merged[(kind, int(lag))] = merged.get((kind, int(lag)), 0) + int(exp)
        canonical = tuple(
            (kind, lag, exp)
            for (kind, lag), exp in sorted(merged.items(), key=lambda kv: (KIND_ORDER[kv[0][0]], kv[0][1]))
        )
        object.__setattr__(self, "factors", canonical)

    # -- structural queries -------------------------------------------------

    @property
    def is_constant(self) -> bool:
        return not self.factors

    @property
    def degree(self) -> int:
        """Total degree over process (y, u) factors only."""
        return sum(exp for kind, _, exp in self.factors if kind in PROCESS_KINDS)

    @property
    def max_effective_lag(self) -> int:
        """Largest data lag the regressor reaches back to.

        u2/u3 at lag i consume u(k-i-1), hence count as lag i+1.
        """
        lag = 0
        for kind, factor_lag, _ in self.factors:
            lag = max(lag, factor_lag + 1 if kind in HYSTERESIS_KINDS else factor_lag)
        return lag

    def kinds(self) -> set[str]:
        return {kind for kind, _, _ in self.factors}

    def exponent_of(self, kind: str) -> int:
        return sum(exp for k, _, exp in self.factors if k == kind)

    # -- rendering / parsing ------------------------------------------------

    def render(self) -> str:
        """Human-readable form, e.g. ``y(k-1)*u(k-2)^2``; constant renders as ``1``."""
        if self.is_constant:
            return "1"
        parts = []
        for kind, lag, exp in self.factors:
            s = f"{kind}(k-{lag})"
            if exp > 1:
                s += f"^{exp}"
            parts.append(s)
        return "*".join(parts)

    @classmethod
    def parse(cls, text: str) -> "Regressor":
        text = text.strip()
        if text in ("1", "const", "constant"):
            return cls(())
        factors = []
        for token in text.split("*"):
            m = _FACTOR_RE.match(token.strip())
            if m is None:
                raise StructureError(f"cannot parse regressor factor {token!r}")
            kind, lag, exp = m.group(1), int(m.group(2)), int(m.group(3) or 1)
            factors.append((kind, lag, exp))
        return cls(tuple(factors))

    def to_json(self) -> list[list]:
        return [[kind, lag, exp] for kind, lag, exp in self.factors]

    @classmethod
    def from_json(cls, data) -> "Regressor":
        return cls(tuple((str(k), int(l), int(e)) for k, l, e in data))

    def __str__(self) -> str:  # pragma: no cover - convenience
        return self.render()


def canonical_key(reg: Regressor):
    """Total order on regressors: degree, then factor tuples by kind/lag/exponent."""
    return (
        reg.degree,
        len(reg.factors),
        tuple((KIND_ORDER[k], lag, exp) for k, lag, exp in reg.factors),
    )


@dataclass(frozen=True)
class TermCluster:
    """Exponent signature of a regressor: output power p, input power m.

    Hysteresis factors are carried as a tag of (kind, exponent) pairs so
    that clusters over u2/u3 products stay distinguishable.
    """

    p: int = 0
    m: int = 0
    hyst: tuple[tuple[str, int], ...] = ()

    @property
    def label(self) -> str:
        parts = []
        if self.p:
            parts.append("y" if self.p == 1 else f"y^{self.p}")
        if self.m:
            parts.append("u" if self.m == 1 else f"u^{self.m}")
        for kind, exp in self.hyst:
            parts.append(kind if exp == 1 else f"{kind}^{exp}")
        return "*".join(parts) if parts else "const"

    def __str__(self) -> str:  # pragma: no cover - convenience
        return self.label


def parse_cluster(text: str) -> TermCluster:
    """Parse labels like ``const``, ``y``, ``u^2``, ``y*u``, ``u3*y``."""
    text = text.strip()
    if text in ("const", "constant", "1", "0"):
        return TermCluster(0, 0)
    p = m = 0
    hyst: dict[str, int] = {}
    for token in text.split("*"):
        mt = re.match(r"^(y|u|u2|u3)(?:\^(\d+))?$", token.strip())
        if mt is None:
            raise StructureError(f"cannot parse cluster token {token!r}")
        kind, exp = mt.group(1), int(mt.group(2) or 1)
        if kind == "y":
            p += exp
        elif kind == "u":
            m += exp
        else:
            hyst[kind] = hyst.get(kind, 0) + exp
    return TermCluster(p, m, tuple(sorted(hyst.items())))


def cluster_of(reg: Regressor) -> TermCluster:
    """Cluster signature of a regressor: exponents summed per kind, lags discarded."""
    p = reg.exponent_of("y")
    m = reg.exponent_of("u")
    hyst = tuple(
        sorted((kind, reg.exponent_of(kind)) for kind in HYSTERESIS_KINDS if reg.exponent_of(kind))
    )
    return TermCluster(p, m, hyst)


@dataclass(frozen=True)
class MetaParams:
    """Metaparameters of the polynomial model family.

    n_y, n_u, n_e are the maximum lags of output, input and noise; ell is
    the nonlinearity degree and d >= 1 the pure input delay.
    """

    n_y: int
    n_u: int
    n_e: int = 0
    ell: int = 1
    d: int = 1

    def __post_init__(self):
        if self.n_y < 0 or self.n_u < 0 or self.n_e < 0:
            raise StructureError("maximum lags must be nonnegative")
        if self.ell < 1:
            raise StructureError("nonlinearity degree ell must be >= 1")
        if self.d < 1:
            raise StructureError("pure delay d must be >= 1")
        if self.n_u and self.n_u < self.d - 1:
            raise StructureError(f"n_u={self.n_u} inconsistent with delay d={self.d}")

    def input_lags(self) -> range:
        return range(self.d, self.n_u + 1)

    def output_lags(self) -> range:
        return range(1, self.n_y + 1)

    def to_json(self) -> dict:
        return {"n_y": self.n_y, "n_u": self.n_u, "n_e": self.n_e, "ell": self.ell, "d": self.d}

    @classmethod
    def from_json(cls, data: dict) -> "MetaParams":
        return cls(**{k: int(v) for k, v in data.items()})


def meta_from_regressors(regressors, d: int | None = None) -> MetaParams:
    """Smallest MetaParams covering the given regressors."""
    regressors = list(regressors)
    n_y = max((lag for r in regressors for k, lag, _ in r.factors if k == "y"), default=0)
    n_u = max(
        (lag for r in regressors for k, lag, _ in r.factors if k in ("u", "u2", "u3")),
        default=0,
    )
    n_e = max((lag for r in regressors for k, lag, _ in r.factors if k == "e"), default=0)
    ell = max((r.degree for r in regressors), default=1)
    if d is None:
        d = min(
            (lag for r in regressors for k, lag, _ in r.factors if k in ("u", "u2", "u3")),
            default=1,
        )
    return MetaParams(n_y=n_y, n_u=n_u, n_e=n_e, ell=max(ell, 1), d=d)


@dataclass(frozen=True)
class ModelStructure:
    """An ordered set of distinct regressors under common metaparameters."""

    meta: MetaParams
    regressors: tuple[Regressor, ...]

    def __post_init__(self):
        regs = tuple(self.regressors)
        object.__setattr__(self, "regressors", regs)
        if not regs:
            raise StructureError("a model structure needs at least one regressor")
        if len(set(regs)) != len(regs):
            dupes = [r.render() for r in regs if regs.count(r) > 1]
            raise StructureError(f"duplicate regressors: {sorted(set(dupes))}")
        for reg in regs:
            self._check_bounds(reg)

    def _check_bounds(self, reg: Regressor) -> None:
        meta = self.meta
        if reg.degree > meta.ell:
            raise StructureError(f"{reg.render()} exceeds degree ell={meta.ell}")
        for kind, lag, _ in reg.factors:
            if kind == "y" and not 1 <= lag <= meta.n_y:
                raise StructureError(f"{reg.render()}: y lag {lag} outside 1..{meta.n_y}")
            if kind in ("u", "u2", "u3") and not meta.d <= lag <= meta.n_u:
                raise StructureError(
                    f"{reg.render()}: input lag {lag} outside {meta.d}..{meta.n_u}"
                )
            if kind == "e" and not 1 <= lag <= meta.n_e:
                raise StructureError(f"{reg.render()}: e lag {lag} outside 1..{meta.n_e}")

    def __len__(self) -> int:
        return len(self.regressors)

    @property
    def n_params(self) -> int:
        return len(self.regressors)

    @property
    def max_lag(self) -> int:
        """First valid row index: all regressors resolvable from k >= max_lag."""
        return max(r.max_effective_lag for r in self.regressors)

    @property
    def max_output_lag(self) -> int:
        return max((lag for r in self.regressors for k, lag, _ in r.factors if k == "y"), default=0)

    def has_noise_terms(self) -> bool:
        return any("e" in r.kinds() for r in self.regressors)

    def has_hysteresis_terms(self) -> bool:
        return any(r.kinds() & set(HYSTERESIS_KINDS) for r in self.regressors)

    def process_only(self) -> "ModelStructure":
        """Structure with noise regressors removed."""
        kept = tuple(r for r in self.regressors if "e" not in r.kinds())
        if not kept:
            raise StructureError("structure has no process regressors")
        return ModelStructure(self.meta, kept)

    def render(self) -> list[str]:
        return [r.render() for r in self.regressors]

    def to_json(self) -> dict:
        return {"meta": self.meta.to_json(), "regressors": [r.to_json() for r in self.regressors]}

    @classmethod
    def from_json(cls, data: dict) -> "ModelStructure":
        return cls(
            MetaParams.from_json(data["meta"]),
            tuple(Regressor.from_json(r) for r in data["regressors"]),
        )


@dataclass
class PolynomialModel:
    """A model structure together with its parameter vector theta.

    Noise (e) regressors, when present, are estimation artifacts: they are
    excluded from one-step prediction and free-run simulation.
    """

    structure: ModelStructure
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).ravel()
        if self.theta.size != len(self.structure):
            raise StructureError(
                f"theta length {self.theta.size} != {len(self.structure)} regressors"
            )
        if not np.all(np.isfinite(self.theta)):
            raise StructureError("theta contains non-finite values")

    @property
    def meta(self) -> MetaParams:
        return self.structure.meta

    def render(self) -> str:
        terms = [f"{t:+.6g}*{r.render()}" for r, t in zip(self.structure.regressors, self.theta)]
        return "y(k) = " + " ".join(terms)

    def process_part(self) -> tuple[tuple[Regressor, ...], np.ndarray]:
        """(regressors, theta) with noise terms stripped."""
        pairs = [
            (r, t) for r, t in zip(self.structure.regressors, self.theta) if "e" not in r.kinds()
        ]
        regs = tuple(r for r, _ in pairs)
        theta = np.array([t for _, t in pairs])
        return regs, theta

    def to_json(self) -> dict:
        return {
            "meta": self.meta.to_json(),
            "regressors": [r.to_json() for r in self.structure.regressors],
            "theta": [float(t) for t in self.theta],
            "noise_terms_excluded_from_simulation": self.structure.has_noise_terms(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "PolynomialModel":
        structure = ModelStructure.from_json(data)
        return cls(structure, np.asarray(data["theta"], dtype=float))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PolynomialModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def cluster_coefficients(model: PolynomialModel) -> dict[TermCluster, float]:
    """Cluster coefficients: the sum of theta over each term cluster."""
    sums: dict[TermCluster, float] = {}
    for reg, theta in zip(model.structure.regressors, model.theta):
        cluster = cluster_of(reg)
        sums[cluster] = sums.get(cluster, 0.0) + float(theta)
    return sums


def generate_candidates(
    meta: MetaParams,
    include_constant: bool = True,
    include_noise: bool = False,
    include_hysteresis: bool = False,
    nonlinear_noise: bool = False,
) -> list[Regressor]:
    """All candidate regressors admitted by ``meta``, in canonical order.

    Process candidates are every monomial of total degree 1..ell over the
    lagged outputs and inputs.  Noise candidates default to the linear
    e(k-i) terms used by extended least squares; full noise monomials
    (counted toward ell) are available behind ``nonlinear_noise``.
    Hysteresis candidates are u2/u3 at each admissible lag, alone and in
    products with one degree-1 process variable; u2*u3 cross terms are not
    generated.
    """
    y_vars = [("y", lag) for lag in meta.output_lags()]
    u_vars = [("u", lag) for lag in meta.input_lags()]
    pool = y_vars + u_vars
    if include_noise and nonlinear_noise:
        pool = pool + [("e", lag) for lag in range(1, meta.n_e + 1)]

    candidates: set[Regressor] = set()
    if include_constant:
        candidates.add(Regressor(()))
    for degree in range(1, meta.ell + 1):
        for combo in combinations_with_replacement(pool, degree):
            candidates.add(Regressor(tuple((kind, lag, 1) for kind, lag in combo)))
    if include_noise and not nonlinear_noise:
        for lag in range(1, meta.n_e + 1):
            candidates.add(Regressor((("e", lag, 1),)))
    if include_hysteresis:
        for kind in HYSTERESIS_KINDS:
            for lag in meta.input_lags():
                base = (kind, lag, 1)
                candidates.add(Regressor((base,)))
                for pkind, plag in y_vars + u_vars:
                    candidates.add(Regressor((base, (pkind, plag, 1))))
    return sorted(candidates, key=canonical_key)


def hysteresis_variables(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First difference u2(k)=u(k)-u(k-1) and its sign u3(k); sign(0)=0.

    The first sample of both is undefined (NaN) and must be excluded from
    regression rows, which the effective-lag accounting does automatically.
    """
    u = np.asarray(u, dtype=float)
    if u.size < 2:
        raise StructureError("hysteresis variables need at least 2 samples")
    u2 = np.empty_like(u)
    u2[0] = np.nan
    u2[1:] = np.diff(u)
    u3 = np.sign(u2)
    return u2, u3


def regressor_steady_value(
    reg: Regressor, y_bar: float, u_bar: float, branch: int = 0
) -> float:
    """Value of a regressor with all lags collapsed to steady state.

    y -> y_bar, u -> u_bar, u2 -> 0, u3 -> branch (+1 loading, -1
    unloading, 0 constant input), e -> 0.
    """
    value = 1.0
    for kind, _, exp in reg.factors:
        if kind == "y":
            value *= y_bar**exp
        elif kind == "u":
            value *= u_bar**exp
        elif kind == "u2":
            return 0.0
        elif kind == "u3":
            value *= float(branch) ** exp
        else:  # noise
            return 0.0
    return value


def variable_series(
    u: np.ndarray,
    y: np.ndarray | None = None,
    residuals: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Per-kind sample arrays used to evaluate regressors on data."""
    u = np.asarray(u, dtype=float)
    series = {"u": u}
    if u.size >= 2:
        u2, u3 = hysteresis_variables(u)
        series["u2"], series["u3"] = u2, u3
    if y is not None:
        series["y"] = np.asarray(y, dtype=float)
    if residuals is not None:
        series["e"] = np.asarray(residuals, dtype=float)
    return series


def evaluate_regressor_matrix(
    regressors, series: dict[str, np.ndarray], rows: np.ndarray
) -> np.ndarray:
    """Matrix with column j holding regressor j evaluated at the given rows."""
    rows = np.asarray(rows, dtype=int)
    out = np.empty((rows.size, len(regressors)))
    for j, reg in enumerate(regressors):
        col = np.ones(rows.size)
        for kind, lag, exp in reg.factors:
            if kind not in series:
                raise StructureError(f"no sample series for kind {kind!r} ({reg.render()})")
            col = col * series[kind][rows - lag] ** exp
        out[:, j] = col
    return out


def evaluate_regressors_at(regressors, series: dict[str, np.ndarray], k: int) -> np.ndarray:
    """Regressor vector psi(k-1): each regressor evaluated for target index k."""
    out = np.empty(len(regressors))
    for j, reg in enumerate(regressors):
        value = 1.0
        for kind, lag, exp in reg.factors:
            value *= series[kind][k - lag] ** exp
        out[j] = value
    return out
