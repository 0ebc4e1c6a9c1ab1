"""Identification data: loading, splitting, decimation and benchmark generators.

The sampling-period workflow is: record an oversampled signal, locate the
first minima of its linear and nonlinear autocovariance functions, and
decimate so the smaller of the two lags lands between 10 and 20 (relaxable
to 5..25).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp


class DataError(ValueError):
    """Raised for malformed data files or inconsistent split/decimation requests."""


@dataclass
class TimeSeries:
    """A sampled input/output record [u(k), y(k)], k = 1..N."""

    u: np.ndarray
    y: np.ndarray
    t_s: float | None = None
    name: str = ""

    def __post_init__(self):
        self.u = np.atleast_1d(np.asarray(self.u, dtype=float))
        self.y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if self.u.ndim != 1 or self.y.ndim != 1:
            raise DataError("u and y must be one-dimensional")
        if self.u.size != self.y.size:
            raise DataError(f"u and y lengths differ: {self.u.size} vs {self.y.size}")
        if self.u.size < 1:
            raise DataError("time series must contain at least one sample")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.y))):
            raise DataError("time series contains NaN or Inf samples")

    @property
    def n(self) -> int:
        return self.u.size

    def __len__(self) -> int:
        return self.n


@dataclass(frozen=True)
class SplitSpec:
    """Partition sizes N = n_ident + n_valid."""

    n_ident: int
    n_valid: int

    def __post_init__(self):
        if self.n_ident < 1 or self.n_valid < 1:
            raise DataError("both identification and validation parts need >= 1 sample")


def split(ts: TimeSeries, spec: SplitSpec) -> tuple[TimeSeries, TimeSeries]:
    """First n_ident samples for identification, the remainder for validation."""
    if spec.n_ident + spec.n_valid != ts.n:
        raise DataError(
            f"split {spec.n_ident}+{spec.n_valid} != series length {ts.n}"
        )
    ident = TimeSeries(ts.u[: spec.n_ident], ts.y[: spec.n_ident], ts.t_s, ts.name + ":ident")
    valid = TimeSeries(ts.u[spec.n_ident :], ts.y[spec.n_ident :], ts.t_s, ts.name + ":valid")
    return ident, valid


# ---------------------------------------------------------------------------
# CSV I/O.  Format: optional header line "u,y" or "k,u,y"; comma separator,
# decimal point, LF endings.  A leading k column is ignored (row order is
# what counts).
# ---------------------------------------------------------------------------

_HEADERS = {("u", "y"): False, ("k", "u", "y"): True}


def load_csv(path) -> TimeSeries:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such data file: {path}")
    u_vals: list[float] = []
    y_vals: list[float] = []
    expected_width: int | None = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            cells = [c.strip() for c in row]
            if line_no == 1:
                key = tuple(c.lower() for c in cells)
                if key in _HEADERS:
                    expected_width = len(cells)
                    continue
            if expected_width is None:
                if len(cells) not in (2, 3):
                    raise DataError(f"{path}: row {line_no}: expected 2 or 3 columns, got {len(cells)}")
                expected_width = len(cells)
            if len(cells) != expected_width:
                raise DataError(
                    f"{path}: row {line_no}: ragged row ({len(cells)} columns, expected {expected_width})"
                )
            try:
                numbers = [float(c) for c in cells]
            except ValueError:
                raise DataError(f"{path}: row {line_no}: non-numeric cell in {cells!r}") from None
            if expected_width == 3:
                numbers = numbers[1:]
            u_vals.append(numbers[0])
            y_vals.append(numbers[1])
    if not u_vals:
        raise DataError(f"{path}: no data rows")
    return TimeSeries(np.array(u_vals), np.array(y_vals), name=path.stem)


def save_csv(ts: TimeSeries, path, include_index: bool = False) -> None:
    """Write 17-significant-digit CSV so a load round-trips bit-exactly."""
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        if include_index:
            fh.write("k,u,y\n")
            for k, (u, y) in enumerate(zip(ts.u, ts.y), start=1):
                fh.write(f"{k},{u:.17g},{y:.17g}\n")
        else:
            fh.write("u,y\n")
            for u, y in zip(ts.u, ts.y):
                fh.write(f"{u:.17g},{y:.17g}\n")


# ---------------------------------------------------------------------------
# Autocovariance analysis and the decimation criterion
# ---------------------------------------------------------------------------


@dataclass
class CovarianceReport:
    """Linear and nonlinear autocovariance traces with their first minima."""

    r_lin: np.ndarray
    r_nl: np.ndarray
    tau_lin: int | None
    tau_nl: int | None
    tau_m_star: int | None
    degenerate: bool = False

    @classmethod
    def from_covariances(
        cls, r_lin: np.ndarray, r_nl: np.ndarray, plateau_tol: float = 0.0
    ) -> "CovarianceReport":
        r_lin = np.asarray(r_lin, dtype=float)
        r_nl = np.asarray(r_nl, dtype=float)
        tau_lin = first_minimum(r_lin, plateau_tol)
        tau_nl = first_minimum(r_nl, plateau_tol)
        present = [t for t in (tau_lin, tau_nl) if t is not None]
        return cls(r_lin, r_nl, tau_lin, tau_nl, min(present) if present else None)


def first_minimum(values: np.ndarray, plateau_tol: float = 0.0) -> int | None:
    """Lag of the first minimum of a covariance trace.

    A minimum is the first lag strictly below its left neighbour whose
    right side does not fall further; values within ``plateau_tol`` count
    as a plateau, resolved to its earliest lag.  The endpoint counts if it
    is reached monotonically.
    """
    values = np.asarray(values, dtype=float)
    last = values.size - 1
    if last < 1:
        return None
    t = 1
    while t < last:
        if values[t] < values[t - 1]:
            j = t
            while j + 1 <= last and abs(values[j + 1] - values[t]) <= plateau_tol:
                j += 1
            if j == last or values[j + 1] > values[t]:
                return t
            t = j + 1  # still descending beyond the plateau
        else:
            t += 1
    if values[last] < values[last - 1]:
        return last
    return None


def _autocovariance(x: np.ndarray, tau_max: int) -> np.ndarray:
    """Biased (1/N) sample autocovariance of the mean-removed signal, lags 0..tau_max."""
    x = np.asarray(x, dtype=float)
    z = x - x.mean()
    n = z.size
    r = np.empty(tau_max + 1)
    for tau in range(tau_max + 1):
        r[tau] = np.dot(z[tau:], z[: n - tau]) / n
    return r


def _fluctuation_tolerance(r: np.ndarray) -> float:
    """Plateau tolerance at the sampling-fluctuation scale of a covariance trace.

    Third differences annihilate the smooth (quadratic-in-lag) part of the
    trace and leave the estimator roughness, whose scale is recovered from
    the median absolute value (0.6745 * sqrt(20) * sigma for white
    fluctuations).  Eight sigma keeps statistically flat regions reading
    as plateaus while sharp deterministic troughs stay exact.
    """
    if r.size < 5:
        return 0.0
    d3 = np.diff(r, n=3)
    return 8.0 * float(np.median(np.abs(d3))) / 3.016


def covariance_analysis(y_star: np.ndarray, tau_max: int | None = None) -> CovarianceReport:
    """Linear and nonlinear autocovariances of an oversampled signal.

    The linear trace is the autocovariance of y*; the nonlinear one applies
    the same estimator to the mean-removed squared signal.  Minimum
    detection uses a plateau tolerance at the estimator's fluctuation
    scale, so statistically flat tails resolve to their earliest lag
    rather than to a noise-induced wiggle.
    """
    y_star = np.asarray(y_star, dtype=float)
    n = y_star.size
    if tau_max is None:
        tau_max = int(min(n // 4, 500))
    if tau_max < 2:
        raise DataError("tau_max must be >= 2")
    if n <= tau_max:
        raise DataError(f"need more than tau_max={tau_max} samples, got {n}")

    r_lin = _autocovariance(y_star, tau_max)
    r_nl = _autocovariance(y_star**2, tau_max)
    if r_lin[0] <= 0.0:
        return CovarianceReport(r_lin, r_nl, None, None, None, degenerate=True)

    tau_lin = first_minimum(r_lin, _fluctuation_tolerance(r_lin))
    tau_nl = first_minimum(r_nl, _fluctuation_tolerance(r_nl))
    present = [t for t in (tau_lin, tau_nl) if t is not None]
    return CovarianceReport(r_lin, r_nl, tau_lin, tau_nl, min(present) if present else None)


@dataclass(frozen=True)
class DecimationChoice:
    delta: int
    tau_m: int
    relaxed: bool


TAU_BAND = (10, 20)
TAU_BAND_RELAXED = (5, 25)


def choose_decimation(tau_m_star: int) -> DecimationChoice:
    """Decimation factor placing the working lag tau_m in the 10..20 band.

    Among factors whose rounded tau_m lands in the band, the one closest
    to the band midpoint wins (larger factor on ties, compression being
    the point).  If no factor reaches the band, the nearest miss is
    returned flagged ``relaxed`` (the band may be relaxed to 5..25).
    """
    tau_m_star = int(tau_m_star)
    if tau_m_star < 1:
        raise DataError("tau_m_star must be a positive lag")
    lo, hi = TAU_BAND
    mid = (lo + hi) / 2.0
    in_band: list[tuple[float, int, int]] = []
    near: list[tuple[float, int, int]] = []
    for delta in range(1, tau_m_star + 1):
        tau_m = round(tau_m_star / delta)
        if lo <= tau_m <= hi:
            in_band.append((abs(tau_m - mid), -delta, tau_m))
        dist = max(lo - tau_m, tau_m - hi, 0)
        near.append((dist, delta, tau_m))
    if in_band:
        _, neg_delta, tau_m = min(in_band)
        return DecimationChoice(-neg_delta, tau_m, relaxed=False)
    _, delta, tau_m = min(near)
    return DecimationChoice(delta, tau_m, relaxed=True)


def decimate(ts: TimeSeries, delta: int) -> TimeSeries:
    """Keep every delta-th sample of both channels (the factor must be shared)."""
    delta = int(delta)
    if delta < 1:
        raise DataError("decimation factor must be >= 1")
    if delta >= ts.n:
        raise DataError(f"decimation factor {delta} >= series length {ts.n}")
    return TimeSeries(
        ts.u[::delta],
        ts.y[::delta],
        None if ts.t_s is None else ts.t_s * delta,
        ts.name,
    )


def excitation_summary(u: np.ndarray, power_threshold: float = 0.01) -> int:
    """Number of periodogram bins above power_threshold x the peak bin.

    A rough persistence-of-excitation count: the input should carry power
    at as many frequencies as there are dynamics to identify.
    """
    u = np.asarray(u, dtype=float)
    if u.size < 4:
        raise DataError("excitation summary needs at least 4 samples")
    z = u - u.mean()
    if np.max(np.abs(z)) <= 1e-12 * max(1.0, float(np.max(np.abs(u)))):
        return 0  # constant to machine precision
    spectrum = np.abs(np.fft.rfft(z)) ** 2
    peak = spectrum.max()
    if peak <= 0.0:
        return 0
    return int(np.sum(spectrum > power_threshold * peak))


# ---------------------------------------------------------------------------
# Benchmark generators
# ---------------------------------------------------------------------------


def generate_hammerstein_benchmark(
    seed: int,
    n: int,
    noise_std: float = 0.1,
    constant_input: float | None = None,
) -> TimeSeries:
    """Dead-zone Hammerstein benchmark.

    z(k) = 0 for u(k) < 1 else u(k)-1, and y(k) = 0.9 y(k-1) + 0.7 z(k-1)
    + e(k).  The input is uniform with mean 1 and standard deviation 0.6
    (support 1 +/- 0.6*sqrt(3)); e is zero-mean Gaussian.  Deterministic
    for a given seed.
    """
    if n < 1:
        raise DataError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if constant_input is None:
        half_width = 0.6 * math.sqrt(3.0)
        u = rng.uniform(1.0 - half_width, 1.0 + half_width, size=n)
    else:
        u = np.full(n, float(constant_input))
    e = rng.normal(0.0, noise_std, size=n) if noise_std > 0 else np.zeros(n)
    z = np.where(u < 1.0, 0.0, u - 1.0)
    y = np.empty(n)
    y[0] = e[0]
    for k in range(1, n):
        y[k] = 0.9 * y[k - 1] + 0.7 * z[k - 1] + e[k]
    return TimeSeries(u, y, name=f"hammerstein-seed{seed}")


def generate_duffing_ueda(
    n: int,
    t_s: float = 0.05,
    amplitude: float = 11.0,
    omega: float = 1.0,
    x0: tuple[float, float] = (0.0, 0.0),
) -> TimeSeries:
    """Sampled response of the Duffing-Ueda oscillator y'' + 0.1 y' + y^3 = A cos(w t).

    Provided only as an oversampled data source for the decimation
    workflow; continuous-time estimation is out of scope.
    """
    if n < 2:
        raise DataError("n must be >= 2")
    t_eval = np.arange(n) * t_s

    def rhs(t, state):
        y, dy = state
        return [dy, amplitude * np.cos(omega * t) - 0.1 * dy - y**3]

    sol = solve_ivp(
        rhs, (t_eval[0], t_eval[-1]), x0, t_eval=t_eval, rtol=1e-9, atol=1e-9, method="RK45"
    )
    u = amplitude * np.cos(omega * t_eval)
    return TimeSeries(u, sol.y[0], t_s=t_s, name="duffing-ueda")
