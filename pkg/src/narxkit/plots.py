"""Figure rendering for CLI reports: every delimited output gets a PNG twin."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _finish(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_timeseries_plot(ts, path) -> Path:
    fig, axes = plt.subplots(2, 1, sharex=True, figsize=(8, 5))
    axes[0].plot(ts.u, lw=0.8)
    axes[0].set_ylabel("u(k)")
    axes[1].plot(ts.y, lw=0.8, color="tab:red")
    axes[1].set_ylabel("y(k)")
    axes[1].set_xlabel("k")
    axes[0].set_title(ts.name or "time series")
    return _finish(fig, path)


def save_selection_plot(trace, path) -> Path:
    steps = np.arange(1, len(trace.picks) + 1)
    crit = [v for _, v in trace.picks]
    errors = trace.msse if trace.msse else trace.ms1pe
    fig, axes = plt.subplots(2, 1, sharex=True, figsize=(8, 5))
    axes[0].bar(steps, crit, color="tab:blue")
    axes[0].set_ylabel(trace.method.upper())
    axes[1].semilogy(steps, np.maximum(errors, 1e-30), "o-", color="tab:red")
    axes[1].set_ylabel("MSSE" if trace.msse else "MS1PE")
    axes[1].set_xlabel("model size")
    if trace.stop_index:
        for ax in axes:
            ax.axvline(trace.stop_index, color="k", ls="--", lw=0.8)
    return _finish(fig, path)


def save_static_curve_plot(curve, path, ss_points=None) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4.5))
    us, ys = [], []
    for u, values in curve:
        for y in values:
            us.append(u)
            ys.append(y)
    ax.plot(us, ys, ".", ms=3, label="stable equilibria")
    if ss_points:
        ax.plot(
            [p.u_bar for p in ss_points],
            [p.y_bar for p in ss_points],
            "x",
            color="tab:red",
            label="imposed points",
        )
        ax.legend()
    ax.set_xlabel(r"$\bar{u}$")
    ax.set_ylabel(r"$\bar{y}$")
    ax.set_title("static function")
    return _finish(fig, path)


def save_hysteresis_plot(u_grid, loading, unloading, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.plot(u_grid, loading, label="loading (u3=+1)")
    ax.plot(u_grid, unloading, label="unloading (u3=-1)")
    ax.set_xlabel(r"$\bar{u}$")
    ax.set_ylabel(r"$\bar{y}$")
    ax.set_title("hysteresis branches")
    ax.legend()
    return _finish(fig, path)


def save_simulation_plot(y_meas, y_sim, path, row_index=0) -> Path:
    fig, ax = plt.subplots(figsize=(8, 4))
    k = np.arange(row_index, row_index + len(y_sim))
    if y_meas is not None:
        ax.plot(k, y_meas, lw=0.8, label="measured")
    ax.plot(k, y_sim, lw=0.8, ls="--", label="free run")
    ax.set_xlabel("k")
    ax.set_ylabel("y")
    ax.legend()
    return _finish(fig, path)


def save_residual_plot(results, path) -> Path:
    fig, axes = plt.subplots(len(results), 1, figsize=(7, 2.1 * len(results)), sharex=False)
    if len(results) == 1:
        axes = [axes]
    for ax, res in zip(axes, results):
        ax.vlines(res.lags, 0, res.values, lw=1)
        ax.axhline(res.band, color="tab:red", ls="--", lw=0.8)
        ax.axhline(-res.band, color="tab:red", ls="--", lw=0.8)
        status = "pass" if res.passed else "FAIL"
        ax.set_ylabel(res.name, fontsize=8)
        ax.set_title(f"{res.name}: {status} ({res.n_outside}/{len(res.lags)} outside)", fontsize=8)
    axes[-1].set_xlabel("lag")
    return _finish(fig, path)


def save_pareto_plot(points, path, picked=None) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.plot([p.j_ss for p in points], [p.j_dyn for p in points], "o-", ms=4)
    for p in points[:: max(len(points) // 6, 1)]:
        ax.annotate(f"{p.lam:.2f}", (p.j_ss, p.j_dyn), fontsize=7)
    if picked is not None:
        ax.plot([picked.j_ss], [picked.j_dyn], "r*", ms=14, label=f"picked λ={picked.lam:.2f}")
        ax.legend()
    ax.set_xlabel("J steady-state")
    ax.set_ylabel("J dynamical")
    ax.set_title("Pareto sweep")
    return _finish(fig, path)


def save_covariance_plot(report, path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, (r, tau, label) in zip(
        axes,
        (
            (report.r_lin, report.tau_lin, "linear"),
            (report.r_nl, report.tau_nl, "nonlinear"),
        ),
    ):
        ax.plot(r, lw=0.9)
        if tau is not None:
            ax.axvline(tau, color="tab:red", ls="--", lw=0.8, label=f"first min @ {tau}")
            ax.legend(fontsize=8)
        ax.set_xlabel(r"$\tau$")
        ax.set_title(f"{label} autocovariance")
    return _finish(fig, path)
