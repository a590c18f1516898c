"""Verification instruments: gradient checks, activation/regularizer duality,
local MAP optimality, and the full-vs-approximate posterior simulation.

Every check returns a :class:`DiagnosticReport` holding per-case rows, the
thresholds it was judged against and the verdict.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .lattice import zigzag
from .model import _LOG_CEIL, _LOG_FLOOR, ModelParams, _split_raw, cap_infer, loss_and_grad, loss_only
from .numerics import ActivationKind, RngStream, eta, logsumexp, sigma, sigma_inv


@dataclass
class DiagnosticReport:
    name: str
    rows: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    passed: bool = False

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        if self.rows:
            w = csv.DictWriter(buf, fieldnames=list(self.rows[0]), lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as f:
                f.write(text)
        return text

    def summary(self) -> str:
        m = ", ".join(f"{k}={_fmt(v)}" for k, v in self.metrics.items())
        t = ", ".join(f"{k}={_fmt(v)}" for k, v in self.thresholds.items())
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {m} (thresholds: {t})"

    def payload(self) -> str:
        return json.dumps({"name": self.name, "metrics": self.metrics,
                           "thresholds": self.thresholds, "passed": self.passed},
                          sort_keys=True, default=float)


def _fmt(v):
    return f"{v:.3e}" if isinstance(v, float) else str(v)


# --- gradient check ---------------------------------------------------------------------


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _grad_instance(kind, conditioned, size, d, K, n_cycles, seed, fixed_var, kink_margin):
    kind = ActivationKind.parse(kind)
    dec = zigzag(size, size)
    for attempt in range(200):
        rng = RngStream(seed).split(attempt)
        params = ModelParams.init(d, K, 1, 1 if conditioned else 0, kind, rng, np.float64,
                                  fixed_var=fixed_var, q_scale=0.3 if kind is ActivationKind.SIGMOID else 0.1)
        x = rng.random((size, size, 1))
        c = rng.random((size, size, 1)) if conditioned else None
        tape = cap_infer(x, c, dec, params, n_cycles)
        _, _, logv = _split_raw(tape.final @ params.Q, K, 1)
        ok = True
        if kind is ActivationKind.RELU:
            ok = np.min(np.abs(tape.pre)) > kink_margin
        if fixed_var is None:
            ok = ok and np.min(np.minimum(np.abs(logv - _LOG_FLOOR), np.abs(logv - _LOG_CEIL))) > kink_margin
        if ok:
            return params, x, c, dec, attempt
    raise RuntimeError("no kink-free instance found")


def grad_check(kind="sigmoid", conditioned=False, size=8, d=8, K=3, n_cycles=1, eps=1e-5,
               tol=1e-4, seed=0, fixed_var=None, kink_margin=1e-3) -> DiagnosticReport:
    """Central differences on every parameter entry vs. ``model.backward``.

    Runs in 64-bit. For relu the instance is redrawn until every
    pre-activation is at least ``kink_margin`` away from zero (and likewise
    the log-variances from their clamps), so the difference quotient never
    straddles a kink.
    """
    params, x, c, dec, attempt = _grad_instance(kind, conditioned, size, d, K, n_cycles, seed,
                                                fixed_var, kink_margin)
    _, grads = loss_and_grad(x, c, dec, params, n_cycles)
    rep = DiagnosticReport(f"gradcheck[{ActivationKind.parse(kind).name.lower()},"
                           f"{'cond' if conditioned else 'uncond'}]")
    worst = 0.0
    for name, arr in params.arrays().items():
        fd = np.zeros_like(arr)
        for i in range(arr.size):
            old = arr.flat[i]
            arr.flat[i] = old + eps
            lp = loss_only(x, c, dec, params, n_cycles)
            arr.flat[i] = old - eps
            lm = loss_only(x, c, dec, params, n_cycles)
            arr.flat[i] = old
            fd.flat[i] = (lp - lm) / (2 * eps)
        err = relative_error(grads[name], fd)
        i = int(np.argmax(err))
        rep.rows.append({"param": name, "entries": int(arr.size), "max_rel_err": float(err.max()),
                         "analytic_at_max": float(grads[name].flat[i]), "numeric_at_max": float(fd.flat[i])})
        worst = max(worst, float(err.max()))
    rep.metrics = {"max_rel_err": worst, "instance_attempt": attempt}
    rep.thresholds = {"tol": tol, "eps": eps}
    rep.passed = worst < tol
    return rep


# --- activation / regularizer duality --------------------------------------------------


def eta_prime_fd(h, kind, rel_step=1e-3):
    kind = ActivationKind.parse(kind)
    h = np.asarray(h, dtype=np.float64)
    span = np.minimum(h, 1 - h) if kind is ActivationKind.SIGMOID else h
    step = rel_step * span
    return (eta(h + step, kind) - eta(h - step, kind)) / (2 * step)


def eta_sigma_check(kind="sigmoid", n_points=10_000, tol=1e-6, z_range=None) -> DiagnosticReport:
    """sup |eta'(sigma(z)) - z| over a z grid, eta' by central differences;
    for sigmoid also checks eta against trapezoid integration of sigma^-1."""
    kind = ActivationKind.parse(kind)
    lo, hi = z_range or ((-10.0, 10.0) if kind is ActivationKind.SIGMOID else (0.01, 10.0))
    z = np.linspace(lo, hi, n_points)
    dev = np.abs(eta_prime_fd(sigma(z, kind), kind) - z)
    rep = DiagnosticReport(f"eta_sigma[{kind.name.lower()}]")
    idx = np.linspace(0, n_points - 1, min(n_points, 101)).astype(int)
    rep.rows = [{"z": float(z[i]), "deviation": float(dev[i])} for i in idx]
    rep.metrics = {"sup_deviation": float(dev.max())}
    rep.thresholds = {"tol": tol}
    ok = dev.max() < tol
    if kind is ActivationKind.SIGMOID:
        start = 1e-3
        int_err = 0.0
        for h in np.linspace(0.1, 0.9, 9):
            grid = np.concatenate([np.geomspace(start, 0.05, 20_000), np.linspace(0.05, h, 20_000)[1:]])
            integral = np.trapezoid(sigma_inv(grid, kind), grid)
            int_err = max(int_err, abs(integral - (eta(h, kind) - eta(start, kind))))
        rep.metrics["integral_consistency"] = float(int_err)
        rep.thresholds["integral_tol"] = 1e-5
        ok = ok and int_err < 1e-5
    rep.passed = bool(ok)
    return rep


# --- local MAP optimality ----------------------------------------------------------------


def map_objective(a, h, kind):
    return a * h - eta(h, kind)


def map_optimality_check(kind="sigmoid", trials=200, grid_points=10_000, seed=0,
                         a_range=(-5.0, 5.0)) -> DiagnosticReport:
    """Compare a*h - eta(h) at h = sigma(a) with its maximum over a dense grid.

    ``margin = f(sigma(a)) - max_grid f``. The quantization bound is
    ``step * max|f'|`` over the grid neighbours of the grid argmax: the true
    maximiser lies between them, so the grid can fall short of the true
    maximum by no more than this.
    """
    kind = ActivationKind.parse(kind)
    rng = RngStream(seed)
    a_vals = rng.uniform(*a_range, trials)
    if kind is ActivationKind.SIGMOID:
        grid = np.linspace(0, 1, grid_points + 2)[1:-1]
    else:
        grid = np.linspace(0, a_range[1] + 1, grid_points)
    step = grid[1] - grid[0]
    rep = DiagnosticReport(f"map_optimality[{kind.name.lower()}]")
    worst = np.inf
    worst_gap = 0.0
    for a in a_vals:
        f = map_objective(a, grid, kind)
        k = int(np.argmax(f))
        h = float(sigma(a, kind))
        fh = float(map_objective(a, h, kind))
        nb = grid[max(k - 1, 0):k + 2]
        inner = nb[nb > 0] if kind is ActivationKind.SIGMOID else nb
        slope = np.abs(a - sigma_inv(inner, kind)) if inner.size else np.array([abs(a)])
        bound = float(step * slope.max())
        margin = fh - float(f[k])
        rep.rows.append({"a": float(a), "h_map": h, "h_grid": float(grid[k]), "margin": margin,
                         "bound": bound})
        worst = min(worst, margin + bound)
        worst_gap = max(worst_gap, margin - bound)
    rep.metrics = {"worst_margin_plus_bound": float(worst), "worst_excess_over_bound": float(worst_gap)}
    rep.thresholds = {"margin_plus_bound_min": 0.0}
    rep.passed = bool(worst >= 0)
    return rep


# --- posterior approximation simulation -----------------------------------------------------


def _emission_loglik_1d(x_u, Q, K, grid):
    """log p_GMM(x_u | h) for every scalar state h in ``grid`` (p = 1)."""
    logits, means, logv = _split_raw(grid[:, None] * Q[0][None, :], K, 1)
    var = np.exp(np.clip(logv[..., 0], _LOG_FLOOR, _LOG_CEIL))
    logpi = logits - logsumexp(logits, axis=1)[:, None]
    diff = x_u - means[..., 0]
    comp = logpi - 0.5 * (np.log(2 * np.pi * var) + diff * diff / var)
    return logsumexp(comp, axis=1)


def _full_conditional_map(a, x_u, Q, K, zeta_weight, grid):
    """Grid argmax over h of zeta_weight*log p_GMM(x_u | h) + a*h - eta(h) (d = 1)."""
    obj = a * grid - eta(grid)
    if zeta_weight:
        obj = obj + zeta_weight * _emission_loglik_1d(float(x_u[0]), Q, K, grid)
    k = int(np.argmax(obj))
    return grid[k], obj[k]


def posterior_approx_sim(trials=1000, d_small=1, scale=0.1, zeta_weight=1.0, K=2, seed=0,
                         grid_points=2000, n_neighbors=4, min_corr=0.9) -> DiagnosticReport:
    """Full-conditional MAP (emission term included, grid search) vs. the
    closed-form MAP that drops it, over random one-dimensional instances.

    Per trial: W, R, Q ~ N(0, scale^2), neighbour states ~ U(0, 1), neighbour
    and own pixels ~ U(0, 1). ``zeta_weight`` multiplies the emission
    log-likelihood; at 0 the two estimates coincide.
    """
    if d_small != 1:
        raise ValueError("grid search is implemented for d_small == 1")
    rng = RngStream(seed)
    grid = np.linspace(0.001, 0.999, grid_points)
    rep = DiagnosticReport(f"posterior_approx[scale={scale},zeta={zeta_weight}]")
    approx, full = np.empty(trials), np.empty(trials)
    for t in range(trials):
        W = scale * rng.normal((1, 1))
        R = scale * rng.normal((1, 1))
        Q = scale * rng.normal((1, K * 3))
        hv = rng.random(n_neighbors)
        xv = rng.random(n_neighbors)
        xu = rng.random(1)
        a = float(W[0, 0] * hv.sum() + R[0, 0] * xv.sum())
        approx[t] = float(sigma(a))
        full[t], _ = _full_conditional_map(a, xu, Q, K, zeta_weight, grid)
        rep.rows.append({"trial": t, "h_approx": approx[t], "h_full": float(full[t])})
    dev = np.abs(approx - full)
    corr = float(np.corrcoef(approx, full)[0, 1]) if np.std(full) > 0 else 1.0
    rep.metrics = {"pearson": corr, "mean_abs_dev": float(dev.mean()), "max_abs_dev": float(dev.max()),
                   "grid_step": float(grid[1] - grid[0])}
    rep.thresholds = {"min_pearson": min_corr}
    rep.passed = corr >= min_corr
    return rep


def zeta_sweep(weights=(0.0, 0.5, 1.0, 2.0, 4.0), **kw) -> DiagnosticReport:
    """Mean deviation of the approximation as the emission weight grows."""
    rep = DiagnosticReport("posterior_approx_sweep")
    devs = []
    for w in weights:
        r = posterior_approx_sim(zeta_weight=w, **kw)
        devs.append(r.metrics["mean_abs_dev"])
        rep.rows.append({"zeta_weight": float(w), **{k: float(v) for k, v in r.metrics.items()}})
    mono = all(b > a for a, b in zip(devs, devs[1:]))
    rep.metrics = {"monotone": mono, "dev_at_zero": float(devs[0])}
    grid_step = rep.rows[0]["grid_step"]
    rep.thresholds = {"dev_at_zero_max": grid_step}
    rep.passed = mono and devs[0] <= grid_step
    return rep
