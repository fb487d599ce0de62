"""Convergence-bound evaluation for the strongly convex desk problem.

The reference optimum comes from a full-batch second-order solve, so the
bound and the lemma checks can be compared against exact quantities.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from .fl import DatasetShard, _log_softmax, _logits, gradient, loss, model_dim
from .seeding import derive_rng

SAFETY_FACTOR = 1.2


# ---------------------------------------------------------------------------
# Full-batch oracle
# ---------------------------------------------------------------------------


def hessian(w: np.ndarray, X: np.ndarray, classes: int, l2_reg: float) -> np.ndarray:
    """Exact Hessian of the mean cross-entropy plus the L2 term."""
    n, d = X.shape
    p = np.exp(_log_softmax(_logits(w, X, classes)))
    xt = np.hstack([X, np.ones((n, 1))])
    # per-sample softmax curvature diag(p) - p p^T
    S = np.einsum("ic,cd->icd", p, np.eye(classes)) - np.einsum("ic,id->icd", p, p)
    H4 = np.einsum("ia,ib,icd->acbd", xt, xt, S) / n  # (d+1, C, d+1, C)
    # reorder rows to the flat layout [W row-major (d x C), b]
    dim = model_dim(d, classes)
    H = H4.reshape(dim, dim)
    return H + l2_reg * np.eye(dim)


def full_batch_optimum(X: np.ndarray, y: np.ndarray, classes: int, l2_reg: float,
                       tol: float = 1e-10, w0: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Minimizer and minimum of the regularized loss, polished to gradient norm ``tol``."""
    if l2_reg <= 0:
        raise ValueError("the oracle needs l2_reg > 0 for a unique optimum")
    dim = model_dim(X.shape[1], classes)
    w = np.zeros(dim) if w0 is None else np.array(w0, dtype=float)
    res = minimize(loss, w, args=(X, y, classes, l2_reg), jac=lambda v, *a: gradient(v, *a),
                   hess=lambda v, X_, y_, c_, l_: hessian(v, X_, c_, l_), method="trust-exact",
                   options={"gtol": tol})
    w = res.x
    for _ in range(50):
        g = gradient(w, X, y, classes, l2_reg)
        if np.linalg.norm(g) < tol:
            break
        w = w - np.linalg.solve(hessian(w, X, classes, l2_reg), g)
    g = gradient(w, X, y, classes, l2_reg)
    if np.linalg.norm(g) >= tol:
        raise RuntimeError(f"full-batch oracle stalled at gradient norm {np.linalg.norm(g):.3e}")
    return w, loss(w, X, y, classes, l2_reg)


# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceConstants:
    smooth_L: float
    strong_mu: float
    sigma_k: np.ndarray
    grad_G: float
    gamma_gap: float
    alpha_k: np.ndarray
    local_E: int
    init_gap_sq: float  # ||w0 - w*||^2
    f_star: float = 0.0
    w_star: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.smooth_L >= self.strong_mu > 0:
            raise ValueError("need smooth_L >= strong_mu > 0")
        if self.gamma_gap < 0:
            raise ValueError("gamma_gap must be non-negative")
        if abs(float(np.sum(self.alpha_k)) - 1.0) > 1e-12:
            raise ValueError("alpha_k must sum to one")
        if self.local_E < 1:
            raise ValueError("local_E must be at least 1")

    @property
    def upsilon(self) -> float:
        return self.smooth_L / self.strong_mu

    @property
    def delta(self) -> float:
        return max(8.0 * self.upsilon, float(self.local_E))

    @property
    def Z(self) -> float:
        var = math.fsum(a * a * s * s for a, s in zip(self.alpha_k, self.sigma_k))
        return var + 6.0 * self.smooth_L * self.gamma_gap + 8.0 * (self.local_E - 1) ** 2 * self.grad_G**2

    def step_size(self, step: int) -> float:
        """Decaying schedule 2 / (mu (delta + step))."""
        return 2.0 / (self.strong_mu * (self.delta + step))


def _stack(shards: Sequence[DatasetShard]):
    return np.vstack([s.features for s in shards]), np.concatenate([s.labels for s in shards])


def _probe_points(w0, w_star, shard_optima):
    points = []
    for anchor in [w_star] + list(shard_optima):
        for t in (0.0, 0.25, 0.5, 0.75, 1.0):
            points.append((1 - t) * w0 + t * anchor)
    return points


def estimate_constants(shards: Sequence[DatasetShard], classes: int, l2_reg: float, local_E: int,
                       batch_size: int, seed: int, w0: np.ndarray | None = None,
                       batches_per_point: int = 64) -> ConvergenceConstants:
    """Empirical versions of the smoothness, variance, gradient-norm and heterogeneity constants.

    Supremum-type constants are maxima over sampled minibatch gradients at
    probe points between ``w0`` and the global and per-shard optima, scaled
    by ``SAFETY_FACTOR``.
    """
    if not shards:
        raise ValueError("need at least one shard")
    X, y = _stack(shards)
    sizes = np.array([len(s) for s in shards], dtype=float)
    alpha = sizes / sizes.sum()
    w0 = np.zeros(model_dim(X.shape[1], classes)) if w0 is None else np.asarray(w0, dtype=float)
    w_star, f_star = full_batch_optimum(X, y, classes, l2_reg)
    optima = [full_batch_optimum(s.features, s.labels, classes, l2_reg, tol=1e-8, w0=w_star) for s in shards]
    gamma_gap = max(0.0, f_star - math.fsum(a * f for a, (_, f) in zip(alpha, optima)))

    row_sq = np.max(np.sum(X * X, axis=1) + 1.0)
    smooth = l2_reg + 0.5 * row_sq

    probes = _probe_points(w0, w_star, [w for w, _ in optima])
    sigma = np.zeros(len(shards))
    g_max = 0.0
    for k, s in enumerate(shards):
        rng = derive_rng(seed, "constants", k)
        n = len(s)
        b = min(batch_size, n)
        for w in probes:
            full = gradient(w, s.features, s.labels, classes, l2_reg)
            dev = []
            for _ in range(batches_per_point):
                idx = rng.choice(n, size=b, replace=False)
                g = gradient(w, s.features[idx], s.labels[idx], classes, l2_reg)
                dev.append(float(np.sum((g - full) ** 2)))
                g_max = max(g_max, float(np.linalg.norm(g)))
            sigma[k] = max(sigma[k], math.sqrt(math.fsum(dev) / len(dev)), math.sqrt(max(dev)))
    return ConvergenceConstants(
        smooth_L=smooth,
        strong_mu=l2_reg,
        sigma_k=SAFETY_FACTOR * sigma,
        grad_G=SAFETY_FACTOR * g_max,
        gamma_gap=gamma_gap,
        alpha_k=alpha,
        local_E=local_E,
        init_gap_sq=float(np.sum((w0 - w_star) ** 2)),
        f_star=f_star,
        w_star=w_star,
    )


def theorem1_bound(c: ConvergenceConstants, beta) -> np.ndarray | float:
    """(2 upsilon / (delta + beta)) * (Z / mu + 2 L ||w0 - w*||^2)."""
    beta = np.asarray(beta, dtype=float)
    if np.any(beta < 0):
        raise ValueError("beta must be non-negative")
    out = (2.0 * c.upsilon / (c.delta + beta)) * (c.Z / c.strong_mu + 2.0 * c.smooth_L * c.init_gap_sq)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Local SGD trace and lemma checks
# ---------------------------------------------------------------------------


@dataclass
class SgdTrace:
    """Per-step quantities of one local-SGD run with periodic averaging.

    Arrays are indexed by step t = 0..T-1; ``avg_gap_sq`` has T+1 entries
    (before the first step and after every step).
    """

    decaying: bool
    step_sizes: np.ndarray
    avg_gap_sq: np.ndarray  # ||w_bar_t - w*||^2
    noise_sq: np.ndarray  # ||sum_k alpha_k (g_k - grad F_k(w_k))||^2
    drift: np.ndarray  # sum_k alpha_k ||w_bar_t - w_k^t||^2
    sync_steps: np.ndarray  # steps after which the models were averaged
    sync_gap: np.ndarray  # F(w_bar) - F* at those steps


def local_sgd_trace(shards: Sequence[DatasetShard], classes: int, c: ConvergenceConstants,
                    steps: int, batch_size: int, seed: int, l2_reg: float,
                    constant_lr: float | None = None, full_batch: bool = False,
                    w0: np.ndarray | None = None) -> SgdTrace:
    """Run local SGD with averaging every ``c.local_E`` steps and record lemma quantities."""
    X, y = _stack(shards)
    K = len(shards)
    alpha = np.asarray(c.alpha_k)
    dim = model_dim(X.shape[1], classes)
    w = np.tile(np.zeros(dim) if w0 is None else np.asarray(w0, float), (K, 1))
    rngs = [derive_rng(seed, "sgd", k) for k in range(K)]
    lrs, gaps, noise, drift, sync_t, sync_gap = [], [], [], [], [], []
    w_bar = alpha @ w
    gaps.append(float(np.sum((w_bar - c.w_star) ** 2)))
    for t in range(steps):
        lr = c.step_size(t) if constant_lr is None else constant_lr
        lrs.append(lr)
        drift.append(float(alpha @ np.sum((w - w_bar) ** 2, axis=1)))
        dev = np.zeros(dim)
        for k, s in enumerate(shards):
            full = gradient(w[k], s.features, s.labels, classes, l2_reg)
            if full_batch:
                g = full
            else:
                idx = rngs[k].choice(len(s), size=min(batch_size, len(s)), replace=False)
                g = gradient(w[k], s.features[idx], s.labels[idx], classes, l2_reg)
            dev += alpha[k] * (g - full)
            w[k] = w[k] - lr * g
        noise.append(float(dev @ dev))
        w_bar = alpha @ w
        gaps.append(float(np.sum((w_bar - c.w_star) ** 2)))
        if (t + 1) % c.local_E == 0:
            w[:] = w_bar
            sync_t.append(t + 1)
            sync_gap.append(loss(w_bar, X, y, classes, l2_reg) - c.f_star)
    return SgdTrace(constant_lr is None, np.array(lrs), np.array(gaps), np.array(noise),
                    np.array(drift), np.array(sync_t), np.array(sync_gap))


@dataclass(frozen=True)
class LemmaReport:
    skipped: bool
    notice: str = ""
    l1_fraction: float = float("nan")  # steps where the mean recursion holds
    l2_fraction: float = float("nan")  # repetitions whose mean variance is bounded
    l3_fraction: float = float("nan")  # repetitions whose drift is bounded at every step
    l1_margin: np.ndarray | None = None  # rhs / lhs per step
    l2_margin: np.ndarray | None = None  # rhs / lhs per repetition
    l3_margin: np.ndarray | None = None  # min over steps of rhs / lhs per repetition

    def passed(self, level: float = 0.95) -> bool:
        return (not self.skipped and self.l1_fraction >= level and self.l2_fraction >= level
                and self.l3_fraction >= level)


def _ratio(rhs, lhs):
    rhs, lhs = np.asarray(rhs, float), np.asarray(lhs, float)
    return np.where(lhs > 0, rhs / np.where(lhs > 0, lhs, 1.0), np.inf)


def verify_lemmas(traces: Sequence[SgdTrace], c: ConvergenceConstants) -> LemmaReport:
    """Check the one-step recursion, variance and drift lemmas over repeated runs."""
    if not traces:
        raise ValueError("need at least one trace")
    if not all(tr.decaying for tr in traces):
        return LemmaReport(True, "lemma checks need the decaying step-size schedule; skipped")
    var_bound = math.fsum(a * a * s * s for a, s in zip(c.alpha_k, c.sigma_k))
    l2 = np.array([_ratio(var_bound, math.fsum(tr.noise_sq) / len(tr.noise_sq)) for tr in traces])
    l3 = []
    for tr in traces:
        rhs = 4.0 * tr.step_sizes**2 * (c.local_E - 1) ** 2 * c.grad_G**2
        ok = np.where(tr.drift <= rhs + 1e-15, np.inf, _ratio(rhs, tr.drift))
        l3.append(float(np.min(ok)) if len(ok) else np.inf)
    l3 = np.array(l3)
    gaps = np.array([tr.avg_gap_sq for tr in traces])
    mean_gap = np.array([math.fsum(col) / len(col) for col in gaps.T])
    zeta = traces[0].step_sizes
    rhs = (1.0 - zeta * c.strong_mu) * mean_gap[:-1] + zeta**2 * c.Z
    l1 = _ratio(rhs, mean_gap[1:])
    return LemmaReport(
        skipped=False,
        l1_fraction=float(np.mean(l1 >= 1.0)),
        l2_fraction=float(np.mean(l2 >= 1.0)),
        l3_fraction=float(np.mean(l3 >= 1.0)),
        l1_margin=l1,
        l2_margin=l2,
        l3_margin=l3,
    )


@dataclass(frozen=True)
class BoundCheck:
    steps: np.ndarray
    empirical: np.ndarray  # mean over repetitions of F(w_bar) - F*
    bound: np.ndarray

    @property
    def holds(self) -> bool:
        return bool(np.all(self.empirical <= self.bound))

    def summary(self) -> str:
        lines = ["step  empirical_gap  bound  margin"]
        for s, e, b in zip(self.steps, self.empirical, self.bound):
            lines.append(f"{int(s):5d}  {e:.6e}  {b:.6e}  {b / e if e > 0 else math.inf:.3g}")
        return "\n".join(lines)


def check_bound(traces: Sequence[SgdTrace], c: ConvergenceConstants) -> BoundCheck:
    steps = traces[0].sync_steps
    gaps = np.array([tr.sync_gap for tr in traces])
    empirical = np.array([math.fsum(col) / len(col) for col in gaps.T])
    return BoundCheck(steps, empirical, np.asarray(theorem1_bound(c, steps)))


# ---------------------------------------------------------------------------
# Curve output
# ---------------------------------------------------------------------------

ROUND_COLUMNS = ("round", "sim_time_s", "loss", "accuracy", "bytes_tx", "contributors")
BOUND_COLUMNS = ("step", "empirical_gap", "bound", "margin")

_ROUND_ATTRS = {"bytes_tx": "bytes_transmitted", "contributors": "contributors_count"}


def _row(record, columns):
    if isinstance(record, Mapping):
        return [record[col] for col in columns]
    return [getattr(record, _ROUND_ATTRS.get(col, col)) for col in columns]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def curves_csv(records: Sequence, columns: Sequence[str] = ROUND_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in records:
        w.writerow([_fmt(v) for v in _row(r, columns)])
    return buf.getvalue()


def emit_curves(records: Sequence, path, columns: Sequence[str] = ROUND_COLUMNS) -> Path:
    """Write records as CSV atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(curves_csv(records, columns))
    tmp.replace(path)
    return path


def bound_rows(check: BoundCheck) -> list[dict]:
    return [{"step": int(s), "empirical_gap": float(e), "bound": float(b),
             "margin": float(b / e) if e > 0 else math.inf}
            for s, e, b in zip(check.steps, check.empirical, check.bound)]
