"""Model selection: ridge-trace degrees of freedom, BIC, and lambda tuning.

df is the trace of the hat matrix of the stacked weighted ridge system at
convergence, with near-fused groups converted to hard constraints first,
plus one slot per moderator coefficient.  Lambda is tuned on a log scale by
a coarse grid followed by golden-section refinement around the incumbent,
with every evaluation a full fit warm-started from the nearest previous
lambda.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    EngineOptions,
    FitResult,
    _make_problem,
    _cluster_design,
    _pg_mean,
    _pibar,
    _predictors,
    _respondent_loglik,
    _responsibilities,
    _tau_rates,
    guarded_final_bindings,
)
from scipy.special import logsumexp

__all__ = ["TuneResult", "degrees_of_freedom", "observed_loglik", "bic", "tune_lambda"]

_DENSE_LIMIT = 2000
_HUTCHINSON_PROBES = 64
_HUTCHINSON_SEED = 0xDF


@dataclass
class EvalRecord:
    lam: float
    df: float
    bic: float
    loglik: float
    fit: FitResult | None = None
    converged: bool = True


@dataclass
class TuneResult:
    evaluations: list
    best_lambda: float
    best: EvalRecord
    boundary: bool
    search_trace: list = field(default_factory=list)

    @property
    def lambda_grid_evals(self):
        return [(e.lam, e.df, e.bic, e.loglik) for e in self.evaluations]


def _final_caches(fit_result: FitResult):
    """Recompute weights and rates at the converged state with near-fused
    groups converted to constraints (the binding is idempotent post-fit)."""
    state = fit_result.state.copy()
    prob = _make_problem(fit_result.design, fit_result.moderators, fit_result.ps,
                         state.n_clusters)
    guarded_final_bindings(state, prob, fit_result.ps)
    resp = _responsibilities(state, prob)
    psi = _predictors(state, prob)
    omega = _pg_mean(psi)
    rates, _ = _tau_rates(state, prob, _pibar(state, prob))
    return state, prob, resp, omega, rates


def _stacked_matrices(state, prob, resp, omega, rates):
    """Dense likelihood Gram M and ridge R of the stacked system."""
    K = prob.K
    mks = [_cluster_design(prob, state, k) for k in range(K)]
    dims = [state.beta[k].size for k in range(K)]
    size = 1 + sum(dims)
    resp_rows = resp[prob.resp_index]
    w = resp_rows * omega
    m_mat = np.zeros((size, size))
    r_mat = np.zeros((size, size))
    m_mat[0, 0] = float(w.sum())
    pos = 1
    for k in range(K):
        sl = slice(pos, pos + dims[k])
        pos += dims[k]
        wk = w[:, k]
        m_mat[sl, sl] = mks[k].T @ (wk[:, None] * mks[k])
        cross = mks[k].T @ wk
        m_mat[sl, 0] = cross
        m_mat[0, sl] = cross
        rk = np.zeros((dims[k], dims[k]))
        for g in prob.ps.groups:
            if g.gid in state.bound[k]:
                continue
            v = state.vbases[k]
            d = g.dmat if v is None else g.dmat @ v
            rk += rates[(k, g.gid)] * (d.T @ d)
        r_mat[sl, sl] = rk
    return m_mat, r_mat


def degrees_of_freedom(fit_result: FitResult, method: str = "auto") -> float:
    """tr[(T'WT + R)^{-1} T'WT] + p_x (K-1) at the converged fit.

    Exact dense solve up to 2000 free coordinates; Hutchinson stochastic
    trace (fixed seed, 64 Rademacher probes) beyond that or when
    ``method="hutchinson"`` forces it.
    """
    state, prob, resp, omega, rates = _final_caches(fit_result)
    m_mat, r_mat = _stacked_matrices(state, prob, resp, omega, rates)
    size = m_mat.shape[0]
    a_mat = m_mat + r_mat
    p_x = 0 if prob.x_mod is None else prob.x_mod.shape[1]
    extra = p_x * (prob.K - 1)
    if method == "dense" or (method == "auto" and size <= _DENSE_LIMIT):
        trace = float(np.trace(np.linalg.solve(a_mat, m_mat)))
    else:
        rng = np.random.default_rng(_HUTCHINSON_SEED)
        probes = rng.integers(0, 2, size=(size, _HUTCHINSON_PROBES)) * 2.0 - 1.0
        sol = np.linalg.solve(a_mat, m_mat @ probes)
        trace = float(np.mean(np.einsum("ip,ip->p", probes, sol)))
    return trace + extra


def observed_loglik(fit_result: FitResult) -> float:
    """Observed-data mixture log likelihood (prior terms excluded)."""
    state = fit_result.state
    prob = _make_problem(fit_result.design, fit_result.moderators, fit_result.ps,
                         state.n_clusters)
    from .engine import _log_pi

    log_r = _log_pi(state, prob) + _respondent_loglik(state, prob)
    return float(logsumexp(log_r, axis=1).sum())


def bic(fit_result: FitResult, df: float, n_total: int | None = None) -> float:
    """BIC = -2 loglik + df ln(n), n = total task rows."""
    if n_total is None:
        n_total = fit_result.design.n_rows
    return -2.0 * observed_loglik(fit_result) + df * math.log(n_total)


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def tune_lambda(problem, bounds, budget: int = 15) -> TuneResult:
    """Minimize BIC(lambda) over [lo, hi] with at most ``budget`` evaluations.

    ``problem(lam, warm)`` must return an :class:`EvalRecord`; ``warm`` is
    the record of the nearest previously evaluated lambda (or None).  The
    search is a deterministic 5-point log grid followed by golden-section
    refinement of the incumbent bracket.
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    if not (0.0 < lo < hi):
        raise ValueError("bounds must satisfy 0 < lo < hi")
    if budget < 5:
        raise ValueError("tuning budget must be at least 5")
    evals: list[EvalRecord] = []
    trace: list[str] = []

    def run(lam: float) -> EvalRecord:
        warm = None
        if evals:
            warm = min(evals, key=lambda e: abs(math.log(e.lam) - math.log(lam)))
        rec = problem(lam, warm)
        evals.append(rec)
        trace.append(f"eval lambda={lam:.6g} bic={rec.bic:.6g}")
        return rec

    grid = np.exp(np.linspace(math.log(lo), math.log(hi), 5))
    for lam in grid:
        run(float(lam))
    if all(not e.converged for e in evals):
        raise RuntimeError(
            "no lambda evaluation converged; diagnostics: "
            + "; ".join(f"lambda={e.lam:.4g} bic={e.bic:.4g}" for e in evals)
        )

    def incumbent():
        return min(evals, key=lambda e: (e.bic, e.lam))

    while len(evals) < budget:
        pts = sorted(evals, key=lambda e: e.lam)
        xs = [math.log(e.lam) for e in pts]
        best_idx = min(range(len(pts)), key=lambda i: (pts[i].bic, pts[i].lam))
        if best_idx == 0:
            a, b = xs[0], xs[1]
            new = a + (1.0 - _GOLDEN) * (b - a)
        elif best_idx == len(pts) - 1:
            a, b = xs[-2], xs[-1]
            new = a + _GOLDEN * (b - a)
        else:
            a, m, b = xs[best_idx - 1], xs[best_idx], xs[best_idx + 1]
            if (b - m) >= (m - a):
                new = m + (1.0 - _GOLDEN) * (b - m)
            else:
                new = m - (1.0 - _GOLDEN) * (m - a)
        if min(abs(new - x) for x in xs) < 1e-10:
            trace.append("bracket exhausted")
            break
        run(float(math.exp(new)))

    best = incumbent()
    pts = sorted(evals, key=lambda e: e.lam)
    boundary = best.lam in (pts[0].lam, pts[-1].lam)
    if boundary:
        trace.append(f"minimum at search boundary lambda={best.lam:.6g}")
    return TuneResult(
        evaluations=evals,
        best_lambda=best.lam,
        best=best,
        boundary=boundary,
        search_trace=trace,
    )
