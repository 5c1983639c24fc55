"""Synthetic forced-choice experiments for recovery studies.

True main-effect coefficients are drawn per factor and cluster with a
random number of distinct levels then de-meaned (interactions are truly
zero); moderators come from a correlated normal; memberships follow the
multinomial-logit model; profile pairs are uniform.  True AMCEs are
computed by Monte Carlo marginalization, and recovery is scored by
correlation, SE calibration, and (post-selection) coverage after resolving
label switching.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit, logsumexp

__all__ = [
    "SimDesign",
    "SimData",
    "draw_true_coefficients",
    "generate_dataset",
    "true_amces",
    "resolve_labels",
    "score_recovery",
]


@dataclass
class SimDesign:
    n_factors: int = 5
    n_levels: int = 3
    n_clusters: int = 3
    n_respondents: int = 500
    n_tasks: int = 5
    moderator_count: int = 5
    coef_seed: int = 20230301
    data_seed: int = 20230302
    truth_mc_draws: int = 200_000
    mu_true: float = 0.0
    replicates: int = 20


@dataclass
class SimData:
    levels_left: np.ndarray
    levels_right: np.ndarray
    respondent_index: np.ndarray
    y: np.ndarray
    x_mod: np.ndarray
    moderators: pd.DataFrame
    z_true: np.ndarray
    replicate: int


def draw_true_coefficients(sd: SimDesign):
    """One shared draw of true main-effect and moderator coefficients.

    Per factor and cluster: the number of distinct values u' is uniform on
    {1, .., L}; u' = 1 zeroes the factor; otherwise u' independent
    N(0, 1/3) values fill the first u' levels, the remaining levels copy a
    uniformly chosen one of them, and the vector is de-meaned.
    """
    rng = np.random.default_rng(sd.coef_seed)
    K, J, L = sd.n_clusters, sd.n_factors, sd.n_levels
    beta = np.zeros((K, J, L))
    for k in range(K):
        for j in range(J):
            u = int(rng.integers(1, L + 1))
            vals = rng.normal(0.0, np.sqrt(1.0 / 3.0), size=u)
            if u == 1:
                continue
            full = np.empty(L)
            full[:u] = vals
            for l in range(u, L):
                full[l] = vals[rng.integers(0, u)]
            beta[k, j] = full - full.mean()
    phi = rng.normal(0.0, np.sqrt(2.0), size=(K, sd.moderator_count + 1))
    phi = phi - phi[0]
    return beta, phi


def _moderator_cov(p: int) -> np.ndarray:
    idx = np.arange(p)
    return 0.25 ** np.abs(idx[:, None] - idx[None, :])


def _pi_from(x_mod, phi):
    logits = x_mod @ phi.T
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


def _true_psi(sd, beta, z_rows, left, right):
    psi = np.full(left.shape[0], sd.mu_true)
    for j in range(sd.n_factors):
        psi += beta[z_rows, j, left[:, j]] - beta[z_rows, j, right[:, j]]
    return psi


def generate_dataset(sd: SimDesign, beta, phi, replicate: int = 0) -> SimData:
    """One replicate: moderators, memberships, uniform pairs, outcomes."""
    rng = np.random.default_rng([sd.data_seed, replicate])
    N, T, J, L = sd.n_respondents, sd.n_tasks, sd.n_factors, sd.n_levels
    chol = np.linalg.cholesky(_moderator_cov(sd.moderator_count))
    x = rng.standard_normal((N, sd.moderator_count)) @ chol.T
    x_mod = np.hstack([np.ones((N, 1)), x])
    pi = _pi_from(x_mod, phi)
    u = rng.random(N)
    z = (u[:, None] > np.cumsum(pi, axis=1)).sum(axis=1)
    n = N * T
    resp = np.repeat(np.arange(N), T)
    left = rng.integers(0, L, size=(n, J))
    right = rng.integers(0, L, size=(n, J))
    psi = _true_psi(sd, beta, z[resp], left, right)
    y = (rng.random(n) < expit(psi)).astype(float)
    moderators = pd.DataFrame(x, columns=[f"x{i+1}" for i in range(sd.moderator_count)])
    return SimData(left, right, resp, y, x_mod, moderators, z, replicate)


def true_amces(sd: SimDesign, beta, draws: int | None = None,
               seed_tag: int = 777) -> pd.DataFrame:
    """Monte Carlo truth for every (cluster, factor, level vs level 0) AMCE.

    Marginalizes the forced-choice contrast over ``draws`` uniform profile
    pairs; the reported ``mc_se`` is the standard error of that average.
    """
    draws = draws or sd.truth_mc_draws
    rng = np.random.default_rng([sd.coef_seed, seed_tag])
    J, L, K = sd.n_factors, sd.n_levels, sd.n_clusters
    left = rng.integers(0, L, size=(draws, J))
    right = rng.integers(0, L, size=(draws, J))
    rows = []
    for k in range(K):
        zk = np.full(draws, k)
        base_left = _true_psi(sd, beta, zk, left, right)
        for j in range(J):
            obs_l = beta[k, j, left[:, j]]
            obs_r = beta[k, j, right[:, j]]
            for l in range(1, L):
                # left-profile contrast l vs 0, then right-profile contrast
                psi_l = base_left - obs_l + beta[k, j, l]
                psi_0 = base_left - obs_l + beta[k, j, 0]
                term_left = expit(psi_l) - expit(psi_0)
                psi_rl = base_left - (-obs_r) - beta[k, j, l]
                psi_r0 = base_left - (-obs_r) - beta[k, j, 0]
                term_right = expit(psi_r0) - expit(psi_rl)
                contrib = 0.5 * (term_left + term_right)
                rows.append({
                    "cluster": k,
                    "factor": j,
                    "level": l,
                    "baseline": 0,
                    "amce": float(contrib.mean()),
                    "mc_se": float(contrib.std(ddof=1) / np.sqrt(draws)),
                })
    return pd.DataFrame(rows)


def resolve_labels(responsibilities: np.ndarray, z_true: np.ndarray) -> tuple:
    """Permutation ``perm`` (true slot -> estimated label) minimizing the
    absolute error between posterior memberships and the one-hot truth;
    ties break lexicographically.  K! enumeration, K <= 8."""
    K = responsibilities.shape[1]
    if K > 8:
        raise ValueError("label resolution enumerates K! permutations; K <= 8")
    onehot = np.zeros_like(responsibilities)
    onehot[np.arange(len(z_true)), z_true] = 1.0
    best, best_err = None, np.inf
    for perm in itertools.permutations(range(K)):
        err = float(np.abs(responsibilities[:, list(perm)] - onehot).sum())
        if err < best_err - 1e-15 or (abs(err - best_err) <= 1e-15 and
                                      (best is None or perm < best)):
            best, best_err = perm, err
    return best


def score_recovery(estimates: np.ndarray, truth: np.ndarray,
                   ses: np.ndarray | None = None) -> dict:
    """Recovery report over replicates.

    ``estimates`` is (R, n_quantities) with matching ``truth`` (n_quantities,)
    and optional ``ses``.  Reports per-replicate estimate/truth correlation,
    per-quantity mean SE vs Monte Carlo SD, and (post-selection) coverage at
    95% and 90%.
    """
    est = np.asarray(estimates, dtype=float)
    if est.ndim != 2 or est.shape[0] < 2:
        raise ValueError("need at least 2 replicates")
    truth = np.asarray(truth, dtype=float)
    correlations = np.array([np.corrcoef(row, truth)[0, 1] for row in est])
    report = {
        "correlations": correlations,
        "median_correlation": float(np.median(correlations)),
        "mean_correlation": float(np.mean(correlations)),
        "mc_sd": est.std(axis=0, ddof=1),
        "bias": est.mean(axis=0) - truth,
    }
    if ses is not None:
        ses = np.asarray(ses, dtype=float)
        report["mean_se"] = ses.mean(axis=0)
        for label, zq in (("95", 1.959963984540054), ("90", 1.6448536269514722)):
            hit = np.abs(est - truth[None, :]) <= zq * ses
            report[f"coverage_{label}"] = float(hit.mean())
            nonzero = est != 0.0
            if nonzero.any():
                report[f"post_selection_coverage_{label}"] = float(hit[nonzero].mean())
            else:
                report[f"post_selection_coverage_{label}"] = float("nan")
    return report
