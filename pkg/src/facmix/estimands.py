"""Per-cluster causal estimands from a fitted model: AMCEs, AMIEs,
marginal means, moderator marginal effects, and posterior cluster profiles.

Estimates are plug-in averages of predicted-probability contrasts over the
empirical treatment distribution (or a uniform enumeration for small
designs), with randomization restrictions honored by dropping profiles that
would make level contrasts incomparable.  Standard errors come from the
delta method against the Louis covariance.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit, logsumexp

from .design import DesignMatrix, _excluded_pairs, encode_codes
from .engine import FitResult
from .inference import CovarianceBundle, delta_method

__all__ = [
    "Effect",
    "apply_restrictions",
    "amce_factorial",
    "amce_conjoint",
    "amie",
    "marginal_means",
    "moderator_effect",
    "cluster_profiles",
]

_UNIFORM_CAP = 2_000_000


@dataclass
class Effect:
    estimate: float
    se: float | None
    cluster: int
    kind: str
    factor: object
    contrast: tuple
    n_rows: int | None = None
    mode: str = "empirical"
    gradient: np.ndarray | None = None
    note: str = ""


def _factor_index(design, factor) -> int:
    if isinstance(factor, (int, np.integer)):
        return int(factor)
    return design.layout.factor_index(str(factor))


def _level_index(design, j, level) -> int:
    if isinstance(level, (int, np.integer)):
        return int(level)
    return design.layout.specs[j].level_index(level)


def _partner_exclusions(design, j: int) -> dict:
    """S(h, j): per partner h, the h-levels excluded for some level of j."""
    specs = design.layout.specs
    out = {}
    for h in range(len(specs)):
        if h == j:
            continue
        cells = _excluded_pairs(specs, j, h)
        if cells:
            out[h] = {c for (_, c) in cells}
    return out


def apply_restrictions(design: DesignMatrix, factors) -> np.ndarray | tuple:
    """Row filter(s) keeping profiles comparable across all levels of the
    studied factor(s).

    For every partner factor ``h`` restricting any studied factor ``j``,
    rows whose ``h`` level is excluded for some level of ``j`` are dropped,
    even when the observed combination itself was allowed.  Factorial
    designs return one boolean mask; forced-choice designs return
    ``(mask_left, mask_right)`` since each side's effect only drops rows on
    that side's violations.
    """
    factors = [_factor_index(design, f) for f in factors]
    drop = {}
    for j in factors:
        for h, levels in _partner_exclusions(design, j).items():
            drop.setdefault(h, set()).update(levels)

    def mask_for(levels_mat):
        mask = np.ones(levels_mat.shape[0], dtype=bool)
        for h, bad in drop.items():
            mask &= ~np.isin(levels_mat[:, h], list(bad))
        return mask

    if design.kind == "factorial":
        mask = mask_for(design.levels)
        if not mask.any():
            raise ValueError("restriction filter removed every profile")
        return mask
    mask_l = mask_for(design.levels_left)
    mask_r = mask_for(design.levels_right)
    if not mask_l.any() or not mask_r.any():
        raise ValueError("restriction filter removed every profile")
    return mask_l, mask_r


def _grad_vector(bundle: CovarianceBundle, mu_part: float, beta_parts: dict,
                 phi_parts: dict | None = None) -> np.ndarray:
    size = bundle.info_matrix.shape[0]
    g = np.zeros(size)
    g[bundle.offsets[("mu", None)]] = mu_part
    for k, part in beta_parts.items():
        sl = bundle.offsets[("beta", k)]
        if part.size != sl.stop - sl.start:
            raise ValueError(
                "free-coordinate mismatch between fit and covariance bundle; "
                "compute both from the same bind_and_project-ed fit"
            )
        g[sl] = part
    for v, part in (phi_parts or {}).items():
        g[bundle.offsets[("phi", v)]] = part
    return g


def _predict_block(fit: FitResult, k: int, t_raw: np.ndarray):
    psi = fit.mu + t_raw @ fit.beta_block[k]
    p = expit(psi)
    return p, p * (1.0 - p)


def _avg_prob_grad(fit, k, t_raw, pq):
    """(d/d mu, d/d beta_k^free) of the average predicted probability."""
    n = t_raw.shape[0]
    g_mu = float(pq.mean())
    g_beta = fit.predictor_map(k).T @ (t_raw.T @ pq) / n
    return g_mu, g_beta


def _uniform_support(design, enumerate_excluding: list, restrict_factors: list):
    """Enumerate allowed level combinations of the factors not under study.

    ``enumerate_excluding`` lists the factors whose levels the caller will
    set; the partner-level drops come from every factor in
    ``restrict_factors`` (for AMIEs that is both factors).
    """
    lay = design.layout
    specs = lay.specs
    drop = {}
    for j in restrict_factors:
        for h, levels in _partner_exclusions(design, j).items():
            drop.setdefault(h, set()).update(levels)
    studied = set(enumerate_excluding)
    others = [f for f in range(len(specs)) if f not in studied]
    level_sets = []
    total = 1
    for f in others:
        allowed = [l for l in range(specs[f].n_levels) if l not in drop.get(f, set())]
        if not allowed:
            raise ValueError(
                f"restrictions leave no allowed level for factor {specs[f].name!r} "
                "in uniform marginalization"
            )
        level_sets.append(allowed)
        total *= len(allowed)
    if total > _UNIFORM_CAP:
        raise ValueError(
            f"uniform enumeration would need {total} combinations; "
            "use empirical marginalization"
        )
    codes = np.zeros((total, len(specs)), dtype=np.int64)
    if others:
        combos = np.array(list(itertools.product(*level_sets)), dtype=np.int64)
        codes[:, others] = combos
    # drop combinations that hit excluded cells among the other factors
    keep = np.ones(total, dtype=bool)
    for a, b in lay.interaction_pairs:
        if a in studied or b in studied:
            continue
        keep &= lay.cell_columns[(a, b)][codes[:, a], codes[:, b]] >= 0
    codes = codes[keep]
    if codes.shape[0] == 0:
        raise ValueError("restrictions empty the uniform marginalization support")
    return codes


def _contrast_factorial(fit, design, assignments_a, assignments_b, k, rows_codes):
    """Average of p(a) - p(b) over ``rows_codes`` plus its gradient pieces."""
    lay = design.layout

    def pieces(assign):
        codes = rows_codes.copy()
        for j, l in assign.items():
            codes[:, j] = l
        t = encode_codes(codes, lay)
        p, pq = _predict_block(fit, k, t)
        return p, pq, t

    pa, pqa, ta = pieces(assignments_a)
    pb, pqb, tb = pieces(assignments_b)
    est = float(np.mean(pa - pb))
    ga_mu, ga_beta = _avg_prob_grad(fit, k, ta, pqa)
    gb_mu, gb_beta = _avg_prob_grad(fit, k, tb, pqb)
    return est, ga_mu - gb_mu, ga_beta - gb_beta


def _amce_factorial_core(fit, design, j, l, lp, k, mode, restrict_factors):
    if mode == "uniform":
        rows = _uniform_support(design, [j], restrict_factors)
    else:
        mask = apply_restrictions(design, restrict_factors)
        rows = design.levels[mask]
    est, g_mu, g_beta = _contrast_factorial(fit, design, {j: l}, {j: lp}, k, rows)
    return est, g_mu, g_beta, rows.shape[0]


def amce_factorial(fit: FitResult, design: DesignMatrix, factor, level, baseline,
                   cluster: int, mode: str = "empirical",
                   bundle: CovarianceBundle | None = None) -> Effect:
    """Average marginal component effect of ``level`` vs ``baseline`` within
    one cluster, marginalizing over the other factors."""
    if design.kind != "factorial":
        raise ValueError("amce_factorial expects a factorial design")
    j = _factor_index(design, factor)
    l = _level_index(design, j, level)
    lp = _level_index(design, j, baseline)
    name = design.layout.specs[j].name
    contrast = (design.layout.specs[j].levels[l], design.layout.specs[j].levels[lp])
    if l == lp or fit.is_fused(cluster, j, l, lp):
        note = "identical levels" if l == lp else "fused to baseline"
        return Effect(0.0, 0.0 if bundle is not None else None, cluster, "amce",
                      name, contrast, mode=mode, note=note)
    est, g_mu, g_beta, n_rows = _amce_factorial_core(fit, design, j, l, lp, cluster,
                                                     mode, [j])
    se = grad = None
    if bundle is not None:
        grad = _grad_vector(bundle, g_mu, {cluster: g_beta})
        se = delta_method(bundle, grad)
    return Effect(est, se, cluster, "amce", name, contrast, n_rows, mode, grad)


def _conjoint_side_terms(fit, design, side, assign_a, assign_b, k, mask):
    """Average p(a)-p(b) manipulating one side, opponent at its observed value."""
    lay = design.layout
    base_l = design.levels_left[mask]
    base_r = design.levels_right[mask]

    def pieces(assign):
        cl, cr = base_l.copy(), base_r.copy()
        target = cl if side == "left" else cr
        for j, l in assign.items():
            target[:, j] = l
        t = encode_codes(cl, lay) - encode_codes(cr, lay)
        p, pq = _predict_block(fit, k, t)
        return p, pq, t

    pa, pqa, ta = pieces(assign_a)
    pb, pqb, tb = pieces(assign_b)
    est = float(np.mean(pa - pb))
    ga_mu, ga_beta = _avg_prob_grad(fit, k, ta, pqa)
    gb_mu, gb_beta = _avg_prob_grad(fit, k, tb, pqb)
    return est, ga_mu - gb_mu, ga_beta - gb_beta


def _amce_conjoint_core(fit, design, j, l, lp, k, restrict_factors):
    mask_l, mask_r = apply_restrictions(design, restrict_factors)
    # left-profile effect on Pr(Y=1); right-profile effect on Pr(Y=0)
    est_l, gmu_l, gb_l = _conjoint_side_terms(fit, design, "left", {j: l}, {j: lp},
                                              k, mask_l)
    est_r, gmu_r, gb_r = _conjoint_side_terms(fit, design, "right", {j: lp}, {j: l},
                                              k, mask_r)
    est = 0.5 * (est_l + est_r)
    g_mu = 0.5 * (gmu_l + gmu_r)
    g_beta = 0.5 * (gb_l + gb_r)
    return est, g_mu, g_beta, int(mask_l.sum() + mask_r.sum())


def amce_conjoint(fit: FitResult, design: DesignMatrix, factor, level, baseline,
                  cluster: int, bundle: CovarianceBundle | None = None) -> Effect:
    """Forced-choice AMCE: the left- and right-profile effects against the
    empirical opponent distribution, averaged."""
    if design.kind != "forced_choice":
        raise ValueError("amce_conjoint expects a forced-choice design")
    j = _factor_index(design, factor)
    l = _level_index(design, j, level)
    lp = _level_index(design, j, baseline)
    name = design.layout.specs[j].name
    contrast = (design.layout.specs[j].levels[l], design.layout.specs[j].levels[lp])
    if l == lp or fit.is_fused(cluster, j, l, lp):
        note = "identical levels" if l == lp else "fused to baseline"
        return Effect(0.0, 0.0 if bundle is not None else None, cluster, "amce",
                      name, contrast, note=note)
    est, g_mu, g_beta, n_rows = _amce_conjoint_core(fit, design, j, l, lp, cluster, [j])
    se = grad = None
    if bundle is not None:
        grad = _grad_vector(bundle, g_mu, {cluster: g_beta})
        se = delta_method(bundle, grad)
    return Effect(est, se, cluster, "amce", name, contrast, n_rows, "empirical", grad)


def amie(fit: FitResult, design: DesignMatrix, first, second, cluster: int,
         mode: str = "empirical", bundle: CovarianceBundle | None = None) -> Effect:
    """Average marginal interaction effect of changing factors ``first=(j, l, f)``
    and ``second=(s, q, r)`` jointly, minus the two AMCEs.

    All three components share restriction filters based on both factors'
    partners, so the decomposition is internally consistent.
    """
    j, l, f = first
    s, q, r = second
    j = _factor_index(design, j)
    s = _factor_index(design, s)
    if j == s:
        raise ValueError("AMIE needs two distinct factors")
    l = _level_index(design, j, l)
    f = _level_index(design, j, f)
    q = _level_index(design, s, q)
    r = _level_index(design, s, r)
    both = [j, s]
    if design.kind == "factorial":
        if mode == "uniform":
            rows = _uniform_support(design, both, both)
        else:
            mask = apply_restrictions(design, both)
            rows = design.levels[mask]
        ace, ace_mu, ace_b = _contrast_factorial(fit, design, {j: l, s: q},
                                                 {j: f, s: r}, cluster, rows)
        d1, d1_mu, d1_b, _ = _amce_factorial_core(fit, design, j, l, f, cluster,
                                                  mode, both)
        d2, d2_mu, d2_b, _ = _amce_factorial_core(fit, design, s, q, r, cluster,
                                                  mode, both)
        n_rows = rows.shape[0]
    else:
        mask_l, mask_r = apply_restrictions(design, both)
        el, gml, gbl = _conjoint_side_terms(fit, design, "left", {j: l, s: q},
                                            {j: f, s: r}, cluster, mask_l)
        er, gmr, gbr = _conjoint_side_terms(fit, design, "right", {j: f, s: r},
                                            {j: l, s: q}, cluster, mask_r)
        ace, ace_mu, ace_b = 0.5 * (el + er), 0.5 * (gml + gmr), 0.5 * (gbl + gbr)
        d1, d1_mu, d1_b, _ = _amce_conjoint_core(fit, design, j, l, f, cluster, both)
        d2, d2_mu, d2_b, _ = _amce_conjoint_core(fit, design, s, q, r, cluster, both)
        n_rows = int(mask_l.sum() + mask_r.sum())
    est = ace - d1 - d2
    se = grad = None
    if bundle is not None:
        grad = _grad_vector(bundle, ace_mu - d1_mu - d2_mu,
                            {cluster: ace_b - d1_b - d2_b})
        se = delta_method(bundle, grad)
    sj, ss = design.layout.specs[j], design.layout.specs[s]
    return Effect(est, se, cluster, "amie", (sj.name, ss.name),
                  ((sj.levels[l], sj.levels[f]), (ss.levels[q], ss.levels[r])),
                  n_rows, mode, grad)


def marginal_means(fit: FitResult, design: DesignMatrix, factor, level,
                   cluster: int, bundle: CovarianceBundle | None = None) -> Effect:
    """Probability a profile carrying ``level`` is chosen, baseline-free.

    Averages the left-side choice probability and the right-side rejection
    probability over the empirical distribution; randomization restrictions
    are deliberately ignored so the estimate centers on one half.
    """
    if design.kind != "forced_choice":
        raise ValueError("marginal means are defined for forced-choice designs")
    j = _factor_index(design, factor)
    l = _level_index(design, j, level)
    lay = design.layout
    cl = design.levels_left.copy()
    cl[:, j] = l
    t_left = encode_codes(cl, lay) - encode_codes(design.levels_right, lay)
    p_left, pq_left = _predict_block(fit, cluster, t_left)
    cr = design.levels_right.copy()
    cr[:, j] = l
    t_right = encode_codes(design.levels_left, lay) - encode_codes(cr, lay)
    p_right, pq_right = _predict_block(fit, cluster, t_right)
    est = 0.5 * float(np.mean(p_left) + np.mean(1.0 - p_right))
    se = grad = None
    if bundle is not None:
        gl_mu, gl_b = _avg_prob_grad(fit, cluster, t_left, pq_left)
        gr_mu, gr_b = _avg_prob_grad(fit, cluster, t_right, pq_right)
        grad = _grad_vector(bundle, 0.5 * (gl_mu - gr_mu),
                            {cluster: 0.5 * (gl_b - gr_b)})
        se = delta_method(bundle, grad)
    spec = lay.specs[j]
    return Effect(est, se, cluster, "marginal_mean", spec.name, (spec.levels[l],),
                  design.n_rows, "empirical", grad)


def moderator_effect(fit: FitResult, covariate, x0, x1, cluster: int,
                     bundle: CovarianceBundle | None = None,
                     moderator_names: list | None = None) -> Effect:
    """Average change in cluster-membership probability when one moderator
    moves from ``x0`` to ``x1``, other moderators at their observed values."""
    x = fit.moderators
    if x is None:
        raise ValueError("fit has no moderators")
    if isinstance(covariate, str):
        if moderator_names is None or covariate not in moderator_names:
            raise ValueError(f"unknown moderator {covariate!r}")
        idx = moderator_names.index(covariate)
    else:
        idx = int(covariate)
    if np.ptp(x[:, idx]) == 0.0:
        warnings.warn(f"moderator column {covariate!r} is constant", stacklevel=2)
    K = fit.n_clusters

    def pi_of(xmat):
        logits = xmat @ fit.phi.T
        return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))

    x1m = x.copy()
    x1m[:, idx] = x1
    x0m = x.copy()
    x0m[:, idx] = x0
    pi1, pi0 = pi_of(x1m), pi_of(x0m)
    est = float(np.mean(pi1[:, cluster] - pi0[:, cluster]))
    se = grad = None
    if bundle is not None:
        phi_parts = {}
        for v in range(1, K):
            dv1 = (pi1[:, cluster] * ((1.0 if cluster == v else 0.0) - pi1[:, v]))[:, None] * x1m
            dv0 = (pi0[:, cluster] * ((1.0 if cluster == v else 0.0) - pi0[:, v]))[:, None] * x0m
            phi_parts[v] = (dv1 - dv0).mean(axis=0)
        grad = _grad_vector(bundle, 0.0, {}, phi_parts)
        se = delta_method(bundle, grad)
    return Effect(est, se, cluster, "moderator", covariate, (x0, x1),
                  x.shape[0], "empirical", grad)


def _weighted_quantile(x, w, qs):
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order]
    cw = (np.cumsum(w) - 0.5 * w) / w.sum()
    return np.interp(qs, cw, x)


def cluster_profiles(fit: FitResult, moderators: pd.DataFrame) -> pd.DataFrame:
    """Responsibility-weighted moderator summaries per cluster.

    Numeric moderators get weighted mean/std/quartiles; categorical ones get
    weighted level frequencies.  Also reports each cluster's average
    posterior membership and average prior probability.
    """
    resp = fit.state.responsibilities
    if resp is None:
        raise ValueError("fit carries no responsibilities")
    K = resp.shape[1]
    rows = []
    for k in range(K):
        w = resp[:, k]
        wsum = w.sum()
        rows.append((k, "_cluster", "avg_responsibility", float(wsum / resp.shape[0])))
        if fit.moderators is not None and fit.n_clusters > 1:
            logits = fit.moderators @ fit.phi.T
            pi = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
            rows.append((k, "_cluster", "avg_prior_probability", float(pi[:, k].mean())))
        for col in moderators.columns:
            series = moderators[col]
            if pd.api.types.is_numeric_dtype(series):
                x = series.to_numpy(dtype=float)
                rows.append((k, col, "mean", float(np.sum(w * x) / wsum)))
                var = float(np.sum(w * (x - np.sum(w * x) / wsum) ** 2) / wsum)
                rows.append((k, col, "std", float(np.sqrt(max(var, 0.0)))))
                q25, q50, q75 = _weighted_quantile(x, w, [0.25, 0.5, 0.75])
                rows.append((k, col, "q25", float(q25)))
                rows.append((k, col, "median", float(q50)))
                rows.append((k, col, "q75", float(q75)))
            else:
                vals = series.astype(str).to_numpy()
                for lvl in sorted(set(vals)):
                    share = float(np.sum(w[vals == lvl]) / wsum)
                    rows.append((k, col, f"share[{lvl}]", share))
    return pd.DataFrame(rows, columns=["cluster", "moderator", "statistic", "value"])
