"""Post-fit uncertainty via the Louis decomposition of the observed
information: E[-H^c] - Var[S^c] under the membership posterior, over the
free (unbound, constraint-projected) coordinates, with the penalty smoothed
by a small epsilon inside the square roots.  Gradients for derived
quantities propagate through the multivariate delta method.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .engine import (
    FitResult,
    _cluster_design,
    _log_pi,
    _make_problem,
    _pibar,
    _predictors,
    _respondent_loglik,
    _responsibilities,
    _sigma_phi_matrix,
    _tau_rates,
    guarded_final_bindings,
)

__all__ = [
    "CovarianceBundle",
    "bind_and_project",
    "louis_information",
    "delta_method",
    "posterior_score",
    "smoothed_log_posterior",
]

DEFAULT_EPSILON = 1e-4
_PINV_RTOL = 1e-10


@dataclass
class CovarianceBundle:
    info_matrix: np.ndarray
    covariance: np.ndarray
    free_index: list
    epsilon: float
    condition_number: float
    pseudo_inverse: bool
    null_directions: int
    offsets: dict

    def slice_of(self, name, k=None):
        return self.offsets[(name, k)]


def bind_and_project(fit_result: FitResult) -> FitResult:
    """Copy of the fit with every genuinely near-fused group bound.

    Post-fit states are normally fully bound already, so this is the
    identity projection; it exists so downstream consumers can rely on the
    free space excluding near-fused directions.  Sub-threshold groups whose
    binding would materially perturb the model (a degenerate projected
    geometry) stay active; the epsilon smoothing keeps them differentiable.
    """
    state = fit_result.state.copy()
    prob = _make_problem(fit_result.design, fit_result.moderators, fit_result.ps,
                         state.n_clusters)
    guarded_final_bindings(state, prob, fit_result.ps)
    state.responsibilities = _responsibilities(state, prob)
    out = FitResult(
        state=state,
        design=fit_result.design,
        moderators=fit_result.moderators,
        ps=fit_result.ps,
        lp=fit_result.lp,
        diagnostics=fit_result.diagnostics,
        fusion=fit_result.fusion,
        converged=fit_result.converged,
        lam=fit_result.lam,
        gamma=fit_result.gamma,
    )
    return out


def _layout_offsets(state, px):
    offsets = {}
    pos = 0
    offsets[("mu", None)] = slice(0, 1)
    pos = 1
    for k in range(state.n_clusters):
        d = state.beta[k].size
        offsets[("beta", k)] = slice(pos, pos + d)
        pos += d
    for v in range(1, state.n_clusters):
        offsets[("phi", v)] = slice(pos, pos + px)
        pos += px
    return offsets, pos


def _free_index(state, px):
    idx = [("mu",)]
    for k in range(state.n_clusters):
        idx += [("beta", k, i) for i in range(state.beta[k].size)]
    for v in range(1, state.n_clusters):
        idx += [("phi", v, l) for l in range(px)]
    return idx


def _set_from_flat(state, vec, px):
    state.mu = float(vec[0])
    pos = 1
    for k in range(state.n_clusters):
        d = state.beta[k].size
        state.beta[k] = vec[pos : pos + d].copy()
        pos += d
    for v in range(1, state.n_clusters):
        state.phi[v] = vec[pos : pos + px]
        pos += px


def flat_free(fit_result: FitResult) -> np.ndarray:
    state = fit_result.state
    parts = [np.array([state.mu])] + list(state.beta)
    for v in range(1, state.n_clusters):
        parts.append(state.phi[v])
    return np.concatenate(parts)


def _active_groups(state, ps, k):
    return [g for g in ps.groups if g.gid not in state.bound[k]]


def _smoothed_penalties(state, ps, epsilon):
    """Per cluster: smoothed penalty value, its gradient, and Hessian pieces."""
    K = state.n_clusters
    pen = np.zeros(K)
    grads = []
    hessians = []
    for k in range(K):
        v = state.vbases[k]
        d_k = state.beta[k].size
        gsum = np.zeros(d_k)
        hsum = np.zeros((d_k, d_k))
        total = 0.0
        for g in _active_groups(state, ps, k):
            dm = g.dmat if v is None else g.dmat @ v
            db = dm @ state.beta[k]
            q = float(db @ db) + epsilon
            root = np.sqrt(q)
            fb = dm.T @ db
            xi = ps.weights[g.gid]
            total += xi * root
            gsum += xi * fb / root
            hsum += xi * ((dm.T @ dm) / root - np.outer(fb, fb) / root**3)
        pen[k] = total
        grads.append(gsum)
        hessians.append(hsum)
    return pen, grads, hessians


def smoothed_log_posterior(fit_result: FitResult, theta=None,
                           epsilon: float = DEFAULT_EPSILON) -> float:
    """Observed log posterior with sqrt(beta'F beta + eps) smoothing."""
    state = fit_result.state.copy()
    prob = _make_problem(fit_result.design, fit_result.moderators, fit_result.ps,
                         state.n_clusters)
    px = 0 if prob.x_mod is None else prob.x_mod.shape[1]
    if theta is not None:
        _set_from_flat(state, np.asarray(theta, dtype=float), px)
    log_r = _log_pi(state, prob) + _respondent_loglik(state, prob)
    loglik = float(logsumexp(log_r, axis=1).sum())
    pibar = _pibar(state, prob)
    pen, _, _ = _smoothed_penalties(state, fit_result.ps, epsilon)
    m = fit_result.ps.rank_m
    if state.gamma:
        scale = state.lam * pibar ** state.gamma
        norm_term = float(np.sum(m * state.gamma * np.log(np.maximum(pibar, 1e-300))))
    else:
        scale = np.full(prob.K, state.lam)
        norm_term = 0.0
    prior_beta = float(prob.K * m * np.log(state.lam)) + norm_term - float(np.sum(scale * pen))
    prior_phi = 0.0
    if prob.K > 1:
        sig = _sigma_phi_matrix(prob.K)
        prior_phi = -0.5 * state.sigma2_phi * float(np.sum(state.phi[1:] * (sig @ state.phi[1:])))
    return loglik + prior_beta + prior_phi


def _common_pieces(fit_result, state, prob, epsilon):
    K = state.n_clusters
    psi = _predictors(state, prob)
    p = expit(psi)
    e = _responsibilities(state, prob, psi)
    mks = [_cluster_design(prob, state, k) for k in range(K)]
    resid = prob.y[:, None] - p  # (n, K)
    s_mu = np.zeros((prob.n_resp, K))
    s_beta = []
    for k in range(K):
        s_mu[:, k] = np.bincount(prob.resp_index, weights=resid[:, k],
                                 minlength=prob.n_resp)
        sb = np.zeros((prob.n_resp, state.beta[k].size))
        np.add.at(sb, prob.resp_index, resid[:, k][:, None] * mks[k])
        s_beta.append(sb)
    pen, pen_grads, pen_hess = _smoothed_penalties(state, fit_result.ps, epsilon)
    pibar = _pibar(state, prob)
    pi = np.exp(_log_pi(state, prob))
    return psi, p, e, mks, s_mu, s_beta, pen, pen_grads, pen_hess, pibar, pi


def _dpibar(pi, task_w, K):
    """dpibar[kp, v] = d pibar_{kp} / d phi_v coefficient rows (per respondent)."""
    # coefficient of X_i in the derivative: w_i * pi_ikp * (delta(kp,v) - pi_iv)
    coef = np.empty((K, K - 1, pi.shape[0]))
    for kp in range(K):
        for v in range(1, K):
            coef[kp, v - 1] = task_w * pi[:, kp] * ((1.0 if kp == v else 0.0) - pi[:, v])
    return coef


def posterior_score(fit_result: FitResult, theta=None,
                    epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Analytic score of the (epsilon-smoothed) observed log posterior.

    By Fisher's identity this is the membership-posterior expectation of the
    complete-data score; evaluated at ``theta`` (flat free coordinates) or
    at the fitted state.
    """
    state = fit_result.state.copy()
    prob = _make_problem(fit_result.design, fit_result.moderators, fit_result.ps,
                         state.n_clusters)
    px = 0 if prob.x_mod is None else prob.x_mod.shape[1]
    if theta is not None:
        _set_from_flat(state, np.asarray(theta, dtype=float), px)
    K = state.n_clusters
    (psi, p, e, mks, s_mu, s_beta, pen, pen_grads, pen_hess,
     pibar, pi) = _common_pieces(fit_result, state, prob, epsilon)
    m = fit_result.ps.rank_m
    lam, gamma = state.lam, state.gamma
    offsets, size = _layout_offsets(state, px)
    score = np.zeros(size)
    score[0] = float(np.sum(e * s_mu))
    scale = lam * pibar ** gamma if gamma else np.full(K, lam)
    for k in range(K):
        score[offsets[("beta", k)]] = e[:, k] @ s_beta[k] - scale[k] * pen_grads[k]
    if K > 1:
        sig = _sigma_phi_matrix(K)
        prior_grad = -state.sigma2_phi * (sig @ state.phi[1:])
        coef = _dpibar(pi, prob.task_weights, K)
        for v in range(1, K):
            sv = (e[:, v] - pi[:, v]) @ prob.x_mod + prior_grad[v - 1]
            if gamma:
                cvec = m * gamma / pibar - lam * gamma * pibar ** (gamma - 1) * pen
                for kp in range(K):
                    sv = sv + cvec[kp] * (coef[kp, v - 1] @ prob.x_mod)
            score[offsets[("phi", v)]] = sv
    return score


def louis_information(fit_result: FitResult,
                      epsilon: float = DEFAULT_EPSILON) -> CovarianceBundle:
    """Assemble E[-H^c] - Var[S^c] at the fitted state and invert it.

    Expectations run over the membership posterior; repeated tasks enter
    through per-respondent score sums.  Inversion is by symmetric spectral
    factorization with a relative pseudo-inverse threshold; flagged null
    directions get zero variance.
    """
    bound_fit = bind_and_project(fit_result)
    state = bound_fit.state
    prob = _make_problem(bound_fit.design, bound_fit.moderators, bound_fit.ps,
                         state.n_clusters)
    px = 0 if prob.x_mod is None else prob.x_mod.shape[1]
    K = state.n_clusters
    (psi, p, e, mks, s_mu, s_beta, pen, pen_grads, pen_hess,
     pibar, pi) = _common_pieces(bound_fit, state, prob, epsilon)
    m = bound_fit.ps.rank_m
    lam, gamma = state.lam, state.gamma
    offsets, size = _layout_offsets(state, px)
    e_rows = e[prob.resp_index]
    pq = p * (1.0 - p)  # (n, K)

    info = np.zeros((size, size))

    # ----- E[-H^c] -----
    info[0, 0] = float(np.sum(e_rows * pq))
    scale = lam * pibar ** gamma if gamma else np.full(K, lam)
    for k in range(K):
        sl = offsets[("beta", k)]
        wk = e_rows[:, k] * pq[:, k]
        cross = mks[k].T @ wk
        info[sl, 0] += cross
        info[0, sl] += cross
        info[sl, sl] += mks[k].T @ (wk[:, None] * mks[k]) + scale[k] * pen_hess[k]
    if K > 1:
        sig = _sigma_phi_matrix(K)
        coef = _dpibar(pi, prob.task_weights, K)
        dpibar_mat = np.empty((K, K - 1, px))
        for kp in range(K):
            for v in range(1, K):
                dpibar_mat[kp, v - 1] = coef[kp, v - 1] @ prob.x_mod
        # cross beta-phi blocks from the pibar chain (gamma = 1 only)
        if gamma:
            for k in range(K):
                u = gamma * pibar[k] ** (gamma - 1) * lam * pen_grads[k]
                for v in range(1, K):
                    block = np.outer(u, dpibar_mat[k, v - 1])
                    info[offsets[("beta", k)], offsets[("phi", v)]] += block
                    info[offsets[("phi", v)], offsets[("beta", k)]] += block.T
        # phi-phi blocks
        w_t = prob.task_weights
        for v in range(1, K):
            for u in range(v, K):
                lik = ((1.0 if v == u else 0.0) - pi[:, v]) * pi[:, u]
                block = prob.x_mod.T @ (lik[:, None] * prob.x_mod)
                block += state.sigma2_phi * sig[v - 1, u - 1] * np.eye(px)
                if gamma:
                    for kp in range(K):
                        # d2 pibar_kp / dphi_v dphi_u
                        c2 = w_t * (
                            pi[:, kp]
                            * ((1.0 if kp == u else 0.0) - pi[:, u])
                            * ((1.0 if kp == v else 0.0) - pi[:, v])
                            - pi[:, kp] * pi[:, v] * ((1.0 if v == u else 0.0) - pi[:, u])
                        )
                        d2pibar = prob.x_mod.T @ (c2[:, None] * prob.x_mod)
                        dv = dpibar_mat[kp, v - 1]
                        du = dpibar_mat[kp, u - 1]
                        # -m*gamma * d2 ln(pibar); note d2ln = -dd'/pibar^2 + d2/pibar
                        block += m * gamma * (
                            np.outer(dv, du) / pibar[kp] ** 2 - d2pibar / pibar[kp]
                        )
                        # +lam*gamma*pen*(...); gamma in {0,1} drops the first branch
                        term = pibar[kp] ** (gamma - 1) * d2pibar
                        if gamma not in (0, 1):
                            term = term + (gamma - 1) * pibar[kp] ** (gamma - 2) * np.outer(dv, du)
                        block += lam * gamma * pen[kp] * term
                info[offsets[("phi", v)], offsets[("phi", u)]] += block
                if u != v:
                    info[offsets[("phi", u)], offsets[("phi", v)]] += block.T

    # ----- Var[S^c] over p(Z | theta_hat) -----
    if K > 1:
        cov_z = np.einsum("ik,kl->ikl", e, np.eye(K)) - e[:, :, None] * e[:, None, :]
        cs_mu = np.einsum("ikl,il->ik", cov_z, s_mu)
        var = np.zeros((size, size))
        var[0, 0] = float(np.einsum("ik,ik->", s_mu, cs_mu))
        for k in range(K):
            sl = offsets[("beta", k)]
            var[sl, 0] += s_beta[k].T @ cs_mu[:, k]
            var[0, sl] = var[sl, 0]
            for l in range(k, K):
                block = s_beta[k].T @ (cov_z[:, k, l][:, None] * s_beta[l])
                var[sl, offsets[("beta", l)]] += block
                if l != k:
                    var[offsets[("beta", l)], sl] += block.T
        for v in range(1, K):
            slv = offsets[("phi", v)]
            var[slv, 0] += prob.x_mod.T @ cs_mu[:, v]
            var[0, slv] = var[slv, 0]
            for k in range(K):
                block = s_beta[k].T @ (cov_z[:, k, v][:, None] * prob.x_mod)
                var[offsets[("beta", k)], slv] += block
                var[slv, offsets[("beta", k)]] += block.T
            for u in range(v, K):
                block = prob.x_mod.T @ (cov_z[:, v, u][:, None] * prob.x_mod)
                var[slv, offsets[("phi", u)]] += block
                if u != v:
                    var[offsets[("phi", u)], slv] += block.T
        info -= var

    info = 0.5 * (info + info.T)
    vals, vecs = np.linalg.eigh(info)
    tol = _PINV_RTOL * max(np.abs(vals).max(), 1e-300)
    keep = np.abs(vals) > tol
    inv_vals = np.zeros_like(vals)
    inv_vals[keep] = 1.0 / vals[keep]
    cov = (vecs * inv_vals) @ vecs.T
    cov = 0.5 * (cov + cov.T)
    cond = float(np.abs(vals).max() / np.abs(vals[keep]).min()) if keep.any() else np.inf
    return CovarianceBundle(
        info_matrix=info,
        covariance=cov,
        free_index=_free_index(state, px),
        epsilon=epsilon,
        condition_number=cond,
        pseudo_inverse=bool((~keep).any()),
        null_directions=int((~keep).sum()),
        offsets=offsets,
    )


def delta_method(bundle: CovarianceBundle, gradient: np.ndarray) -> float:
    """SE = sqrt(g' Sigma g); tiny negative quadratic forms clip to zero."""
    g = np.asarray(gradient, dtype=float)
    return float(np.sqrt(max(g @ bundle.covariance @ g, 0.0)))
