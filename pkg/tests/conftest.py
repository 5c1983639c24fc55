import numpy as np
import pytest
from scipy.special import expit

from facmix.design import (
    FactorSpec,
    build_constraints,
    build_layout,
    encode_factorial,
    encode_forced_choice,
    project_design,
)
from facmix.engine import EngineOptions, FitDiagnostics, FitResult, ModelState, fit
from facmix.penalty import (
    FusionReport,
    build_fusion_penalties,
    expand_log,
    standardization_weights,
)


def simple_specs(n_factors=3, n_levels=3, ordered=()):
    labels = tuple(f"l{i+1}" for i in range(n_levels))
    return [FactorSpec(f"f{j+1}", labels, ordered=(j in ordered))
            for j in range(n_factors)]


def draw_centered_beta(rng, n_factors, n_levels, scale=0.5):
    b = rng.normal(size=(n_factors, n_levels)) * scale
    return b - b.mean(axis=1, keepdims=True)


def make_forced_choice(seed=0, n_factors=3, n_levels=3, n_resp=60, n_tasks=4,
                       clusters=2, interactions="all", log_mode=False,
                       weights=False, beta_scale=0.6, phi_scale=1.5,
                       moderator_count=2, mu_true=0.0):
    """Simulated forced-choice problem plus everything a fit needs."""
    rng = np.random.default_rng(seed)
    specs = simple_specs(n_factors, n_levels)
    lay = build_layout(specs, interactions)
    n = n_resp * n_tasks
    left = rng.integers(0, n_levels, size=(n, n_factors))
    right = rng.integers(0, n_levels, size=(n, n_factors))
    resp = np.repeat(np.arange(n_resp), n_tasks)
    x_mod = np.hstack([np.ones((n_resp, 1)),
                       rng.normal(size=(n_resp, moderator_count))])
    if clusters > 1:
        phi = np.vstack([np.zeros(moderator_count + 1),
                         rng.normal(size=(clusters - 1, moderator_count + 1)) * phi_scale])
        pi = np.exp(x_mod @ phi.T)
        pi /= pi.sum(axis=1, keepdims=True)
        z = (rng.random(n_resp)[:, None] > np.cumsum(pi, axis=1)).sum(axis=1)
    else:
        phi = np.zeros((1, moderator_count + 1))
        z = np.zeros(n_resp, dtype=int)
    beta_true = np.stack([draw_centered_beta(rng, n_factors, n_levels, beta_scale)
                          for _ in range(clusters)])
    psi = np.full(n, mu_true)
    for j in range(n_factors):
        psi += (beta_true[z[resp], j, left[:, j]]
                - beta_true[z[resp], j, right[:, j]])
    y = (rng.random(n) < expit(psi)).astype(float)
    dm = encode_forced_choice(left, right, lay, respondent_ids=resp, y=y)
    cm = build_constraints(lay)
    ps = build_fusion_penalties(lay, cm)
    if log_mode:
        dm, ps, cm = expand_log(dm, ps, cm)
    if weights:
        standardization_weights(dm, ps)
    reduced = project_design(dm, cm)
    return {
        "design": reduced, "design_raw": dm, "ps": ps, "cm": cm, "layout": lay,
        "x_mod": x_mod if clusters > 1 else None, "y": y, "z_true": z,
        "beta_true": beta_true, "phi_true": phi, "specs": specs,
        "left": left, "right": right, "resp": resp,
    }


def make_factorial(seed=0, n_factors=3, n_levels=2, n_rows=None, beta_raw=None,
                   mu=0.0, interactions="all", balanced=False, replicates=4,
                   specs=None):
    """Factorial design with outcomes from a supplied or random raw beta."""
    rng = np.random.default_rng(seed)
    if specs is None:
        specs = simple_specs(n_factors, n_levels)
    lay = build_layout(specs, interactions)
    if balanced:
        grids = np.meshgrid(*[np.arange(s.n_levels) for s in specs], indexing="ij")
        codes = np.column_stack([g.ravel() for g in grids])
        codes = np.repeat(codes, replicates, axis=0)
    else:
        codes = np.column_stack([rng.integers(0, s.n_levels, size=n_rows)
                                 for s in specs])
    dm = encode_factorial(codes, lay)
    cm = build_constraints(lay)
    if beta_raw is None:
        beta_red = rng.normal(size=cm.dim_reduced) * 0.5
        beta_raw = cm.basis @ beta_red
    psi = mu + dm.t @ beta_raw
    dm.y = (rng.random(len(psi)) < expit(psi)).astype(float)
    ps = build_fusion_penalties(lay, cm)
    reduced = project_design(dm, cm)
    return {"design": reduced, "design_raw": dm, "ps": ps, "cm": cm,
            "layout": lay, "beta_raw": beta_raw, "mu": mu, "codes": codes,
            "specs": specs}


def manual_fit(design, ps, moderators, beta_raw_list, mu=0.0, phi=None,
               lam=1.0, gamma=1, bound=None):
    """FitResult wrapper around hand-set coefficients (no optimization)."""
    K = len(beta_raw_list)
    basis = design.cm.basis
    if phi is None:
        px = 1 if moderators is None else moderators.shape[1]
        phi = np.zeros((K, px))
    state = ModelState(
        mu=mu,
        beta=[basis.T @ np.asarray(b, dtype=float) for b in beta_raw_list],
        phi=np.asarray(phi, dtype=float),
        lam=lam,
        gamma=gamma,
        sigma2_phi=0.25,
        vbases=[None] * K,
        bound=[set() for _ in range(K)],
    )
    fusion = FusionReport(bound=[set() for _ in range(K)], events=[],
                          n_constraints=[0] * K)
    res = FitResult(state=state, design=design, moderators=moderators, ps=ps,
                    lp=np.nan, diagnostics=FitDiagnostics(), fusion=fusion,
                    converged=True, lam=lam, gamma=gamma)
    if bound:
        from facmix.engine import bind_pending
        bind_pending(state, ps, bound)
        res.fusion.bound = [set(s) for s in state.bound]
    from facmix.engine import _make_problem, _responsibilities
    prob = _make_problem(design, moderators, ps, K)
    state.responsibilities = _responsibilities(state, prob)
    return res


@pytest.fixture(scope="session")
def small_k2_fit():
    """A converged two-cluster fit reused by several test modules."""
    prob = make_forced_choice(seed=11, clusters=2, n_resp=80, n_tasks=4,
                              log_mode=True, weights=True)
    res = fit(prob["design"], prob["x_mod"], prob["ps"], K=2, lam=1.5, gamma=1,
              opts=EngineOptions(max_iterations=500))
    return prob, res


@pytest.fixture(scope="session")
def small_k1_fit():
    prob = make_forced_choice(seed=13, clusters=1, n_resp=70, n_tasks=4)
    res = fit(prob["design"], None, prob["ps"], K=1, lam=1.0, gamma=1,
              opts=EngineOptions(max_iterations=500))
    return prob, res
