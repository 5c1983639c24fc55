"""Acceptance gate: every criterion at its stated tolerance.

Run with ``pytest -s tests/test_acceptance.py`` to see one PASS line per
criterion; a failing criterion fails its test.
"""

import itertools
import time

import numpy as np
import pytest
from scipy.special import expit

from facmix.design import (
    FactorSpec,
    build_constraints,
    build_layout,
    encode_codes,
    encode_factorial,
    project_design,
)
from facmix.engine import EngineOptions, fit
from facmix.estimands import amce_conjoint, amce_factorial, amie, apply_restrictions
from facmix.inference import (
    bind_and_project,
    flat_free,
    louis_information,
    posterior_score,
    smoothed_log_posterior,
)
from facmix.penalty import build_fusion_penalties, penalty_value, propriety_certificate
from facmix.selection import degrees_of_freedom
from facmix.simulate import SimDesign

from conftest import make_forced_choice, manual_fit, simple_specs

pytestmark = pytest.mark.filterwarnings("ignore:AECM reached")

SUITE_SIZE = 100
SUITE_OPTS = dict(epsilon1=1e-10, epsilon2=1e-8, max_iterations=3000)


def _suite_instance(seed, rng):
    prob = make_forced_choice(seed=seed, clusters=2, n_resp=50, n_tasks=4,
                              log_mode=True, weights=True)
    lam = float(np.exp(rng.uniform(np.log(0.5), np.log(8.0))))
    return prob, lam


@pytest.fixture(scope="module")
def monotonicity_suite():
    """100 small random instances fitted with acceleration, timed."""
    rng = np.random.default_rng(20240199)
    fits = []
    start = time.time()
    for seed in range(SUITE_SIZE):
        prob, lam = _suite_instance(seed, rng)
        res = fit(prob["design"], prob["x_mod"], prob["ps"], 2, lam, 1,
                  EngineOptions(**SUITE_OPTS, accelerate=True, seed=seed))
        fits.append((seed, lam, prob, res))
    elapsed = time.time() - start
    return fits, elapsed


def test_criterion_1_em_monotonicity(monotonicity_suite):
    fits, elapsed = monotonicity_suite
    worst = 0.0
    for seed, lam, prob, res in fits:
        trail = np.asarray(res.diagnostics.log_posterior_trail)
        if len(trail) > 1:
            worst = min(worst, float(np.diff(trail).min()))
    assert worst >= -1e-8, f"log posterior decreased by {-worst:.3e}"
    assert elapsed < 120.0, f"suite took {elapsed:.1f}s"
    print(f"\nACCEPTANCE 1: PASS - {SUITE_SIZE} fits monotone within 1e-8 "
          f"(worst step {worst:.2e}), {elapsed:.1f}s total")


def _newton_logistic(x, y, iters=80):
    xx = np.hstack([np.ones((x.shape[0], 1)), x])
    b = np.zeros(xx.shape[1])
    for _ in range(iters):
        p = expit(xx @ b)
        h = xx.T @ ((p * (1 - p))[:, None] * xx)
        g = xx.T @ (y - p)
        step = np.linalg.solve(h + 1e-12 * np.eye(len(b)), g)
        b = b + step
        if np.abs(step).max() < 1e-12:
            break
    return b


def test_criterion_2_reduction_oracle():
    worst = 0.0
    for seed in range(20):
        prob = make_forced_choice(seed=1000 + seed, clusters=1, n_resp=50,
                                  n_tasks=4)
        res = fit(prob["design"], None, prob["ps"], K=1, lam=1e-8, gamma=1,
                  opts=EngineOptions(epsilon1=0.0, epsilon2=1e-9,
                                     max_iterations=5000))
        oracle = _newton_logistic(prob["design"].t, prob["design"].y)
        assert np.abs(oracle).max() < 25.0, "oracle instance is separable"
        lifted_oracle = prob["cm"].basis @ oracle[1:]
        err = max(abs(res.mu - oracle[0]),
                  float(np.abs(res.beta_raw[0] - lifted_oracle).max()))
        worst = max(worst, err)
    assert worst <= 1e-4
    print(f"\nACCEPTANCE 2: PASS - 20 K=1 reductions match Newton within "
          f"{worst:.2e} (tolerance 1e-4)")


def test_criterion_3_penalty_equivalence():
    specs = [FactorSpec("f1", ("1", "2", "3")), FactorSpec("f2", ("A", "B"))]
    lay = build_layout(specs, "all")
    cm = build_constraints(lay)
    ps = build_fusion_penalties(lay, cm)
    rng = np.random.default_rng(33)
    worst = 0.0
    for _ in range(1000):
        beta_red = rng.normal(size=cm.dim_reduced)
        raw = cm.basis @ beta_red
        m1 = [raw[lay.main_col(0, l)] for l in range(3)]
        m2 = [raw[lay.main_col(1, l)] for l in range(2)]
        cell = {(l, c): raw[lay.interaction_cell(0, 1, l, c)]
                for l in range(3) for c in range(2)}
        oracle = 0.0
        for a, b in ((0, 1), (0, 2), (1, 2)):
            oracle += np.sqrt((m1[a] - m1[b]) ** 2
                              + (cell[(a, 0)] - cell[(b, 0)]) ** 2
                              + (cell[(a, 1)] - cell[(b, 1)]) ** 2)
        oracle += np.sqrt((m2[0] - m2[1]) ** 2
                          + sum((cell[(l, 0)] - cell[(l, 1)]) ** 2
                                for l in range(3)))
        value = penalty_value(beta_red, ps)
        worst = max(worst, abs(value - oracle) / max(abs(oracle), 1e-300))
    assert worst <= 1e-10
    print(f"\nACCEPTANCE 3: PASS - 1000 draws match the four-term difference "
          f"norms within rel {worst:.2e} (tolerance 1e-10)")


def test_criterion_4_propriety():
    # standard design: stacked projected penalties have full column rank
    prob = make_forced_choice(seed=4, clusters=1, n_resp=10, n_tasks=1)
    rank, proper = propriety_certificate(prob["ps"], prob["cm"])
    assert proper and rank == prob["cm"].dim_reduced
    # deliberately delete a group: the certificate flips
    lay = build_layout(simple_specs(2, 2), "none")
    cm = build_constraints(lay)
    ps = build_fusion_penalties(lay, cm)
    rank_full, proper_full = propriety_certificate(ps, cm)
    assert proper_full
    ps.groups = ps.groups[:-1]
    ps.weights = ps.weights[:-1]
    rank_del, proper_del = propriety_certificate(ps, cm)
    assert not proper_del and rank_del < cm.dim_reduced
    print("\nACCEPTANCE 4: PASS - full pairwise stack proper; deleted group "
          "flips the certificate")


def test_criterion_5_gradient_hessian_oracles():
    prob = make_forced_choice(seed=11, clusters=2, n_resp=20, n_tasks=1,
                              moderator_count=1)
    res = fit(prob["design"], prob["x_mod"], prob["ps"], 2, 0.8, 1,
              EngineOptions(max_iterations=6, accelerate=False))
    rng = np.random.default_rng(11)
    res.state.beta = [b + 0.3 * rng.normal(size=b.size) for b in res.state.beta]
    res.state.phi[1:] += 0.2 * rng.normal(size=res.state.phi[1:].shape)
    res.state.mu += 0.1
    assert all(len(b) == 0 for b in res.state.bound)
    eps = 1e-4
    th0 = flat_free(res)
    f = lambda v: smoothed_log_posterior(res, v, eps)
    g = posterior_score(res, th0, eps)
    h = 1e-6
    g_fd = np.array([(f(th0 + h * e) - f(th0 - h * e)) / (2 * h)
                     for e in np.eye(th0.size)])
    score_rel = float(np.abs(g - g_fd).max() / max(1.0, np.abs(g_fd).max()))
    assert score_rel <= 1e-5
    bundle = louis_information(res, eps)
    h2 = 1e-4
    n_par = th0.size
    h_fd = np.zeros((n_par, n_par))
    eye = np.eye(n_par)
    for i in range(n_par):
        for j in range(i, n_par):
            ei, ej = h2 * eye[i], h2 * eye[j]
            h_fd[i, j] = (f(th0 + ei + ej) - f(th0 + ei - ej)
                          - f(th0 - ei + ej) + f(th0 - ei - ej)) / (4 * h2 * h2)
            h_fd[j, i] = h_fd[i, j]
    info_fd = -h_fd
    hess_rel = float(np.abs(bundle.info_matrix - info_fd).max()
                     / np.abs(info_fd).max())
    assert hess_rel <= 1e-3
    print(f"\nACCEPTANCE 5: PASS - score rel err {score_rel:.2e} (<=1e-5), "
          f"Louis vs FD Hessian rel err {hess_rel:.2e} (<=1e-3)")


def test_criterion_6_degrees_of_freedom_limits():
    prob = make_forced_choice(seed=61, clusters=2, n_resp=60, n_tasks=4,
                              moderator_count=2)
    p_x = prob["x_mod"].shape[1]
    res_lo = fit(prob["design"], prob["x_mod"], prob["ps"], 2, 1e-8, 1,
                 EngineOptions(max_iterations=600))
    df_lo = degrees_of_freedom(res_lo)
    target_lo = sum(b.size for b in res_lo.state.beta) + 1 + p_x
    res_hi = fit(prob["design"], prob["x_mod"], prob["ps"], 2, 1e6, 1,
                 EngineOptions(max_iterations=300))
    df_hi = degrees_of_freedom(res_hi)
    target_hi = 1 + p_x
    assert abs(df_lo - target_lo) <= 0.5
    assert abs(df_hi - target_hi) <= 0.5
    print(f"\nACCEPTANCE 6: PASS - df({1e-8:g})={df_lo:.2f} vs {target_lo} "
          f"and df(1e6)={df_hi:.2f} vs {target_hi} (within 0.5)")


def test_criterion_7_estimand_oracle():
    # J=3 binary toy with known coefficients on a balanced sample
    specs = simple_specs(3, 2)
    lay = build_layout(specs, "all")
    cm = build_constraints(lay)
    rng = np.random.default_rng(7)
    beta_raw = cm.basis @ (rng.normal(size=cm.dim_reduced) * 0.5)
    grids = np.meshgrid(*[np.arange(2)] * 3, indexing="ij")
    codes = np.repeat(np.column_stack([g.ravel() for g in grids]), 3, axis=0)
    dm = encode_factorial(codes, lay)
    dm.y = rng.integers(0, 2, len(codes)).astype(float)
    ps = build_fusion_penalties(lay, cm)
    red = project_design(dm, cm)
    res = manual_fit(red, ps, None, [beta_raw], mu=0.15)

    def y_hat(c):
        return expit(0.15 + encode_codes(np.array([c]), lay) @ beta_raw)[0]

    diffs = [y_hat([1, a, b]) - y_hat([0, a, b])
             for a, b in itertools.product((0, 1), repeat=2)]
    amce_est = amce_factorial(res, red, "f1", "l2", "l1", 0).estimate
    amce_err = abs(amce_est - np.mean(diffs))
    assert amce_err <= 1e-10
    ace = np.mean([y_hat([1, 1, b]) - y_hat([0, 0, b]) for b in (0, 1)])
    d1 = np.mean([y_hat([1, a, b]) - y_hat([0, a, b])
                  for a, b in itertools.product((0, 1), repeat=2)])
    d2 = np.mean([y_hat([a, 1, b]) - y_hat([a, 0, b])
                  for a, b in itertools.product((0, 1), repeat=2)])
    amie_est = amie(res, red, ("f1", "l2", "l1"), ("f2", "l2", "l1"), 0).estimate
    amie_err = abs(amie_est - (ace - d1 - d2))
    assert amie_err <= 1e-10

    # restriction drop rule: education/profession style example
    rspecs = [
        FactorSpec("education", ("4th", "hs", "college")),
        FactorSpec("profession", ("gardener", "waiter", "doctor"),
                   restriction_partners=(("education", (("doctor", "4th"),)),)),
    ]
    rlay = build_layout(rspecs, "all")
    rows = [(e, p) for e in range(3) for p in range(3) if not (e == 0 and p == 2)]
    rcodes = np.repeat(np.array(rows), 3, axis=0)
    rdm = encode_factorial(rcodes, rlay)
    rdm.y = rng.integers(0, 2, len(rcodes)).astype(float)
    rcm = build_constraints(rlay)
    rps = build_fusion_penalties(rlay, rcm)
    rred = project_design(rdm, rcm)
    rres = manual_fit(rred, rps, None,
                      [rcm.basis @ (rng.normal(size=rcm.dim_reduced) * 0.3)],
                      mu=0.0)
    mask = apply_restrictions(rred, ["profession"])
    assert not mask[rcodes[:, 0] == 0].any()  # all 4th-grade rows dropped
    assert mask[rcodes[:, 0] != 0].all()
    eff = amce_factorial(rres, rred, "profession", "waiter", "gardener", 0)
    assert eff.n_rows == int((rcodes[:, 0] != 0).sum())
    print(f"\nACCEPTANCE 7: PASS - AMCE err {amce_err:.1e}, AMIE err "
          f"{amie_err:.1e} (<=1e-10); restriction drop rule reproduced")


def test_criterion_8_fusion_semantics():
    # factor f2 has no true effect; find a lambda where it fully fuses while
    # f1 survives, then everything about f2 must be exactly zero
    rng = np.random.default_rng(88)
    specs = simple_specs(2, 3)
    lay = build_layout(specs, "all")
    n_resp, n_tasks = 150, 4
    n = n_resp * n_tasks
    left = rng.integers(0, 3, size=(n, 2))
    right = rng.integers(0, 3, size=(n, 2))
    resp = np.repeat(np.arange(n_resp), n_tasks)
    b1 = np.array([0.9, 0.0, -0.9])
    psi = b1[left[:, 0]] - b1[right[:, 0]]
    y = (rng.random(n) < expit(psi)).astype(float)
    from facmix.design import encode_forced_choice

    dm = encode_forced_choice(left, right, lay, respondent_ids=resp, y=y)
    cm = build_constraints(lay)
    ps = build_fusion_penalties(lay, cm)
    red = project_design(dm, cm)
    chosen = None
    for lam in (4.0, 8.0, 16.0, 32.0, 64.0):
        res = fit(red, None, ps, K=1, lam=lam, gamma=1,
                  opts=EngineOptions(max_iterations=500))
        comp = bind_and_project(res).fused_components(0)
        f2_fused = len(comp[1]) == 1
        f1_alive = len(comp[0]) > 1
        if f2_fused and f1_alive:
            chosen = (lam, res)
            break
    assert chosen is not None, "no lambda fully fused the null factor only"
    lam, res = chosen
    out = bind_and_project(res)
    bundle = louis_information(out)
    block = out.beta_block[0]
    f2_cols = [lay.main_col(1, l) for l in range(3)]
    f2_cells = [lay.interaction_cell(0, 1, a, b) for a in range(3)
                for b in range(3)]
    assert np.all(block[f2_cols] == 0.0)
    assert np.all(block[f2_cells] == 0.0)
    eff = amce_conjoint(out, red, "f2", "l2", "l1", 0, bundle)
    assert eff.estimate == 0.0 and eff.se == 0.0
    eff3 = amce_conjoint(out, red, "f2", "l3", "l1", 0, bundle)
    assert eff3.estimate == 0.0 and eff3.se == 0.0
    print(f"\nACCEPTANCE 8: PASS - at lambda={lam:g} the null factor fully "
          "fused: lifted coefficients, AMCEs, and SEs exactly 0")


def test_criterion_9_desk_scale_recovery():
    from facmix.cli import run_simulation

    sd = SimDesign(n_factors=5, n_levels=3, n_clusters=3, n_respondents=500,
                   n_tasks=5, moderator_count=5, coef_seed=2, data_seed=102,
                   truth_mc_draws=200_000, replicates=20)
    start = time.time()
    out = run_simulation(sd, config=None, lam=10.0, threads=1, out_dir=None)
    elapsed = time.time() - start
    med = out["report"]["median_correlation"]
    assert med >= 0.90, f"median correlation {med:.3f} < 0.90"
    assert elapsed < 1800.0, f"recovery run took {elapsed:.0f}s"
    print(f"\nACCEPTANCE 9: PASS - 20 replicates, median AMCE correlation "
          f"{med:.3f} (>=0.90), {elapsed:.0f}s (<30min)")


def test_criterion_10_squarem_safety(monotonicity_suite):
    fits, _ = monotonicity_suite
    worst = 0.0
    savings = []
    for seed, lam, prob, acc in fits:
        plain = fit(prob["design"], prob["x_mod"], prob["ps"], 2, lam, 1,
                    EngineOptions(**SUITE_OPTS, accelerate=False, seed=seed))
        diff = acc.lp - plain.lp
        worst = min(worst, diff)
        savings.append(1.0 - acc.diagnostics.iterations
                       / plain.diagnostics.iterations)
        assert diff >= -1e-6, (
            f"seed {seed}: accelerated lp {diff:.2e} below plain")
    med_saving = float(np.median(savings))
    assert med_saving >= 0.20
    print(f"\nACCEPTANCE 10: PASS - accelerated lp never below plain by more "
          f"than 1e-6 (worst {worst:.2e}); median iteration saving "
          f"{med_saving:.0%} (>=20%)")


def test_criterion_11_thread_determinism(tmp_path):
    import json

    from click.testing import CliRunner

    from facmix.cli import main, _sim_frames
    from facmix.simulate import draw_true_coefficients, generate_dataset

    sd = SimDesign(n_factors=3, n_levels=3, n_clusters=2, n_respondents=60,
                   n_tasks=3, moderator_count=2, coef_seed=5, data_seed=6)
    beta, phi = draw_true_coefficients(sd)
    data = generate_dataset(sd, beta, phi, 0)
    profiles, moderators = _sim_frames(sd, data, [[str(l + 1) for l in range(3)]] * 3)
    (tmp_path / "profiles.csv").write_text(profiles.to_csv(index=False))
    (tmp_path / "moderators.csv").write_text(moderators.to_csv(index=False))
    cfg = {
        "design": "forced_choice", "clusters": 2, "lambda": 2.0, "gamma": 1,
        "seed": 31, "max_iterations": 300,
        "factors": [{"name": f"f{j+1}", "levels": ["1", "2", "3"]}
                    for j in range(3)],
        "moderators": [{"name": "x1", "type": "numeric"},
                       {"name": "x2", "type": "numeric"}],
    }
    (tmp_path / "config.json").write_text(json.dumps(cfg))
    runner = CliRunner()
    blobs = {}
    for threads in (1, 2, 8):
        outdir = tmp_path / f"t{threads}"
        result = runner.invoke(main, [
            "fit", "--config", str(tmp_path / "config.json"),
            "--profiles", str(tmp_path / "profiles.csv"),
            "--moderators", str(tmp_path / "moderators.csv"),
            "--out", str(outdir), "--threads", str(threads)],
            catch_exceptions=False)
        assert result.exit_code == 0
        blobs[threads] = {name: (outdir / name).read_bytes()
                          for name in ("model.json", "effects.csv",
                                       "cluster_profiles.csv")}
    for threads in (2, 8):
        for name, blob in blobs[threads].items():
            assert blob == blobs[1][name], f"{name} differs at {threads} threads"
    print("\nACCEPTANCE 11: PASS - model artifacts byte-identical across "
          "1, 2, and 8 threads")
