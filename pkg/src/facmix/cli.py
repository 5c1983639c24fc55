"""Batch front end: fit, tune, effects, simulate, validate.

All artifacts are deterministic functions of (inputs, config, seed): model
JSON, flat effects CSV, cluster-profile CSV, and a machine-readable run
manifest.  Exit codes: 2 input error, 3 non-convergence under --strict,
4 improper prior.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import __version__
from .dataio import (
    Dataset,
    InputError,
    RunConfig,
    canonical_json,
    config_hash,
    ingest,
    prepare_problem,
)
from .design import DesignMatrix
from .engine import EngineOptions, FitResult, ModelState, fit as engine_fit
from .estimands import (
    amce_conjoint,
    amce_factorial,
    amie,
    cluster_profiles,
    marginal_means,
    moderator_effect,
)
from .inference import bind_and_project, louis_information
from .penalty import propriety_certificate
from .selection import EvalRecord, bic, degrees_of_freedom, observed_loglik, tune_lambda
from .simulate import (
    SimDesign,
    draw_true_coefficients,
    generate_dataset,
    resolve_labels,
    score_recovery,
    true_amces,
)

EXIT_INPUT = 2
EXIT_NONCONVERGED = 3
EXIT_IMPROPER = 4


def _load_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))


def _read_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"respondent_id": str, "task_id": str})


def _engine_options(config: RunConfig, seed) -> EngineOptions:
    return EngineOptions(
        epsilon1=config.epsilon1,
        epsilon2=config.epsilon2,
        max_iterations=config.max_iterations,
        accelerate=config.accelerate,
        sigma2_phi=config.sigma2_phi,
        seed=config.seed if seed is None else int(seed),
    )


def _fit_once(ds: Dataset, config: RunConfig, lam: float, opts: EngineOptions,
              warm=None):
    design, ps, cm = prepare_problem(ds.design, config)
    if not ps.proper:
        raise click.exceptions.Exit(EXIT_IMPROPER)
    if warm is not None:
        opts = EngineOptions(**{**opts.__dict__, "init_state": warm})
    res = engine_fit(design, ds.x_mod, ps, config.clusters, lam, config.gamma, opts)
    return res


def _tune(ds: Dataset, config: RunConfig, opts: EngineOptions):
    def problem(lam, warm_rec):
        warm = warm_rec.fit.warm_start() if warm_rec is not None and warm_rec.fit else None
        res = _fit_once(ds, config, lam, opts, warm=warm)
        df = degrees_of_freedom(res)
        b = bic(res, df)
        return EvalRecord(lam=lam, df=df, bic=b, loglik=observed_loglik(res),
                          fit=res, converged=res.converged)

    return tune_lambda(problem, config.lambda_bounds, config.tune_budget)


def _run_fit(ds: Dataset, config: RunConfig, opts: EngineOptions):
    tune_result = None
    if config.lam == "auto":
        tune_result = _tune(ds, config, opts)
        res = tune_result.best.fit
        df, b = tune_result.best.df, tune_result.best.bic
    else:
        res = _fit_once(ds, config, float(config.lam), opts)
        df = degrees_of_freedom(res)
        b = bic(res, df)
    res.df, res.bic = df, b
    return res, tune_result


def _moderator_effects_table(pfit, bundle, ds: Dataset):
    effects = []
    if pfit.n_clusters < 2 or pfit.moderators is None:
        return effects
    x = pfit.moderators
    for idx, name in enumerate(ds.moderator_names):
        if name == "(intercept)":
            continue
        col = x[:, idx]
        if set(np.unique(col)) <= {0.0, 1.0}:
            x0, x1 = 0.0, 1.0
        else:
            x0, x1 = float(np.percentile(col, 25)), float(np.percentile(col, 75))
        for k in range(pfit.n_clusters):
            eff = moderator_effect(pfit, idx, x0, x1, k, bundle,
                                   moderator_names=ds.moderator_names)
            eff.factor = name
            effects.append(eff)
    return effects


def _effects_table(pfit, bundle, ds: Dataset, config: RunConfig) -> pd.DataFrame:
    design = ds.design
    layout = design.layout
    conf = config.effects or {}
    baselines = conf.get("baselines", {})
    rows = []

    def record(eff, level, baseline):
        rows.append({
            "cluster": eff.cluster,
            "kind": eff.kind,
            "factor": str(eff.factor),
            "level": level,
            "baseline": baseline,
            "estimate": eff.estimate,
            "se": eff.se,
            "n_rows": eff.n_rows,
            "mode": eff.mode,
            "note": eff.note,
        })

    amce_fn = amce_conjoint if design.kind == "forced_choice" else amce_factorial
    for j, spec in enumerate(layout.specs):
        base = str(baselines.get(spec.name, spec.levels[0]))
        for lvl in spec.levels:
            if lvl == base:
                continue
            for k in range(pfit.n_clusters):
                if design.kind == "forced_choice":
                    eff = amce_fn(pfit, design, j, lvl, base, k, bundle)
                else:
                    eff = amce_fn(pfit, design, j, lvl, base, k, bundle=bundle)
                record(eff, lvl, base)
    if design.kind == "forced_choice" and conf.get("marginal_means", True):
        for j, spec in enumerate(layout.specs):
            for lvl in spec.levels:
                for k in range(pfit.n_clusters):
                    eff = marginal_means(pfit, design, j, lvl, k, bundle)
                    record(eff, lvl, "")
    amie_pairs = conf.get("amie_pairs", "none")
    if amie_pairs == "all":
        pair_list = [(layout.specs[a].name, layout.specs[b].name)
                     for a, b in layout.interaction_pairs]
    elif amie_pairs in ("none", None):
        pair_list = []
    else:
        pair_list = [tuple(p) for p in amie_pairs]
    for fa, fb in pair_list:
        ja, jb = layout.factor_index(fa), layout.factor_index(fb)
        sa, sb = layout.specs[ja], layout.specs[jb]
        base_a = str(baselines.get(sa.name, sa.levels[0]))
        base_b = str(baselines.get(sb.name, sb.levels[0]))
        for la in sa.levels:
            if la == base_a:
                continue
            for lb in sb.levels:
                if lb == base_b:
                    continue
                for k in range(pfit.n_clusters):
                    eff = amie(pfit, design, (ja, la, base_a), (jb, lb, base_b),
                               k, bundle=bundle)
                    record(eff, f"{la}&{lb}", f"{base_a}&{base_b}")
    for eff in _moderator_effects_table(pfit, bundle, ds):
        record(eff, f"{eff.contrast[0]}->{eff.contrast[1]}", "")
    return pd.DataFrame(rows)


def _model_artifact(res: FitResult, ds: Dataset, config: RunConfig, bundle,
                    tune_result, seed) -> dict:
    ps = res.ps
    fusion = {
        str(k): sorted(
            [{"group": g, "factor": ps.groups[g].factor, "pair": list(ps.groups[g].pair),
              "kind": ps.groups[g].kind} for g in res.fusion.bound[k]],
            key=lambda d: d["group"])
        for k in range(res.n_clusters)
    }
    art = {
        "version": __version__,
        "config_hash": config_hash(config),
        "seed": int(config.seed if seed is None else seed),
        "lambda": res.lam,
        "gamma": res.gamma,
        "clusters": res.n_clusters,
        "mu": res.mu,
        "beta_block": [b.tolist() for b in res.beta_block],
        "beta_raw_ext": [b.tolist() for b in res.beta_raw],
        "beta_reduced": [b.tolist() for b in res.state.beta],
        "phi": res.phi.tolist(),
        "moderator_names": ds.moderator_names,
        "responsibilities": res.state.responsibilities.tolist(),
        "df": res.df,
        "bic": res.bic,
        "log_likelihood": observed_loglik(res),
        "log_posterior": res.lp,
        "diagnostics": {
            "iterations": res.diagnostics.iterations,
            "converged": res.converged,
            "converged_by": res.diagnostics.converged_by,
            "log_posterior_trail": res.diagnostics.log_posterior_trail,
            "squarem_rounds": res.diagnostics.squarem_rounds,
            "squarem_steps_rejected": res.diagnostics.squarem_steps_rejected,
            "binding_retries": res.diagnostics.binding_retries,
            "degenerate_clusters": sorted(res.diagnostics.degenerate_clusters),
        },
        "fusion": {"bound_groups": fusion,
                   "n_constraints": res.fusion.n_constraints},
        "propriety": {"rank_m": ps.rank_m, "proper": ps.proper,
                      "reduced_dim": ps.reduced_dim, "log_mode": ps.log_mode},
        "penalty_weights": ps.weights.tolist(),
        "ingest_report": ds.report,
    }
    if bundle is not None:
        art["covariance"] = {
            "matrix": bundle.covariance.tolist(),
            "epsilon": bundle.epsilon,
            "condition_number": bundle.condition_number,
            "pseudo_inverse": bundle.pseudo_inverse,
            "free_index": [list(t) for t in bundle.free_index],
        }
    if tune_result is not None:
        art["lambda_path"] = {
            "evaluations": [{"lambda": e.lam, "df": e.df, "bic": e.bic,
                             "loglik": e.loglik, "converged": e.converged}
                            for e in tune_result.evaluations],
            "best_lambda": tune_result.best_lambda,
            "boundary": tune_result.boundary,
            "search_trace": tune_result.search_trace,
        }
    return art


def _write(out_dir: Path, name: str, content: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(content)
    return path


def _manifest(config: RunConfig, seed, threads, command, artifacts, extra=None):
    man = {
        "version": __version__,
        "command": command,
        "config_hash": config_hash(config),
        "seed": int(config.seed if seed is None else seed),
        "threads": threads,
        "artifacts": sorted(str(a) for a in artifacts),
    }
    if extra:
        man.update(extra)
    return man


@click.group()
def main():
    """Mixture-of-experts analysis of factorial and conjoint experiments."""


_shared = [
    click.option("--config", "config_path", required=True, type=click.Path(exists=True)),
    click.option("--profiles", "profiles_path", required=True, type=click.Path(exists=True)),
    click.option("--moderators", "moderators_path", type=click.Path(exists=True)),
    click.option("--out", "out_dir", required=True, type=click.Path()),
    click.option("--seed", type=int, default=None),
    click.option("--threads", type=int, default=1),
    click.option("--strict", is_flag=True, default=False),
]


def _with_shared(f):
    for opt in reversed(_shared):
        f = opt(f)
    return f


def _load_inputs(config_path, profiles_path, moderators_path, seed):
    config = _load_config(config_path)
    if seed is not None:
        config.seed = int(seed)
        config.raw["seed"] = int(seed)
    profiles = _read_csv(profiles_path)
    moderators = _read_csv(moderators_path) if moderators_path else None
    ds = ingest(profiles, moderators, config)
    return config, ds


@main.command("fit")
@_with_shared
def cmd_fit(config_path, profiles_path, moderators_path, out_dir, seed, threads, strict):
    """Fit the model and write model/effects/profile artifacts."""
    try:
        config, ds = _load_inputs(config_path, profiles_path, moderators_path, seed)
    except InputError as err:
        click.echo(str(err), err=True)
        sys.exit(EXIT_INPUT)
    opts = _engine_options(config, seed)
    try:
        res, tune_result = _run_fit(ds, config, opts)
    except click.exceptions.Exit:
        click.echo("improper prior: stacked penalties are rank deficient", err=True)
        sys.exit(EXIT_IMPROPER)
    if strict and not res.converged:
        click.echo("fit did not converge (strict mode)", err=True)
        sys.exit(EXIT_NONCONVERGED)
    pfit = bind_and_project(res)
    pfit.df, pfit.bic = res.df, res.bic
    bundle = louis_information(pfit)
    out = Path(out_dir)
    artifacts = []
    artifacts.append(_write(out, "model.json",
                            canonical_json(_model_artifact(pfit, ds, config, bundle,
                                                           tune_result, seed))))
    eff = _effects_table(pfit, bundle, ds, config)
    artifacts.append(_write(out, "effects.csv", eff.to_csv(index=False)))
    if ds.moderators_df is not None:
        prof = cluster_profiles(pfit, ds.moderators_df.drop(columns=["respondent_id"]))
        artifacts.append(_write(out, "cluster_profiles.csv", prof.to_csv(index=False)))
    man = _manifest(config, seed, threads, "fit", artifacts,
                    {"n_lambda_evaluations":
                     len(tune_result.evaluations) if tune_result else 1})
    _write(out, "manifest.json", canonical_json(man))
    click.echo(f"fit complete: lambda={res.lam:.6g} df={res.df:.2f} bic={res.bic:.2f}")


@main.command("tune")
@_with_shared
def cmd_tune(config_path, profiles_path, moderators_path, out_dir, seed, threads, strict):
    """Search lambda by BIC and write the tuning trace."""
    try:
        config, ds = _load_inputs(config_path, profiles_path, moderators_path, seed)
    except InputError as err:
        click.echo(str(err), err=True)
        sys.exit(EXIT_INPUT)
    opts = _engine_options(config, seed)
    try:
        tune_result = _tune(ds, config, opts)
    except click.exceptions.Exit:
        click.echo("improper prior: stacked penalties are rank deficient", err=True)
        sys.exit(EXIT_IMPROPER)
    if strict and not tune_result.best.converged:
        sys.exit(EXIT_NONCONVERGED)
    out = Path(out_dir)
    payload = {
        "best_lambda": tune_result.best_lambda,
        "boundary": tune_result.boundary,
        "evaluations": [{"lambda": e.lam, "df": e.df, "bic": e.bic,
                         "loglik": e.loglik, "converged": e.converged}
                        for e in tune_result.evaluations],
        "search_trace": tune_result.search_trace,
    }
    artifacts = [_write(out, "tune.json", canonical_json(payload))]
    _write(out, "manifest.json", canonical_json(
        _manifest(config, seed, threads, "tune", artifacts,
                  {"n_lambda_evaluations": len(tune_result.evaluations)})))
    click.echo(f"best lambda: {tune_result.best_lambda:.6g}"
               + (" (boundary)" if tune_result.boundary else ""))


def _state_from_artifact(art: dict, design, ps, x_mod) -> FitResult:
    from .engine import FitDiagnostics, bind_pending, _make_problem, _responsibilities
    from .penalty import FusionReport

    K = art["clusters"]
    basis = design.cm.basis
    state = ModelState(
        mu=float(art["mu"]),
        beta=[basis.T @ np.asarray(b, dtype=float) for b in art["beta_raw_ext"]],
        phi=np.asarray(art["phi"], dtype=float),
        lam=float(art["lambda"]),
        gamma=int(art["gamma"]),
        sigma2_phi=0.25,
        vbases=[None] * K,
        bound=[set() for _ in range(K)],
    )
    pending = []
    for k_str, groups in art["fusion"]["bound_groups"].items():
        for g in groups:
            pending.append((int(k_str), int(g["group"])))
    bind_pending(state, ps, pending)
    prob = _make_problem(design, x_mod, ps, K)
    state.responsibilities = _responsibilities(state, prob)
    fusion = FusionReport(bound=[set(s) for s in state.bound], events=[],
                          n_constraints=art["fusion"]["n_constraints"])
    return FitResult(
        state=state, design=design, moderators=x_mod, ps=ps,
        lp=art["log_posterior"], diagnostics=FitDiagnostics(),
        fusion=fusion, converged=art["diagnostics"]["converged"],
        lam=art["lambda"], gamma=art["gamma"], df=art["df"], bic=art["bic"],
    )


@main.command("effects")
@_with_shared
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
def cmd_effects(config_path, profiles_path, moderators_path, out_dir, seed, threads,
                strict, model_path):
    """Recompute the effects table from a saved model artifact."""
    try:
        config, ds = _load_inputs(config_path, profiles_path, moderators_path, seed)
    except InputError as err:
        click.echo(str(err), err=True)
        sys.exit(EXIT_INPUT)
    with open(model_path) as fh:
        art = json.load(fh)
    design, ps, cm = prepare_problem(ds.design, config)
    res = _state_from_artifact(art, design, ps, ds.x_mod)
    bundle = louis_information(res)
    out = Path(out_dir)
    eff = _effects_table(res, bundle, ds, config)
    artifacts = [_write(out, "effects.csv", eff.to_csv(index=False))]
    _write(out, "manifest.json", canonical_json(
        _manifest(config, seed, threads, "effects", artifacts)))
    click.echo(f"wrote {len(eff)} effect rows")


@main.command("validate")
@_with_shared
def cmd_validate(config_path, profiles_path, moderators_path, out_dir, seed, threads,
                 strict):
    """Validate inputs, report the design dimensions and the propriety flag."""
    try:
        config, ds = _load_inputs(config_path, profiles_path, moderators_path, seed)
    except InputError as err:
        click.echo(str(err), err=True)
        sys.exit(EXIT_INPUT)
    design, ps, cm = prepare_problem(ds.design, config)
    rank, proper = propriety_certificate(ps, cm)
    payload = {
        "ingest_report": ds.report,
        "p_raw": ds.design.layout.p_raw,
        "reduced_dim": cm.dim_reduced,
        "n_penalty_groups": ps.n_groups,
        "rank_m": rank,
        "proper": proper,
        "log_mode": ps.log_mode,
    }
    out = Path(out_dir)
    _write(out, "validate.json", canonical_json(payload))
    click.echo(canonical_json(payload))
    if not proper:
        sys.exit(EXIT_IMPROPER)


def _sim_frames(sd: SimDesign, data, specs_levels):
    """Long-format profiles plus moderators in the shared CSV schema.

    Ids are zero-padded so lexicographic and numeric orders agree."""
    n, J = data.levels_left.shape
    width = len(str(sd.n_respondents))
    twidth = len(str(sd.n_tasks))
    rows = []
    for side, levels in (("L", data.levels_left), ("R", data.levels_right)):
        frame = {
            "respondent_id": [f"r{data.respondent_index[i]:0{width}d}"
                              for i in range(n)],
            "task_id": [f"t{i % sd.n_tasks:0{twidth}d}" for i in range(n)],
            "side": side,
            "choice": data.y.astype(int) if side == "L" else (1 - data.y).astype(int),
        }
        for j in range(J):
            frame[f"f{j + 1}"] = [specs_levels[j][l] for l in levels[:, j]]
        rows.append(pd.DataFrame(frame))
    profiles = pd.concat(rows, ignore_index=True)
    moderators = data.moderators.copy()
    moderators.insert(0, "respondent_id",
                      [f"r{i:0{width}d}" for i in range(sd.n_respondents)])
    return profiles, moderators


def _sim_truth_order(ds: Dataset, sd: SimDesign) -> np.ndarray:
    """Map the ingested respondent order back to generator indices."""
    return np.array([int(rid[1:]) for rid in ds.respondent_ids])


def _sim_config(sd: SimDesign, base: RunConfig | None, lam) -> RunConfig:
    levels = [str(l + 1) for l in range(sd.n_levels)]
    d = {
        "design": "forced_choice",
        "clusters": sd.n_clusters,
        "lambda": lam,
        "gamma": 1,
        "seed": sd.data_seed,
        "interactions": "all",
        "factors": [{"name": f"f{j + 1}", "levels": levels}
                    for j in range(sd.n_factors)],
        "moderators": [{"name": f"x{i + 1}", "type": "numeric"}
                       for i in range(sd.moderator_count)],
        "effects": {"marginal_means": False},
    }
    if base is not None:
        for key in ("epsilon1", "epsilon2", "max_iterations", "tune_budget",
                    "lambda_bounds", "accelerate"):
            d[key] = base.raw.get(key, getattr(base, key))
    return RunConfig.from_dict(d)


def _simulate_one(sd, beta_true, phi_true, config, rep, lam, warm):
    from . import simulate as sim

    data = generate_dataset(sd, beta_true, phi_true, rep)
    levels = [[str(l + 1) for l in range(sd.n_levels)]] * sd.n_factors
    profiles, moderators = _sim_frames(sd, data, levels)
    ds = ingest(profiles, moderators, config)
    opts = EngineOptions(
        epsilon1=config.epsilon1, epsilon2=config.epsilon2,
        max_iterations=config.max_iterations, accelerate=config.accelerate,
        seed=config.seed + rep, init_state=warm,
    )
    design, ps, cm = prepare_problem(ds.design, config)
    res = engine_fit(design, ds.x_mod, ps, config.clusters, lam, config.gamma, opts)
    pfit = bind_and_project(res)
    bundle = louis_information(pfit)
    z_true = data.z_true[_sim_truth_order(ds, sd)]
    perm = resolve_labels(pfit.state.responsibilities, z_true)
    ests, ses = [], []
    for k_true in range(sd.n_clusters):
        k_est = perm[k_true]
        for j in range(sd.n_factors):
            for l in range(1, sd.n_levels):
                eff = amce_conjoint(pfit, ds.design, j, str(l + 1), "1", k_est, bundle)
                ests.append(eff.estimate)
                ses.append(eff.se)
    return {"replicate": rep, "profiles": profiles, "moderators": moderators,
            "estimates": np.array(ests), "ses": np.array(ses),
            "fit": res, "perm": perm, "converged": res.converged}


def run_simulation(sd: SimDesign, config: RunConfig | None = None,
                   lam: object = "auto", threads: int = 1, out_dir=None,
                   write_datasets: bool = True, progress=None):
    """Generate R replicates, fit each, and score recovery.

    When ``lam`` is "auto", lambda is tuned by BIC on the first replicate and
    reused for the rest.  Replicates are embarrassingly parallel with
    per-replicate seeds, so results are identical for any thread count.
    """
    beta_true, phi_true = draw_true_coefficients(sd)
    sim_config = _sim_config(sd, config, 1.0)
    truth = true_amces(sd, beta_true)
    tune_info = None
    if lam == "auto":
        data0 = generate_dataset(sd, beta_true, phi_true, 0)
        levels = [[str(l + 1) for l in range(sd.n_levels)]] * sd.n_factors
        profiles0, moderators0 = _sim_frames(sd, data0, levels)
        ds0 = ingest(profiles0, moderators0, sim_config)
        opts = EngineOptions(epsilon1=sim_config.epsilon1, epsilon2=sim_config.epsilon2,
                             max_iterations=sim_config.max_iterations,
                             accelerate=sim_config.accelerate, seed=sim_config.seed)
        tune_result = _tune(ds0, sim_config, opts)
        lam_val = tune_result.best_lambda
        tune_info = {"best_lambda": lam_val,
                     "evaluations": len(tune_result.evaluations)}
    else:
        lam_val = float(lam)

    def one(rep):
        out = _simulate_one(sd, beta_true, phi_true, sim_config, rep, lam_val, None)
        if progress:
            progress(rep)
        return out

    if threads > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=threads)(delayed(one)(r) for r in range(sd.replicates))
    else:
        results = [one(r) for r in range(sd.replicates)]
    results = sorted(results, key=lambda r: r["replicate"])
    est = np.vstack([r["estimates"] for r in results])
    ses = np.vstack([r["ses"] for r in results])
    report = score_recovery(est, truth["amce"].to_numpy(), ses)
    out = {
        "sim_design": sd,
        "lambda": lam_val,
        "tune": tune_info,
        "truth": truth,
        "estimates": est,
        "ses": ses,
        "report": report,
        "results": results,
    }
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        artifacts = []
        if write_datasets:
            for r in results:
                rep = r["replicate"]
                artifacts.append(_write(out_path, f"profiles_rep{rep}.csv",
                                        r["profiles"].to_csv(index=False)))
                artifacts.append(_write(out_path, f"moderators_rep{rep}.csv",
                                        r["moderators"].to_csv(index=False)))
        for r in results:
            rep = r["replicate"]
            man = {"replicate": rep, "lambda": lam_val,
                   "converged": bool(r["converged"]),
                   "iterations": r["fit"].diagnostics.iterations,
                   "log_posterior": r["fit"].lp,
                   "label_permutation": list(r["perm"])}
            artifacts.append(_write(out_path, f"fit_rep{rep}.json", canonical_json(man)))
        scatter = truth.copy()
        labels = [f"rep{r}" for r in range(sd.replicates)]
        for i, lab in enumerate(labels):
            scatter[f"estimate_{lab}"] = est[i]
            scatter[f"se_{lab}"] = ses[i]
        artifacts.append(_write(out_path, "recovery_scatter.csv",
                                scatter.to_csv(index=False)))
        summary = pd.DataFrame({
            "replicate": list(range(sd.replicates)),
            "correlation": report["correlations"],
        })
        artifacts.append(_write(out_path, "recovery_report.csv",
                                summary.to_csv(index=False)))
        coverage = pd.DataFrame([{
            "median_correlation": report["median_correlation"],
            "mean_correlation": report["mean_correlation"],
            "coverage_95": report.get("coverage_95"),
            "coverage_90": report.get("coverage_90"),
            "post_selection_coverage_95": report.get("post_selection_coverage_95"),
            "post_selection_coverage_90": report.get("post_selection_coverage_90"),
            "lambda": lam_val,
        }])
        artifacts.append(_write(out_path, "recovery_coverage.csv",
                                coverage.to_csv(index=False)))
        out["artifacts"] = artifacts
    return out


@main.command("simulate")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=1)
@click.option("--strict", is_flag=True, default=False)
def cmd_simulate(config_path, out_dir, seed, threads, strict):
    """Run the synthetic recovery study and write plot-ready reports."""
    config = _load_config(config_path)
    sim = config.simulate or {}
    sd = SimDesign(
        n_factors=int(sim.get("factors", 5)),
        n_levels=int(sim.get("levels", 3)),
        n_clusters=int(sim.get("clusters", 3)),
        n_respondents=int(sim.get("respondents", 500)),
        n_tasks=int(sim.get("tasks", 5)),
        moderator_count=int(sim.get("moderators", 5)),
        coef_seed=int(sim.get("coef_seed", config.seed if seed is None else seed)),
        data_seed=int(sim.get("data_seed", (config.seed if seed is None else seed) + 1)),
        truth_mc_draws=int(sim.get("truth_mc_draws", 200_000)),
        replicates=int(sim.get("replicates", 20)),
    )
    lam = sim.get("lambda", "auto")
    out = run_simulation(sd, config, lam, threads, out_dir)
    if strict and not all(r["converged"] for r in out["results"]):
        click.echo("some replicate fits did not converge (strict mode)", err=True)
        sys.exit(EXIT_NONCONVERGED)
    rep = out["report"]
    _write(Path(out_dir), "manifest.json", canonical_json(
        _manifest(config, seed, threads, "simulate", out.get("artifacts", []),
                  {"median_correlation": rep["median_correlation"],
                   "lambda": out["lambda"]})))
    click.echo(f"median correlation: {rep['median_correlation']:.4f} "
               f"(lambda={out['lambda']:.4g})")


if __name__ == "__main__":
    main()
