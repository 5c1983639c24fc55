"""CSV ingestion, run configuration, and deterministic artifact serialization.

Profiles arrive in long format (respondent_id, task_id, side, choice, one
column per factor); moderators as one row per respondent.  Validation is
itemized: every offending row is named before rejection.  Artifacts are
serialized with sorted keys and round-trip float repr so identical runs are
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .design import (
    DesignMatrix,
    FactorSpec,
    build_constraints,
    build_layout,
    encode_factorial,
    encode_forced_choice,
    project_design,
)
from .penalty import build_fusion_penalties, expand_log, standardization_weights

__all__ = ["InputError", "RunConfig", "Dataset", "ingest", "prepare_problem",
           "canonical_json", "config_hash"]


class InputError(Exception):
    """Validation failure with an itemized list of offending records."""

    def __init__(self, items):
        self.items = list(items)
        super().__init__("input validation failed:\n" + "\n".join(self.items))


@dataclass
class RunConfig:
    design: str = "forced_choice"
    clusters: int = 2
    lam: object = "auto"
    gamma: int = 1
    sigma2_phi: float = 0.25
    epsilon1: float = 1e-8
    epsilon2: float = 1e-6
    max_iterations: int = 2000
    seed: int = 0
    log_mode: bool | None = None
    standardize_weights: bool = True
    tune_budget: int = 15
    lambda_bounds: tuple = (1e-3, 1e3)
    interactions: object = "all"
    factors: list = field(default_factory=list)
    moderators: list = field(default_factory=list)
    effects: dict = field(default_factory=dict)
    accelerate: bool = True
    simulate: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls(
            design=d.get("design", "forced_choice"),
            clusters=int(d.get("clusters", 2)),
            lam=d.get("lambda", "auto"),
            gamma=int(d.get("gamma", 1)),
            sigma2_phi=float(d.get("sigma2_phi", 0.25)),
            epsilon1=float(d.get("epsilon1", 1e-8)),
            epsilon2=float(d.get("epsilon2", 1e-6)),
            max_iterations=int(d.get("max_iterations", 2000)),
            seed=int(d.get("seed", 0)),
            log_mode=d.get("log_mode"),
            standardize_weights=bool(d.get("standardize_weights", True)),
            tune_budget=int(d.get("tune_budget", 15)),
            lambda_bounds=tuple(d.get("lambda_bounds", (1e-3, 1e3))),
            interactions=d.get("interactions", "all"),
            factors=d.get("factors", []),
            moderators=d.get("moderators", []),
            effects=d.get("effects", {}),
            accelerate=bool(d.get("accelerate", True)),
            simulate=d.get("simulate", {}),
            raw=d,
        )
        cfg.validate()
        return cfg

    def validate(self):
        problems = []
        if self.design not in ("forced_choice", "factorial"):
            problems.append(f"design must be forced_choice or factorial, got {self.design!r}")
        if self.clusters < 1:
            problems.append("clusters must be >= 1")
        if self.gamma not in (0, 1):
            problems.append("gamma must be 0 or 1")
        if self.lam != "auto":
            try:
                if float(self.lam) <= 0:
                    problems.append("lambda must be positive or 'auto'")
            except (TypeError, ValueError):
                problems.append(f"lambda must be positive or 'auto', got {self.lam!r}")
        if self.lam == "auto" and self.tune_budget < 5:
            problems.append("lambda='auto' requires tune_budget >= 5")
        if not (0 < self.lambda_bounds[0] < self.lambda_bounds[1]):
            problems.append("lambda_bounds must satisfy 0 < lo < hi")
        for eps_name in ("epsilon1", "epsilon2", "sigma2_phi"):
            if getattr(self, eps_name) < 0:
                problems.append(f"{eps_name} must be non-negative")
        if self.max_iterations < 1:
            problems.append("max_iterations must be >= 1")
        if problems:
            raise InputError(problems)

    def factor_specs(self) -> list:
        specs = []
        for f in self.factors:
            partners = []
            for r in f.get("restrictions", []):
                partners.append((r["partner"], tuple((a, b) for a, b in r["pairs"])))
            specs.append(FactorSpec(
                name=f["name"],
                levels=tuple(str(l) for l in f["levels"]),
                ordered=bool(f.get("ordered", False)),
                restriction_partners=tuple(partners),
            ))
        return specs


@dataclass
class Dataset:
    design: DesignMatrix
    x_mod: np.ndarray | None
    moderator_names: list
    moderators_df: pd.DataFrame | None
    respondent_ids: list
    report: dict


def _moderator_matrix(df: pd.DataFrame, moderator_cfg: list):
    """Intercept plus numeric columns plus baseline-dropped indicators."""
    cols = [np.ones(len(df))]
    names = ["(intercept)"]
    for m in moderator_cfg:
        name = m["name"]
        if name not in df.columns:
            raise InputError([f"moderator column {name!r} missing from moderators CSV"])
        if m.get("type", "numeric") == "numeric":
            cols.append(df[name].to_numpy(dtype=float))
            names.append(name)
        else:
            vals = df[name].astype(str)
            levels = sorted(vals.unique())
            baseline = str(m.get("baseline", levels[0]))
            if baseline not in levels:
                raise InputError(
                    [f"moderator {name!r}: baseline {baseline!r} not among levels {levels}"])
            for lvl in levels:
                if lvl == baseline:
                    continue
                cols.append((vals == lvl).to_numpy(dtype=float))
                names.append(f"{name}[{lvl}]")
    return np.column_stack(cols), names


def ingest(profiles: pd.DataFrame, moderators: pd.DataFrame | None,
           config: RunConfig) -> Dataset:
    """Validate and join the long-format profiles with the moderators.

    Respondents missing from the moderator table (or carrying missing
    moderator values) are dropped with a count in the report; structural
    problems (unknown levels, duplicate keys, orphan task sides) are
    itemized and rejected.
    """
    specs = config.factor_specs()
    problems = []
    required = {"respondent_id", "task_id", "side", "choice"}
    missing_cols = required - set(profiles.columns)
    if missing_cols:
        raise InputError([f"profiles CSV missing columns {sorted(missing_cols)}"])
    for s in specs:
        if s.name not in profiles.columns:
            problems.append(f"profiles CSV missing factor column {s.name!r}")
    if problems:
        raise InputError(problems)

    prof = profiles.copy()
    prof["side"] = prof["side"].astype(str)
    valid_sides = {"L", "R"} if config.design == "forced_choice" else {"single"}
    bad_side = ~prof["side"].isin(valid_sides)
    for idx in prof.index[bad_side]:
        problems.append(
            f"row {idx}: side {prof.at[idx, 'side']!r} invalid for {config.design}")

    for s in specs:
        lut = set(s.levels)
        vals = prof[s.name].astype(str)
        for idx in prof.index[~vals.isin(lut)]:
            problems.append(
                f"row {idx}: unknown level {prof.at[idx, s.name]!r} "
                f"for factor {s.name!r}")

    dup = prof.duplicated(subset=["respondent_id", "task_id", "side"], keep=False)
    for idx in prof.index[dup]:
        problems.append(
            f"row {idx}: duplicate (respondent_id, task_id, side) key "
            f"({prof.at[idx, 'respondent_id']}, {prof.at[idx, 'task_id']}, "
            f"{prof.at[idx, 'side']})")

    if config.design == "forced_choice" and not problems:
        counts = prof.groupby(["respondent_id", "task_id"])["side"].agg(
            lambda s: tuple(sorted(s)))
        for (rid, tid), sides in counts.items():
            if sides != ("L", "R"):
                problems.append(
                    f"task ({rid}, {tid}): needs exactly sides L and R, got {list(sides)}")
    if problems:
        raise InputError(problems)

    report = {"n_input_rows": int(len(prof))}
    dropped_missing_moderators = 0
    if moderators is not None:
        if "respondent_id" not in moderators.columns:
            raise InputError(["moderators CSV missing respondent_id column"])
        mods = moderators.copy()
        dup_m = mods.duplicated(subset=["respondent_id"], keep=False)
        if dup_m.any():
            raise InputError(
                [f"moderators row {idx}: duplicate respondent_id "
                 f"{mods.at[idx, 'respondent_id']}" for idx in mods.index[dup_m]])
        mod_cols = [m["name"] for m in config.moderators]
        mods = mods.set_index("respondent_id")
        keep_ids = []
        for rid in pd.unique(prof["respondent_id"]):
            if rid not in mods.index:
                dropped_missing_moderators += 1
                continue
            row = mods.loc[rid, mod_cols] if mod_cols else mods.loc[rid]
            if mod_cols and pd.isna(pd.Series(row)).any():
                dropped_missing_moderators += 1
                continue
            keep_ids.append(rid)
        prof = prof[prof["respondent_id"].isin(set(keep_ids))]
        mods_df = mods.loc[keep_ids].reset_index()
    else:
        mods_df = None
        keep_ids = list(pd.unique(prof["respondent_id"]))
    report["dropped_missing_moderators"] = dropped_missing_moderators
    if len(prof) == 0:
        raise InputError(["no rows left after joining with moderators"])

    prof = prof.sort_values(["respondent_id", "task_id", "side"], kind="stable")
    if config.design == "forced_choice":
        left = prof[prof["side"] == "L"].reset_index(drop=True)
        right = prof[prof["side"] == "R"].reset_index(drop=True)
        y = left["choice"].to_numpy(dtype=float)
        if not np.isin(y, (0.0, 1.0)).all():
            raise InputError(["choice column on L rows must be 0 or 1"])
        layout = build_layout(specs, config.interactions)
        design = encode_forced_choice(
            left[[s.name for s in specs]], right[[s.name for s in specs]],
            layout, respondent_ids=left["respondent_id"], y=y)
    else:
        y = prof["choice"].to_numpy(dtype=float)
        if not np.isin(y, (0.0, 1.0)).all():
            raise InputError(["choice column must be 0 or 1"])
        layout = build_layout(specs, config.interactions)
        design = encode_factorial(
            prof[[s.name for s in specs]], layout,
            respondent_ids=prof["respondent_id"], y=y)

    if mods_df is not None and config.moderators:
        x_mod, names = _moderator_matrix(mods_df, config.moderators)
    else:
        x_mod, names = None, []
    report["n_tasks"] = int(design.n_rows)
    report["n_respondents"] = int(design.n_respondents)
    return Dataset(design, x_mod, names, mods_df,
                   respondent_ids=list(keep_ids), report=report)


def prepare_problem(design: DesignMatrix, config: RunConfig):
    """Constraints, penalties, optional LOG expansion and weights, projection."""
    cm = build_constraints(design.layout)
    ps = build_fusion_penalties(design.layout, cm)
    log_mode = config.log_mode
    if log_mode is None:
        log_mode = bool(design.layout.interaction_pairs)
    if log_mode:
        design, ps, cm = expand_log(design, ps, cm)
    if config.standardize_weights:
        standardization_weights(design, ps)
    reduced = project_design(design, cm)
    return reduced, ps, cm


# ---------------------------------------------------------------------------
# deterministic serialization


def _to_plain(obj):
    if isinstance(obj, dict):
        return {str(k): _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(_to_plain(v) for v in obj)
    if isinstance(obj, np.ndarray):
        return _to_plain(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_to_plain(obj), sort_keys=True, indent=1)


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(canonical_json(config.raw).encode()).hexdigest()
