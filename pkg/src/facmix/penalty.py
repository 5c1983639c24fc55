"""Pairwise-fusion penalties, their latent-overlapping-group expansion,
standardization weights, and the propriety certificate.

Each penalty group ``g`` targets one level pair ``(l, l')`` of one factor
and collects the main-effect difference plus every interaction difference
sharing that pair; its quadratic form is stored as a stack of difference
rows ``D_g`` with ``F_g = D_g^T D_g``, so ``sqrt(beta^T F_g beta)`` is the
Euclidean norm of the explicit difference vector.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .design import (
    ConstraintMatrix,
    DesignLayout,
    DesignMatrix,
    LogExpansion,
    constraints_from_rows,
)

__all__ = [
    "PenaltyGroup",
    "PenaltySet",
    "FusionReport",
    "build_fusion_penalties",
    "penalty_value",
    "group_norms",
    "expand_log",
    "standardization_weights",
    "propriety_certificate",
]

FUSION_THRESHOLD = 1e-4
_RANK_RTOL = 1e-8


@dataclass
class PenaltyGroup:
    """One fusion group: the level pair it targets and its difference rows."""

    gid: int
    factor: int
    pair: tuple[int, int]
    kind: str  # "pair" (plain), "log_joint", or "log_copy"
    dmat_raw: np.ndarray
    dmat: np.ndarray
    diff_main: int | None = None  # index into the main-difference coordinates
    diff_int: tuple[int, ...] = ()  # indices into the interaction-difference coords


@dataclass
class PenaltySet:
    """All fusion groups with weights, in raw and projected coordinates."""

    groups: list[PenaltyGroup]
    weights: np.ndarray
    rank_m: int
    proper: bool
    reduced_dim: int
    log_mode: bool = False
    fusion_threshold: float = FUSION_THRESHOLD

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def pair_of(self, gid: int) -> tuple[int, tuple[int, int]]:
        g = self.groups[gid]
        return g.factor, g.pair


@dataclass
class FusionReport:
    """Binding bookkeeping: which groups have fused, per cluster."""

    bound: list[set]
    events: list[tuple[int, int, int]]  # (iteration, cluster, gid)
    n_constraints: list[int]

    def fused_pairs(self, ps: PenaltySet, k: int) -> set:
        """Level pairs fully fused in cluster ``k`` (both groups under LOG)."""
        if not ps.log_mode:
            return {ps.pair_of(g) for g in self.bound[k]}
        joint = {ps.pair_of(g) for g in self.bound[k] if ps.groups[g].kind == "log_joint"}
        copy = {ps.pair_of(g) for g in self.bound[k] if ps.groups[g].kind == "log_copy"}
        return joint & copy


def _level_pairs(spec) -> list[tuple[int, int]]:
    if spec.ordered:
        return [(l, l + 1) for l in range(spec.n_levels - 1)]
    return [(a, b) for a in range(spec.n_levels) for b in range(a + 1, spec.n_levels)]


def _group_difference_rows(layout: DesignLayout, j: int, pair) -> np.ndarray:
    """Difference rows (raw coordinates) for main + shared interaction effects."""
    l, lp = pair
    rows = [np.zeros(layout.p_raw)]
    rows[0][layout.main_col(j, l)] = 1.0
    rows[0][layout.main_col(j, lp)] = -1.0
    for other in layout.partners_of(j):
        for c in range(layout.specs[other].n_levels):
            ca = layout.interaction_cell(j, other, l, c)
            cb = layout.interaction_cell(j, other, lp, c)
            if ca < 0 or cb < 0:
                continue  # cell excluded by randomization restrictions
            r = np.zeros(layout.p_raw)
            r[ca] = 1.0
            r[cb] = -1.0
            rows.append(r)
    return np.vstack(rows)


def _stacked_rank(groups, dim) -> tuple[int, bool]:
    mats = [g.dmat for g in groups if g.dmat.size]
    if not mats:
        return 0, dim == 0
    stack = np.vstack(mats)
    s = np.linalg.svd(stack, compute_uv=False)
    rank = int(np.sum(s > _RANK_RTOL * s[0])) if s.size else 0
    return rank, rank == dim


def build_fusion_penalties(layout: DesignLayout, cm: ConstraintMatrix) -> PenaltySet:
    """One group per eligible level pair of every factor.

    Unordered factors get all C(L_j, 2) pairs; ordered factors only adjacent
    pairs.  Weights start at 1 (see :func:`standardization_weights`).
    """
    groups = []
    n_main = 0
    n_int = 0
    for j, spec in enumerate(layout.specs):
        for pair in _level_pairs(spec):
            dmat_raw = _group_difference_rows(layout, j, pair)
            n_rows_int = dmat_raw.shape[0] - 1
            groups.append(
                PenaltyGroup(
                    gid=len(groups),
                    factor=j,
                    pair=pair,
                    kind="pair",
                    dmat_raw=dmat_raw,
                    dmat=dmat_raw @ cm.basis,
                    diff_main=n_main,
                    diff_int=tuple(range(n_int, n_int + n_rows_int)),
                )
            )
            n_main += 1
            n_int += n_rows_int
    rank, proper = _stacked_rank(groups, cm.dim_reduced)
    return PenaltySet(
        groups=groups,
        weights=np.ones(len(groups)),
        rank_m=rank,
        proper=proper,
        reduced_dim=cm.dim_reduced,
    )


def group_norms(ps: PenaltySet, beta_reduced: np.ndarray) -> np.ndarray:
    """Per-group sqrt(beta^T F_g beta) in the penalty's reduced coordinates."""
    return np.array([np.linalg.norm(g.dmat @ beta_reduced) for g in ps.groups])


def penalty_value(beta_reduced: np.ndarray, ps: PenaltySet) -> float:
    """Weighted sum of group norms, Sum_g xi_g sqrt(beta^T F_g beta)."""
    return float(ps.weights @ group_norms(ps, beta_reduced))


def _difference_maps(ps: PenaltySet, p_raw: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack the main (D_Main) and interaction (D_Int) difference rows."""
    pair_groups = [g for g in ps.groups if g.kind == "pair"]
    d_main = np.vstack([g.dmat_raw[:1] for g in pair_groups]) if pair_groups else np.zeros((0, p_raw))
    int_rows = [g.dmat_raw[1:] for g in pair_groups if g.dmat_raw.shape[0] > 1]
    d_int = np.vstack(int_rows) if int_rows else np.zeros((0, p_raw))
    return d_main, d_int


def expand_log(
    design: DesignMatrix, ps: PenaltySet, cm: ConstraintMatrix
) -> tuple[DesignMatrix, PenaltySet, ConstraintMatrix]:
    """Latent-overlapping-group reparameterization.

    The parameter vector is extended with the main differences, interaction
    differences, and a duplicated copy of the main differences; accounting
    constraints tie them to the original coefficients, and the design is
    remapped so every constrained parameter choice keeps all linear
    predictors unchanged.  The group count doubles: one joint
    main+interaction group and one main-copy group per level pair.
    """
    if design.reduced:
        raise ValueError("expand_log expects a raw-coordinate design")
    if ps.log_mode:
        raise ValueError("penalty set is already in LOG form")
    if not design.layout.interaction_pairs:
        raise ValueError("LOG expansion is meaningless without interactions")

    p = design.layout.p_raw
    d_mainmat, d_intmat = _difference_maps(ps, p)
    d_main, d_int = d_mainmat.shape[0], d_intmat.shape[0]

    # expanded design: T_exp = T @ pinv([I; D_Main; D_Int]), then append a
    # copy of the main-difference columns
    m_stack = np.vstack([np.eye(p), d_mainmat, d_intmat])
    m_dagger = np.linalg.pinv(m_stack)
    t_exp = design.t @ m_dagger
    t_log = np.hstack([t_exp, t_exp[:, p : p + d_main]])

    p_ext = p + 2 * d_main + d_int
    # accounting constraints: [C^T 0 0 0; D_Main -I 0 -I; D_Int 0 -I 0]
    c_rows = np.zeros((cm.c_t.shape[0] + d_main + d_int, p_ext))
    c_rows[: cm.c_t.shape[0], :p] = cm.c_t
    r0 = cm.c_t.shape[0]
    c_rows[r0 : r0 + d_main, :p] = d_mainmat
    c_rows[r0 : r0 + d_main, p : p + d_main] = -np.eye(d_main)
    c_rows[r0 : r0 + d_main, p + d_main + d_int :] = -np.eye(d_main)
    r1 = r0 + d_main
    c_rows[r1:, :p] = d_intmat
    c_rows[r1:, p + d_main : p + d_main + d_int] = -np.eye(d_int)
    cm_ext = constraints_from_rows(c_rows)

    groups = []
    for g in [g for g in ps.groups if g.kind == "pair"]:
        joint_coords = [p + g.diff_main] + [p + d_main + i for i in g.diff_int]
        dmat_raw = np.zeros((len(joint_coords), p_ext))
        dmat_raw[np.arange(len(joint_coords)), joint_coords] = 1.0
        groups.append(
            PenaltyGroup(
                gid=len(groups),
                factor=g.factor,
                pair=g.pair,
                kind="log_joint",
                dmat_raw=dmat_raw,
                dmat=dmat_raw @ cm_ext.basis,
                diff_main=g.diff_main,
                diff_int=g.diff_int,
            )
        )
    for g in [g for g in ps.groups if g.kind == "pair"]:
        dmat_raw = np.zeros((1, p_ext))
        dmat_raw[0, p + d_main + d_int + g.diff_main] = 1.0
        groups.append(
            PenaltyGroup(
                gid=len(groups),
                factor=g.factor,
                pair=g.pair,
                kind="log_copy",
                dmat_raw=dmat_raw,
                dmat=dmat_raw @ cm_ext.basis,
                diff_main=g.diff_main,
                diff_int=(),
            )
        )
    rank, proper = _stacked_rank(groups, cm_ext.dim_reduced)
    ps_ext = PenaltySet(
        groups=groups,
        weights=np.ones(len(groups)),
        rank_m=rank,
        proper=proper,
        reduced_dim=cm_ext.dim_reduced,
        log_mode=True,
        fusion_threshold=ps.fusion_threshold,
    )
    design_ext = dc_replace(
        design,
        t=t_log,
        ext=LogExpansion(p_orig=p, d_main=d_main, d_int=d_int),
    )
    return design_ext, ps_ext, cm_ext


def standardization_weights(design: DesignMatrix, ps: PenaltySet) -> np.ndarray:
    """Frobenius-norm weights, xi_g = ||[T_diff]_g||_F / sqrt(n).

    ``[T_diff]_g`` are the columns of the over-parameterized (differences)
    design matrix penalized by group ``g``.  In LOG mode those columns sit in
    the expanded design itself; in plain mode the expanded design is built
    internally from the same difference maps.  Groups whose columns are all
    zero (a factor that never varies) get weight 1 with a warning.
    """
    if design.reduced:
        raise ValueError("standardization weights need a raw-coordinate design")
    n = design.n_rows
    if ps.log_mode:
        if design.ext is None:
            raise ValueError("LOG penalty set requires the LOG-expanded design")
        t_exp = design.t
        p = design.ext.p_orig
        d_main, d_int = design.ext.d_main, design.ext.d_int
    else:
        p = design.layout.p_raw
        d_mainmat, d_intmat = _difference_maps(ps, p)
        d_main, d_int = d_mainmat.shape[0], d_intmat.shape[0]
        m_dagger = np.linalg.pinv(np.vstack([np.eye(p), d_mainmat, d_intmat]))
        t_exp = design.t @ m_dagger

    weights = np.ones(ps.n_groups)
    for g in ps.groups:
        if g.kind == "log_copy":
            cols = [p + d_main + d_int + g.diff_main]
        else:
            cols = [p + g.diff_main] + [p + d_main + i for i in g.diff_int]
        weights[g.gid] = float(np.linalg.norm(t_exp[:, cols])) / np.sqrt(n)
    floor = 1e-10 * max(weights.max(), 1.0)
    for g in ps.groups:
        if weights[g.gid] <= floor:
            warnings.warn(
                f"penalty group {g.gid} (factor {design.layout.specs[g.factor].name!r}, "
                f"levels {g.pair}) has all-zero design columns; weight set to 1",
                stacklevel=2,
            )
            weights[g.gid] = 1.0
    ps.weights = weights
    return weights


def propriety_certificate(ps: PenaltySet, cm: ConstraintMatrix) -> tuple[int, bool]:
    """Rank of the stacked projected penalties and the proper/improper flag.

    The prior is proper iff the stack has full column rank on the reduced
    space; the rank doubles as the normalizer exponent ``m``.
    """
    rank, proper = _stacked_rank(ps.groups, cm.dim_reduced)
    ps.rank_m = rank
    ps.proper = proper
    return rank, proper
