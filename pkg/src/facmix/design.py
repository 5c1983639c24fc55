"""Indicator encodings for factorial and forced-choice experiments.

Treatments are encoded as dense indicator designs with one column per
main-effect level and one per present two-way interaction cell.  Interaction
cells ruled out by declared randomization restrictions never occur in the
data and are omitted from the encoding.  ANOVA-style sum-to-zero constraints
are eliminated by projecting onto an orthonormal basis of the constraint
null space, so downstream solvers work in an unconstrained space.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.linalg import null_space

__all__ = [
    "FactorSpec",
    "DesignLayout",
    "DesignMatrix",
    "ConstraintMatrix",
    "build_layout",
    "encode_factorial",
    "encode_forced_choice",
    "build_constraints",
    "project_design",
    "lift_coefficients",
]


@dataclass(frozen=True)
class FactorSpec:
    """One treatment factor: its levels, ordering, and randomization restrictions.

    ``restriction_partners`` lists, per partner factor, the (own_level,
    partner_level) combinations excluded by the randomization.  ``ordered``
    factors are only penalized on adjacent-level differences downstream.
    """

    name: str
    levels: tuple[str, ...]
    ordered: bool = False
    restriction_partners: tuple[tuple[str, tuple[tuple[str, str], ...]], ...] = ()

    def __post_init__(self):
        levels = tuple(str(l) for l in self.levels)
        object.__setattr__(self, "levels", levels)
        if len(levels) < 2:
            raise ValueError(f"factor {self.name!r} needs at least 2 levels")
        if len(set(levels)) != len(levels):
            raise ValueError(f"factor {self.name!r} has duplicate level labels")
        cleaned = []
        for partner, pairs in self.restriction_partners:
            pairs = tuple((str(a), str(b)) for a, b in pairs)
            for own, _ in pairs:
                if own not in levels:
                    raise ValueError(
                        f"restriction on factor {self.name!r} references unknown "
                        f"own level {own!r}"
                    )
            cleaned.append((str(partner), pairs))
        object.__setattr__(self, "restriction_partners", tuple(cleaned))

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def level_index(self, label) -> int:
        try:
            return self.levels.index(str(label))
        except ValueError:
            raise ValueError(
                f"unknown level {label!r} for factor {self.name!r}"
            ) from None


@dataclass(frozen=True, eq=False)
class DesignLayout:
    """Column bookkeeping for an indicator design.

    Main-effect blocks come first (one column per level, in factor order),
    followed by one block per interaction pair ``(a, b)`` with ``a < b``; a
    cell ``(l_a, l_b)`` occupies slot ``l_a + l_b * L_a`` of its block, with
    restriction-excluded cells skipped.
    """

    specs: tuple[FactorSpec, ...]
    interaction_pairs: tuple[tuple[int, int], ...]
    main_offsets: tuple[int, ...]
    cell_columns: dict
    p_raw: int

    @property
    def n_factors(self) -> int:
        return len(self.specs)

    def factor_index(self, name: str) -> int:
        for j, s in enumerate(self.specs):
            if s.name == name:
                return j
        raise ValueError(f"unknown factor {name!r}")

    def main_col(self, j: int, level: int) -> int:
        return self.main_offsets[j] + level

    def partners_of(self, j: int) -> list[int]:
        """Factors that interact with ``j`` under this layout."""
        out = []
        for a, b in self.interaction_pairs:
            if a == j:
                out.append(b)
            elif b == j:
                out.append(a)
        return out

    def interaction_cell(self, a: int, b: int, la: int, lb: int) -> int:
        """Column of cell (la, lb) for pair (a, b); -1 if excluded."""
        if a > b:
            a, b, la, lb = b, a, lb, la
        return int(self.cell_columns[(a, b)][la, lb])

    def excluded_cells(self, a: int, b: int) -> set:
        cols = self.cell_columns[(a, b)]
        ii, jj = np.nonzero(cols < 0)
        return {(int(i), int(j)) for i, j in zip(ii, jj)}


def _excluded_pairs(specs, a: int, b: int) -> set:
    """Cells (l_a, l_b) excluded by restrictions declared on either factor."""
    out = set()
    by_name = {s.name: j for j, s in enumerate(specs)}
    for own_idx, other_idx in ((a, b), (b, a)):
        own = specs[own_idx]
        for partner, pairs in own.restriction_partners:
            if partner not in by_name:
                raise ValueError(
                    f"factor {own.name!r} declares restrictions against unknown "
                    f"factor {partner!r}"
                )
            if by_name[partner] != other_idx:
                continue
            other = specs[other_idx]
            for own_level, other_level in pairs:
                cell = (own.level_index(own_level), other.level_index(other_level))
                out.add(cell if own_idx == a else cell[::-1])
    return out


def build_layout(specs, interactions="all") -> DesignLayout:
    """Resolve the column layout for ``specs``.

    ``interactions`` is ``"all"``, ``"none"``, or an explicit list of factor
    name pairs (the typical applied model keeps only a few pairs).
    """
    specs = tuple(specs)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("duplicate factor names")
    # validate restriction partner references eagerly
    by_name = {s.name: j for j, s in enumerate(specs)}
    for s in specs:
        for partner, pairs in s.restriction_partners:
            if partner not in by_name:
                raise ValueError(
                    f"factor {s.name!r} declares restrictions against unknown "
                    f"factor {partner!r}"
                )
            other = specs[by_name[partner]]
            for _, other_level in pairs:
                other.level_index(other_level)

    J = len(specs)
    if interactions == "all":
        pairs = tuple((a, b) for a in range(J) for b in range(a + 1, J))
    elif interactions == "none" or not interactions:
        pairs = ()
    else:
        idx = []
        for fa, fb in interactions:
            a, b = by_name[str(fa)], by_name[str(fb)]
            if a == b:
                raise ValueError(f"interaction pair repeats factor {fa!r}")
            idx.append((min(a, b), max(a, b)))
        pairs = tuple(sorted(set(idx)))

    main_offsets = []
    col = 0
    for s in specs:
        main_offsets.append(col)
        col += s.n_levels
    cell_columns = {}
    for a, b in pairs:
        La, Lb = specs[a].n_levels, specs[b].n_levels
        excluded = _excluded_pairs(specs, a, b)
        cols = np.full((La, Lb), -1, dtype=np.int64)
        for lb in range(Lb):
            for la in range(La):
                if (la, lb) in excluded:
                    continue
                cols[la, lb] = col
                col += 1
        cell_columns[(a, b)] = cols
    return DesignLayout(
        specs=specs,
        interaction_pairs=pairs,
        main_offsets=tuple(main_offsets),
        cell_columns=cell_columns,
        p_raw=col,
    )


@dataclass
class LogExpansion:
    """Marker that a design lives in the duplicated-differences coordinates."""

    p_orig: int
    d_main: int
    d_int: int

    @property
    def p_ext(self) -> int:
        return self.p_orig + 2 * self.d_main + self.d_int


@dataclass
class DesignMatrix:
    """Encoded treatment design plus respondent bookkeeping.

    ``t`` holds one row per task: indicator rows for factorial data, left
    minus right indicator differences for forced choice.  ``levels`` (or
    ``levels_left``/``levels_right``) retain the integer-coded profiles so
    estimands can re-encode counterfactuals.
    """

    t: np.ndarray
    layout: DesignLayout
    kind: str
    respondent_index: np.ndarray
    n_respondents: int
    reduced: bool = False
    levels: np.ndarray | None = None
    levels_left: np.ndarray | None = None
    levels_right: np.ndarray | None = None
    y: np.ndarray | None = None
    cm: "ConstraintMatrix | None" = None
    ext: LogExpansion | None = None

    @property
    def n_rows(self) -> int:
        return self.t.shape[0]

    @property
    def task_counts(self) -> np.ndarray:
        return np.bincount(self.respondent_index, minlength=self.n_respondents)


def _codes_from_table(profiles, specs) -> np.ndarray:
    """Map a label table to integer level codes, naming any offender."""
    if isinstance(profiles, np.ndarray):
        codes = np.asarray(profiles, dtype=np.int64)
        if codes.ndim != 2 or codes.shape[1] != len(specs):
            raise ValueError("profile code array must be (n_rows, n_factors)")
        for j, s in enumerate(specs):
            bad = (codes[:, j] < 0) | (codes[:, j] >= s.n_levels)
            if bad.any():
                row = int(np.nonzero(bad)[0][0])
                raise ValueError(
                    f"row {row}: level code {codes[row, j]} out of range for "
                    f"factor {s.name!r}"
                )
        return codes
    df = pd.DataFrame(profiles)
    missing = [s.name for s in specs if s.name not in df.columns]
    if missing:
        raise ValueError(f"profile table is missing factor columns {missing}")
    n = len(df)
    codes = np.empty((n, len(specs)), dtype=np.int64)
    for j, s in enumerate(specs):
        lut = {lbl: i for i, lbl in enumerate(s.levels)}
        vals = df[s.name].astype(str).to_numpy()
        for r, v in enumerate(vals):
            if v not in lut:
                raise ValueError(
                    f"row {df.index[r]}: unknown level {v!r} for factor {s.name!r}"
                )
            codes[r, j] = lut[v]
    return codes


def encode_codes(codes: np.ndarray, layout: DesignLayout) -> np.ndarray:
    """Indicator rows for integer-coded profiles (one row per profile)."""
    n = codes.shape[0]
    t = np.zeros((n, layout.p_raw))
    rows = np.arange(n)
    for j in range(layout.n_factors):
        t[rows, layout.main_offsets[j] + codes[:, j]] = 1.0
    for a, b in layout.interaction_pairs:
        cols = layout.cell_columns[(a, b)][codes[:, a], codes[:, b]]
        bad = cols < 0
        if bad.any():
            r = int(np.nonzero(bad)[0][0])
            sa, sb = layout.specs[a], layout.specs[b]
            raise ValueError(
                f"row {r}: combination ({sa.name!r}={sa.levels[codes[r, a]]!r}, "
                f"{sb.name!r}={sb.levels[codes[r, b]]!r}) is excluded by the "
                "declared randomization restrictions"
            )
        t[rows, cols] = 1.0
    return t


def encode_factorial(profiles, layout, respondent_ids=None, y=None) -> DesignMatrix:
    """Encode a factorial profile table (one observed profile per row)."""
    if not isinstance(layout, DesignLayout):
        layout = build_layout(layout)
    codes = _codes_from_table(profiles, layout.specs)
    t = encode_codes(codes, layout)
    resp_idx, n_resp = _respondents(respondent_ids, codes.shape[0])
    return DesignMatrix(
        t=t,
        layout=layout,
        kind="factorial",
        respondent_index=resp_idx,
        n_respondents=n_resp,
        levels=codes,
        y=None if y is None else np.asarray(y, dtype=float),
    )


def encode_forced_choice(left, right, layout, respondent_ids=None, y=None) -> DesignMatrix:
    """Encode forced-choice pairs as left-minus-right indicator differences."""
    if not isinstance(layout, DesignLayout):
        layout = build_layout(layout)
    if isinstance(left, pd.DataFrame) and isinstance(right, pd.DataFrame):
        if set(left.columns) >= {s.name for s in layout.specs} and set(
            right.columns
        ) >= {s.name for s in layout.specs}:
            pass
        else:
            raise ValueError("left and right profiles must carry the same factor set")
    codes_l = _codes_from_table(left, layout.specs)
    codes_r = _codes_from_table(right, layout.specs)
    if codes_l.shape != codes_r.shape:
        raise ValueError("left and right profile tables differ in shape")
    t = encode_codes(codes_l, layout) - encode_codes(codes_r, layout)
    resp_idx, n_resp = _respondents(respondent_ids, codes_l.shape[0])
    return DesignMatrix(
        t=t,
        layout=layout,
        kind="forced_choice",
        respondent_index=resp_idx,
        n_respondents=n_resp,
        levels_left=codes_l,
        levels_right=codes_r,
        y=None if y is None else np.asarray(y, dtype=float),
    )


def _respondents(respondent_ids, n_rows):
    if respondent_ids is None:
        return np.arange(n_rows, dtype=np.int64), n_rows
    ids = pd.Series(respondent_ids)
    codes, _ = pd.factorize(ids, sort=False)
    return codes.astype(np.int64), int(codes.max()) + 1


@dataclass
class ConstraintMatrix:
    """Sum-to-zero constraints ``C^T beta = 0`` and their null-space basis.

    ``basis`` has orthonormal columns, so the left inverse reduces to the
    transpose: reduced coordinates are ``basis.T @ beta``.
    """

    c_t: np.ndarray
    basis: np.ndarray

    @property
    def p(self) -> int:
        return self.c_t.shape[1]

    @property
    def dim_reduced(self) -> int:
        return self.basis.shape[1]

    def project(self, beta_raw: np.ndarray) -> np.ndarray:
        return self.basis.T @ beta_raw

    def lift(self, beta_reduced: np.ndarray) -> np.ndarray:
        return self.basis @ beta_reduced


def build_constraints(layout: DesignLayout) -> ConstraintMatrix:
    """One sum-to-zero row per main factor; for every interaction pair one
    row per fixed level of either factor, summing over the present cells."""
    if not layout.specs:
        raise ValueError("empty factor list")
    rows = []
    p = layout.p_raw
    for j, s in enumerate(layout.specs):
        r = np.zeros(p)
        r[layout.main_offsets[j] : layout.main_offsets[j] + s.n_levels] = 1.0
        rows.append(r)
    for a, b in layout.interaction_pairs:
        cols = layout.cell_columns[(a, b)]
        La, Lb = cols.shape
        for lb in range(Lb):
            r = np.zeros(p)
            present = cols[:, lb]
            r[present[present >= 0]] = 1.0
            rows.append(r)
        for la in range(La):
            r = np.zeros(p)
            present = cols[la, :]
            r[present[present >= 0]] = 1.0
            rows.append(r)
    c_t = np.vstack(rows)
    basis = null_space(c_t)
    return ConstraintMatrix(c_t=c_t, basis=basis)


def constraints_from_rows(c_t: np.ndarray) -> ConstraintMatrix:
    """Constraint object for an explicit row matrix (used by the LOG expansion)."""
    return ConstraintMatrix(c_t=c_t, basis=null_space(c_t))


def project_design(design: DesignMatrix, cm: ConstraintMatrix) -> DesignMatrix:
    """Map a raw design into unconstrained reduced coordinates."""
    if design.reduced:
        raise ValueError("design is already in reduced coordinates")
    if design.t.shape[1] != cm.p:
        raise ValueError(
            f"design has {design.t.shape[1]} columns but constraints expect {cm.p}"
        )
    return replace(design, t=design.t @ cm.basis, reduced=True, cm=cm)


def lift_coefficients(beta_reduced: np.ndarray, cm: ConstraintMatrix) -> np.ndarray:
    """Map reduced coefficients back to raw coordinates; satisfies C^T beta = 0."""
    return cm.lift(np.asarray(beta_reduced, dtype=float))
