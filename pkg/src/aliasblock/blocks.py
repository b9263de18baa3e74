"""Step 3: build blocks of four from the selected samples.

For each block type the before and after samples of each of its two
treatment cells are first paired optimally, then the two sets of pairs
are matched to each other; distances are rank-based Mahalanobis.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .assignment import optimal_assignment
from .design import GROUP_NAMES, contrast_orthogonality

# after-period groups 5..8 are BR, Br, bR, br; each type contrasts a pair
TYPE_PAIRS = {1: (5, 6), 2: (5, 7), 3: (5, 8), 4: (6, 7), 5: (6, 8), 6: (7, 8)}


@dataclass(frozen=True)
class BlockTypePlan:
    type_id: int
    groups: Tuple[int, int, int, int]  # T1 after, T2 after, T1 before, T2 before
    signs: Tuple[int, int, int, int]

    def __post_init__(self):
        if sum(self.signs) != 0 or set(self.signs) != {1, -1}:
            raise ValueError("signs must be +1/-1 and sum to zero")
        after = [g for g in self.groups if g >= 5]
        if len(after) != 2 or len(set(self.groups)) != 4:
            raise ValueError("a block type needs two after and two before groups")

    @property
    def treated(self) -> int:
        return self.groups[0]

    @property
    def control(self) -> int:
        return self.groups[1]

    def contrast(self) -> np.ndarray:
        """Group-level weights (+1/-1 on members, 0 elsewhere)."""
        h = np.zeros(8)
        for g, s in zip(self.groups, self.signs):
            h[g - 1] = s
        return h

    def pair_contrast(self) -> np.ndarray:
        """+1 on both periods of the first cell, -1 on the second."""
        h = np.zeros(8)
        h[[self.groups[0] - 1, self.groups[2] - 1]] = 1.0
        h[[self.groups[1] - 1, self.groups[3] - 1]] = -1.0
        return h

    def sign_of(self, g: int) -> int:
        return self.signs[self.groups.index(g)]


def default_plan() -> List[BlockTypePlan]:
    plans = []
    for t, (a1, a2) in TYPE_PAIRS.items():
        plans.append(BlockTypePlan(t, (a1, a2, a1 - 4, a2 - 4), (1, -1, -1, 1)))
    return plans


def sample_allocation(plan: Sequence[BlockTypePlan], P: int = 3) -> Dict[Tuple[int, int], int]:
    """Map (group, type_id) to the sample index used for that slot: the
    p-th type containing a group (ascending type id) gets its sample p."""
    slots = {}
    for g in range(1, 9):
        types = sorted(pl.type_id for pl in plan if g in pl.groups)
        if len(types) != P:
            raise ValueError(f"group {g} appears in {len(types)} block types, expected P={P}")
        for p, t in enumerate(types):
            slots[(g, t)] = p
    return slots


@dataclass(frozen=True)
class BlockMember:
    group: int
    sign: int
    individual_id: str


@dataclass(frozen=True)
class Block:
    block_id: int
    type_id: int
    members: Tuple[BlockMember, ...]


@dataclass
class BlockDesign:
    blocks: List[Block] = field(default_factory=list)
    pinv_used: Dict[int, bool] = field(default_factory=dict)

    def type_counts(self) -> Dict[int, int]:
        out: Dict[int, int] = {}
        for b in self.blocks:
            out[b.type_id] = out.get(b.type_id, 0) + 1
        return dict(sorted(out.items()))

    def of_type(self, type_id: int) -> List[Block]:
        return [b for b in self.blocks if b.type_id == type_id]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block_id", "type_id", "role_group", "sign", "individual_id"])
        for b in self.blocks:
            for m in b.members:
                w.writerow([b.block_id, b.type_id, m.group, m.sign, m.individual_id])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "BlockDesign":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        need = {"block_id", "type_id", "role_group", "sign", "individual_id"}
        if rows and not need <= set(rows[0]):
            raise ValueError(f"{path}: missing columns {sorted(need - set(rows[0]))}")
        grouped: Dict[int, list] = {}
        types: Dict[int, int] = {}
        for r in rows:
            bid = int(r["block_id"])
            grouped.setdefault(bid, []).append(
                BlockMember(int(r["role_group"]), int(r["sign"]), r["individual_id"])
            )
            types[bid] = int(r["type_id"])
        blocks = [Block(bid, types[bid], tuple(ms)) for bid, ms in grouped.items()]
        return cls(blocks)


def check_design(design: BlockDesign, plan: Sequence[BlockTypePlan],
                 s_bar: Optional[int] = None) -> List[str]:
    """Re-check block invariants; returns violation messages."""
    errs = []
    by_type = {pl.type_id: pl for pl in plan}
    seen_ids = set()
    used: Dict[int, set] = {}
    for b in design.blocks:
        if b.block_id in seen_ids:
            errs.append(f"duplicate block id {b.block_id}")
        seen_ids.add(b.block_id)
        pl = by_type.get(b.type_id)
        if pl is None:
            errs.append(f"block {b.block_id}: unknown type {b.type_id}")
            continue
        groups = sorted(m.group for m in b.members)
        if groups != sorted(pl.groups):
            errs.append(f"block {b.block_id}: groups {groups} != plan {sorted(pl.groups)}")
            continue
        for m in b.members:
            if m.sign != pl.sign_of(m.group):
                errs.append(f"block {b.block_id}: sign {m.sign} for group {m.group}")
            ids = used.setdefault(b.type_id, set())
            if m.individual_id in ids:
                errs.append(f"type {b.type_id}: individual {m.individual_id} used twice")
            ids.add(m.individual_id)
    all_ids = [m.individual_id for b in design.blocks for m in b.members]
    if len(all_ids) != len(set(all_ids)):
        errs.append("an individual appears in more than one block")
    if s_bar is not None:
        counts = design.type_counts()
        for pl in plan:
            if counts.get(pl.type_id, 0) != s_bar:
                errs.append(f"type {pl.type_id}: {counts.get(pl.type_id, 0)} blocks, expected {s_bar}")
    return errs


# --- distances -------------------------------------------------------------

def rank_mahalanobis(sample_a, sample_b, covariate_subset=None, return_flag=False):
    """Rank-based Mahalanobis distances between rows of two samples.

    Covariates are replaced by mid-ranks in the pooled sample; the rank
    covariance has every diagonal entry set to (I^2 - 1)/12, the variance
    of untied ranks, with correlations kept (constant columns get none).
    ``D[a, b] = (r_a - r_b)' S^-1 (r_a - r_b)``.  A singular S falls back
    to the pseudo-inverse; ``return_flag`` also returns whether it did.
    """
    A = np.asarray(sample_a, dtype=float)
    B = np.asarray(sample_b, dtype=float)
    if A.ndim == 1:
        A = A.reshape(-1, 1)
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    if covariate_subset is not None:
        cols = list(covariate_subset)
        A, B = A[:, cols], B[:, cols]
    if A.shape[1] != B.shape[1]:
        raise ValueError("samples differ in covariate count")
    na, nb = A.shape[0], B.shape[0]
    I = na + nb
    if I < 2:
        raise ValueError("pooled sample must have at least two units")
    K = A.shape[1]
    if K == 0:
        D = np.zeros((na, nb))
        return (D, False) if return_flag else D
    R = rankdata(np.vstack([A, B]), axis=0, method="average")
    sd = R.std(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        Z = (R - R.mean(axis=0)) / sd
    Z[:, sd == 0] = 0.0
    corr = (Z.T @ Z) / I
    np.fill_diagonal(corr, 1.0)
    S = corr * (I * I - 1) / 12.0
    flag = False
    try:
        if np.linalg.cond(S) > 1e12:
            raise np.linalg.LinAlgError
        Sinv = np.linalg.inv(S)
    except np.linalg.LinAlgError:
        Sinv = np.linalg.pinv(S)
        flag = True
    Ra, Rb = R[:na], R[na:]
    qa = np.einsum("ij,jk,ik->i", Ra, Sinv, Ra)
    qb = np.einsum("ij,jk,ik->i", Rb, Sinv, Rb)
    D = qa[:, None] + qb[None, :] - 2.0 * Ra @ Sinv @ Rb.T
    D = np.maximum(D, 0.0)
    return (D, flag) if return_flag else D


def pair_within_type(X, sel_a, sel_b, covariates=None, return_flag=False):
    """Optimal one-to-one pairing of rows ``sel_a`` with rows ``sel_b`` of
    X; returns a list of (a, b) row indices in the order of ``sel_a``."""
    sel_a = np.asarray(sel_a, dtype=int)
    sel_b = np.asarray(sel_b, dtype=int)
    if sel_a.size != sel_b.size:
        raise ValueError(f"size mismatch: {sel_a.size} vs {sel_b.size}")
    if sel_a.size == 0:
        return ([], False) if return_flag else []
    if sel_a.size == 1:
        pairs = [(int(sel_a[0]), int(sel_b[0]))]
        return (pairs, False) if return_flag else pairs
    D, flag = rank_mahalanobis(X[sel_a], X[sel_b], covariates, return_flag=True)
    perm = optimal_assignment(D)
    pairs = [(int(sel_a[i]), int(sel_b[perm[i]])) for i in range(sel_a.size)]
    return (pairs, flag) if return_flag else pairs


def cross_pair_cost(D, n):
    """Cost of matching pair i of A with pair j of B from a (2n, 2n)
    distance matrix whose rows are A's units (first members, then second
    members) and columns B's units likewise."""
    return D[:n, :n] + D[:n, n:] + D[n:, :n] + D[n:, n:]


def pair_of_pairs(X, pairs_a, pairs_b, covariates=None, return_flag=False):
    """Match pairs of A to pairs of B minimizing the summed four crossing
    distances; returns a list of (index into pairs_a, index into pairs_b)."""
    if len(pairs_a) != len(pairs_b):
        raise ValueError(f"size mismatch: {len(pairs_a)} vs {len(pairs_b)}")
    n = len(pairs_a)
    if n == 0:
        return ([], False) if return_flag else []
    a_units = np.array([p[0] for p in pairs_a] + [p[1] for p in pairs_a], dtype=int)
    b_units = np.array([p[0] for p in pairs_b] + [p[1] for p in pairs_b], dtype=int)
    D, flag = rank_mahalanobis(X[a_units], X[b_units], covariates, return_flag=True)
    perm = optimal_assignment(cross_pair_cost(D, n))
    out = [(i, int(perm[i])) for i in range(n)]
    return (out, flag) if return_flag else out


def aliased_covariates(plan: BlockTypePlan, group_targets) -> List[int]:
    """Covariates whose per-group targets differ between the block's two
    cells in a way the between-pair contrast picks up; they cannot be
    matched across the pairs."""
    T = np.asarray(group_targets, dtype=float)
    h = plan.pair_contrast()
    out = []
    for k in range(T.shape[1]):
        _, aliased = contrast_orthogonality(h, T[:, k])
        if aliased:
            out.append(k)
    return out


def assemble_design(X, ids, samples, plan: Optional[Sequence[BlockTypePlan]] = None,
                    group_targets=None, within_covariates=None, exclude=None,
                    threads: int = 1) -> BlockDesign:
    """Build all blocks.

    Parameters
    ----------
    X : (N, K) covariates for the whole population
    ids : N identifiers
    samples : dict group -> list of P arrays of row indices
    plan : block types (default: the six-type plan)
    group_targets : (8, K) per-group balance targets; covariates aliased
        with a type's between-pair contrast are left out of that type's
        pair-of-pairs distance
    within_covariates : covariates for before-after pairing (default all)
    exclude : optional dict type_id -> covariate indices overriding the
        computed exclusions
    """
    plan = list(plan or default_plan())
    X = np.asarray(X, dtype=float)
    K = X.shape[1]
    P = len(next(iter(samples.values())))
    slots = sample_allocation(plan, P)
    sizes = {len(s) for lst in samples.values() for s in lst}
    if len(sizes) != 1:
        raise ValueError(f"samples differ in size: {sorted(sizes)}")

    def build(pl):
        sel = {g: np.asarray(samples[g][slots[(g, pl.type_id)]], dtype=int) for g in pl.groups}
        t1a, t2a, t1b, t2b = pl.groups
        pairs1, f1 = pair_within_type(X, sel[t1b], sel[t1a], within_covariates, True)
        pairs2, f2 = pair_within_type(X, sel[t2b], sel[t2a], within_covariates, True)
        if exclude is not None and pl.type_id in exclude:
            drop = set(exclude[pl.type_id])
        elif group_targets is not None:
            drop = set(aliased_covariates(pl, group_targets))
        else:
            drop = set()
        cols = [k for k in range(K) if k not in drop]
        match, f3 = pair_of_pairs(X, pairs1, pairs2, cols, True)
        return pl, pairs1, pairs2, match, f1 or f2 or f3

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(build, plan))
    else:
        results = [build(pl) for pl in plan]

    blocks: List[Block] = []
    flags = {}
    bid = 0
    for pl, pairs1, pairs2, match, flag in sorted(results, key=lambda r: r[0].type_id):
        flags[pl.type_id] = bool(flag)
        t1a, t2a, t1b, t2b = pl.groups
        for i, j in match:
            b1, a1 = pairs1[i]
            b2, a2 = pairs2[j]
            bid += 1
            rows = {t1a: a1, t2a: a2, t1b: b1, t2b: b2}
            members = tuple(
                BlockMember(g, pl.sign_of(g), str(ids[rows[g]])) for g in pl.groups
            )
            blocks.append(Block(bid, pl.type_id, members))
    return BlockDesign(blocks, flags)
