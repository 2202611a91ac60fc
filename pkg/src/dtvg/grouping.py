"""Source-task subset scoring and selection.

Target Similarity is the mean source-to-target similarity of a subset;
Knowledge Consistency is the mean pairwise similarity inside it (zero for
subsets smaller than two). Selection is done two ways: the ranked greedy
scan (admit a candidate iff its target similarity is nonnegative and it does
not decrease Knowledge Consistency), and an exact enumeration over all
subsets maximizing TS + lambda * KC, used as an oracle against the greedy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

SYMMETRY_TOL = 1e-12
EXACT_SOLVER_MAX_N = 20


@dataclass(frozen=True)
class SimTable:
    """Pairwise similarity inputs for one grouping decision.

    `s2t[i]` is the similarity of source i to the target; `s2s` is the
    symmetric source-to-source matrix. The diagonal is stored but never read
    by the scoring functions.
    """

    source_ids: tuple[str, ...]
    s2t: np.ndarray
    s2s: np.ndarray

    def __post_init__(self) -> None:
        s2t = np.array(self.s2t, dtype=np.float64)
        s2s = np.array(self.s2s, dtype=np.float64)
        n = len(self.source_ids)
        if len(set(self.source_ids)) != n:
            raise ValueError("duplicate source ids")
        if s2t.shape != (n,):
            raise ValueError(f"s2t shape {s2t.shape} does not match {n} sources")
        if s2s.shape != (n, n):
            raise ValueError(f"s2s shape {s2s.shape} does not match {n} sources")
        if not (np.all(np.isfinite(s2t)) and np.all(np.isfinite(s2s))):
            raise ValueError("non-finite similarity entries")
        if n > 0 and np.max(np.abs(s2s - s2s.T)) > SYMMETRY_TOL:
            raise ValueError("s2s is not symmetric")
        s2t.setflags(write=False)
        s2s.setflags(write=False)
        object.__setattr__(self, "source_ids", tuple(self.source_ids))
        object.__setattr__(self, "s2t", s2t)
        object.__setattr__(self, "s2s", s2s)

    @property
    def n(self) -> int:
        return len(self.source_ids)


@dataclass(frozen=True)
class Decision:
    """One greedy scan step: the candidate, its scores, and the verdict."""

    source_id: str
    s2t: float
    delta_kc: float
    admitted: bool


@dataclass(frozen=True)
class GroupingResult:
    selected: tuple[str, ...]  # admission order
    rank_list: tuple[str, ...]
    ts: float
    kc: float
    objective: float  # ts + lambda * kc (lambda = 1 for greedy results)
    decisions: tuple[Decision, ...]

    def to_json_dict(self) -> dict:
        return {
            "selected": list(self.selected),
            "rank_list": list(self.rank_list),
            "ts": self.ts,
            "kc": self.kc,
            "objective": self.objective,
            "decisions": [
                {
                    "source_id": d.source_id,
                    "s2t": d.s2t,
                    "delta_kc": d.delta_kc,
                    "admitted": d.admitted,
                }
                for d in self.decisions
            ],
        }


def _validate_subset(table: SimTable, subset: Sequence[int]) -> list[int]:
    idx = list(subset)
    if len(set(idx)) != len(idx):
        raise ValueError("duplicate members in subset")
    for i in idx:
        if not 0 <= i < table.n:
            raise ValueError(f"subset member {i} out of range")
    return idx


def target_similarity(table: SimTable, subset: Sequence[int]) -> float:
    """Mean s2t over the subset, summed in ascending index order."""
    idx = sorted(_validate_subset(table, subset))
    if not idx:
        raise ValueError("target similarity of the empty subset is undefined")
    acc = 0.0
    for i in idx:
        acc += float(table.s2t[i])
    return acc / len(idx)


def knowledge_consistency(table: SimTable, subset: Sequence[int]) -> float:
    """Mean pairwise s2s inside the subset; exactly 0 for fewer than 2 members.

    Pairs are accumulated in ascending (i, j) order so the value is invariant
    under relabeling of the subset.
    """
    idx = sorted(_validate_subset(table, subset))
    k = len(idx)
    if k < 2:
        return 0.0
    acc = 0.0
    for a in range(k):
        for b in range(a + 1, k):
            acc += float(table.s2s[idx[a], idx[b]])
    return 2.0 * acc / (k * (k - 1))


def rank_by_target_similarity(table: SimTable) -> list[int]:
    """Indices by descending s2t; ties broken by ascending original index."""
    return sorted(range(table.n), key=lambda i: (-table.s2t[i], i))


def greedy_group(
    table: SimTable,
    *,
    early_stop: bool = False,
    strict_sim: bool = False,
) -> GroupingResult:
    """Ranked greedy scan admitting candidates that do not hurt consistency.

    A candidate is admitted iff its target similarity is >= 0 (> 0 with
    `strict_sim`) and adding it does not decrease KC. By default every ranked
    candidate is examined; `early_stop` instead abandons the scan at the
    first candidate whose KC contribution is negative, which is the
    "add until KC stops increasing" reading.
    """
    order = rank_by_target_similarity(table)
    selected: list[int] = []
    decisions: list[Decision] = []
    kc_current = 0.0
    for i in order:
        s2t_i = float(table.s2t[i])
        delta = knowledge_consistency(table, selected + [i]) - kc_current
        sim_ok = s2t_i > 0.0 if strict_sim else s2t_i >= 0.0
        admitted = sim_ok and delta >= 0.0
        decisions.append(Decision(table.source_ids[i], s2t_i, delta, admitted))
        if admitted:
            selected.append(i)
            kc_current = knowledge_consistency(table, selected)
        elif early_stop and sim_ok and delta < 0.0:
            break
    ts = target_similarity(table, selected) if selected else 0.0
    kc = knowledge_consistency(table, selected)
    return GroupingResult(
        selected=tuple(table.source_ids[i] for i in selected),
        rank_list=tuple(table.source_ids[i] for i in order),
        ts=ts,
        kc=kc,
        objective=ts + kc,
        decisions=tuple(decisions),
    )


def exact_group(table: SimTable, lam: float = 1.0) -> GroupingResult:
    """Exhaustive argmax of TS + lambda * KC over all subsets.

    The empty subset is representable with objective 0. Ties go to the
    smaller subset, then to the lexicographically smaller index tuple.
    Guarded at n <= 20; the enumeration is the plain 2^n scan, so large n is
    slow, which is fine for an oracle.
    """
    n = table.n
    if n > EXACT_SOLVER_MAX_N:
        raise ValueError(f"exact solver size limit: n={n} > {EXACT_SOLVER_MAX_N}")
    best_obj = 0.0
    best_idx: tuple[int, ...] = ()
    for mask in range(1, 1 << n):
        idx = tuple(i for i in range(n) if mask & (1 << i))
        obj = target_similarity(table, idx) + lam * knowledge_consistency(table, idx)
        if obj > best_obj:
            best_obj, best_idx = obj, idx
        elif obj == best_obj and (len(idx), idx) < (len(best_idx), best_idx):
            best_idx = idx
    ts = target_similarity(table, best_idx) if best_idx else 0.0
    kc = knowledge_consistency(table, best_idx)
    return GroupingResult(
        selected=tuple(table.source_ids[i] for i in best_idx),
        rank_list=tuple(table.source_ids[i] for i in rank_by_target_similarity(table)),
        ts=ts,
        kc=kc,
        objective=ts + lam * kc,
        decisions=(),
    )
