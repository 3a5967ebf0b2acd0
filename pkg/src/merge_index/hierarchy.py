"""Fine-to-coarse merging: greedy affinity merges, silhouette pruning, reconnection.

Prototypes live in a fixed-size working array; merging ``x < y`` writes the
result into position ``x`` and retires ``y``, so the relative order of live
positions always matches list order with deletion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import CoarseCodebook, CoarsePrototype, FineCodebook, IndexConfig, cosine_similarity


def affinity(x: CoarsePrototype, y: CoarsePrototype, cfg: IndexConfig) -> float:
    """Cosine minus a size penalty on the smaller of the two counts."""
    return cosine_similarity(x.embedding, y.embedding) - cfg.lam * min(x.ema_count, y.ema_count)


def merge_pair(x: CoarsePrototype, y: CoarsePrototype) -> CoarsePrototype:
    total = x.ema_count + y.ema_count
    if total == 0:
        raise ValueError("cannot merge two prototypes with zero total count")
    emb = (x.ema_count * np.asarray(x.embedding) + y.ema_count * np.asarray(y.embedding)) / total
    return CoarsePrototype(embedding=emb, ema_count=total, members=sorted(set(x.members) | set(y.members)))


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("prototype with zero embedding")
    return v / n


@dataclass
class MergeState:
    """Working set of prototypes for one hierarchy build."""

    prototypes: list[CoarsePrototype]
    target_size: int
    round: int = 0
    max_rounds: int = 10
    merged_flags: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.merged_flags:
            self.merged_flags = [len(p.members) > 1 for p in self.prototypes]

    @classmethod
    def from_fine(cls, fine: FineCodebook, target_size: int, max_rounds: int = 10) -> "MergeState":
        protos = [
            CoarsePrototype(
                embedding=fine.codewords[k].copy(), ema_count=float(fine.ema_count[k]), members=[int(k)]
            )
            for k in fine.active_indices
        ]
        return cls(protos, target_size=target_size, max_rounds=max_rounds)

    def __len__(self) -> int:
        return len(self.prototypes)

    @property
    def total_count(self) -> float:
        return float(sum(p.ema_count for p in self.prototypes))


class _AffinityCache:
    """Symmetric affinity matrix with a per-row best-partner cache."""

    def __init__(self, protos: list[CoarsePrototype], lam: float):
        n = len(protos)
        self.lam = lam
        self.unit = np.stack([_unit(np.asarray(p.embedding, dtype=np.float64)) for p in protos])
        self.count = np.array([p.ema_count for p in protos], dtype=np.float64)
        self.alive = np.ones(n, dtype=bool)
        self.A = np.full((n, n), -np.inf)
        for i in range(n):
            self._fill(i)
        self.row_best = np.empty(n, dtype=np.int64)
        self.row_max = np.empty(n)
        self._refresh_rows(np.arange(n))

    def _column(self, i: int) -> np.ndarray:
        col = self.unit @ self.unit[i] - self.lam * np.minimum(self.count, self.count[i])
        col[~self.alive] = -np.inf
        col[i] = -np.inf
        return col

    def _fill(self, i: int) -> None:
        col = self._column(i)
        self.A[i, :] = col
        self.A[:, i] = col

    def _refresh_rows(self, rows: np.ndarray) -> None:
        if rows.size == 0:
            return
        best = self.A[rows].argmax(axis=1)
        self.row_best[rows] = best
        self.row_max[rows] = self.A[rows, best]

    def best_pair(self) -> tuple[int, int]:
        i = int(np.argmax(self.row_max))
        j = int(self.row_best[i])
        return (i, j) if i < j else (j, i)

    def merge(self, x: int, y: int, unit: np.ndarray, count: float) -> None:
        """Replace ``x`` by the merged prototype and retire ``y``."""
        self.alive[y] = False
        self.A[y, :] = -np.inf
        self.A[:, y] = -np.inf
        self.row_max[y] = -np.inf
        self.unit[x] = unit
        self.count[x] = count
        self._fill(x)
        col = self.A[:, x]
        stale = self.alive & ((self.row_best == x) | (self.row_best == y))
        stale[x] = True
        better = self.alive & ~stale & (
            (col > self.row_max) | ((col == self.row_max) & (x < self.row_best))
        )
        self.row_best[better] = x
        self.row_max[better] = col[better]
        self._refresh_rows(np.flatnonzero(stale))


def merge_round(state: MergeState, cfg: IndexConfig) -> None:
    """Greedily merge the highest-affinity pair until the target size is reached."""
    protos = state.prototypes
    if len(protos) <= max(state.target_size, 1):
        return
    cache = _AffinityCache(protos, cfg.lam)
    slots: list[Optional[CoarsePrototype]] = list(protos)
    flags = list(state.merged_flags)
    live = len(slots)
    while live > state.target_size:
        x, y = cache.best_pair()
        merged = merge_pair(slots[x], slots[y])
        slots[x], slots[y] = merged, None
        flags[x] = True
        cache.merge(x, y, _unit(merged.embedding), merged.ema_count)
        live -= 1
    state.prototypes = [p for p in slots if p is not None]
    state.merged_flags = [f for p, f in zip(slots, flags) if p is not None]


def slot_distances(fine: FineCodebook, slots, cfg: IndexConfig) -> np.ndarray:
    """``1 - affinity`` between fine slots, using each slot's own count."""
    slots = np.asarray(slots, dtype=np.int64)
    cw = fine.codewords[slots]
    unit = cw / np.linalg.norm(cw, axis=1, keepdims=True)
    counts = fine.ema_count[slots]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    return 1.0 - (cos - cfg.lam * np.minimum(counts[:, None], counts[None, :]))


def _labels(state: MergeState, slot_pos: dict[int, int]) -> np.ndarray:
    labels = np.empty(len(slot_pos), dtype=np.int64)
    for c, p in enumerate(state.prototypes):
        for q in p.members:
            labels[slot_pos[q]] = c
    return labels


def silhouettes(state: MergeState, dist: np.ndarray, slot_pos: dict[int, int]) -> dict[int, float]:
    """Silhouette of every fine slot that sits in a prototype with >= 2 members.

    ``dist`` is the slot distance matrix indexed through ``slot_pos``.
    """
    n_protos = len(state.prototypes)
    out: dict[int, float] = {}
    if n_protos < 2:
        for p in state.prototypes:
            for q in p.members:
                out[q] = 0.0
        return out
    labels = _labels(state, slot_pos)
    onehot = np.zeros((len(labels), n_protos))
    onehot[np.arange(len(labels)), labels] = 1.0
    sizes = onehot.sum(axis=0)
    totals = dist @ onehot  # summed distance from each slot to each prototype's members
    for c, p in enumerate(state.prototypes):
        if len(p.members) < 2:
            continue
        for q in p.members:
            i = slot_pos[q]
            a = (totals[i, c] - dist[i, i]) / (sizes[c] - 1)
            others = totals[i] / sizes
            others[c] = np.inf
            b = float(others.min())
            denom = max(a, b)
            out[q] = 0.0 if denom == 0 else float((b - a) / denom)
    return out


def silhouette(q: int, state: MergeState, fine: FineCodebook, cfg: IndexConfig) -> float:
    """Silhouette of fine slot ``q``; 0 for singleton prototypes."""
    slots = sorted(s for p in state.prototypes for s in p.members)
    pos = {s: i for i, s in enumerate(slots)}
    if q not in pos:
        raise KeyError(f"slot {q} is not in the merge state")
    dist = slot_distances(fine, slots, cfg)
    return silhouettes(state, dist, pos).get(q, 0.0)


def _prototype_from(fine: FineCodebook, members: list[int]) -> CoarsePrototype:
    members = sorted(members)
    counts = fine.ema_count[members]
    total = float(counts.sum())
    emb = (counts[:, None] * fine.codewords[members]).sum(axis=0) / total
    return CoarsePrototype(embedding=emb, ema_count=total, members=members)


def prune(
    state: MergeState,
    fine: FineCodebook,
    cfg: IndexConfig,
    dist: Optional[np.ndarray] = None,
    slot_pos: Optional[dict[int, int]] = None,
) -> set[int]:
    """Detach members of merged prototypes whose silhouette is below ``cfg.r``.

    Pruned slots re-enter the working set as singleton prototypes.
    """
    if slot_pos is None:
        slots = sorted(s for p in state.prototypes for s in p.members)
        slot_pos = {s: i for i, s in enumerate(slots)}
    if dist is None:
        dist = slot_distances(fine, sorted(slot_pos, key=slot_pos.get), cfg)
    sil = silhouettes(state, dist, slot_pos)
    pruned: set[int] = set()
    kept_protos, kept_flags, singles = [], [], []
    for p, flag in zip(state.prototypes, state.merged_flags):
        if len(p.members) < 2:
            kept_protos.append(p)
            kept_flags.append(flag)
            continue
        drop = [q for q in p.members if sil.get(q, 0.0) < cfg.r]
        if not drop:
            kept_protos.append(p)
            kept_flags.append(flag)
            continue
        pruned.update(drop)
        rest = [q for q in p.members if q not in pruned]
        if rest:
            kept_protos.append(_prototype_from(fine, rest))
            kept_flags.append(len(rest) > 1)
        singles.extend(drop)
    for q in sorted(singles):
        kept_protos.append(_prototype_from(fine, [q]))
        kept_flags.append(False)
    state.prototypes = kept_protos
    state.merged_flags = kept_flags
    return pruned


def build_hierarchy(
    fine: FineCodebook, cfg: IndexConfig, target_size: int, max_rounds: int = 10
) -> CoarseCodebook:
    """Coarse codebook of exactly ``target_size`` prototypes over the Active fine slots.

    Rounds alternate merging and pruning; pruned and never-merged prototypes
    stay in the working set for the next round. The last round does not prune.
    """
    n_active = fine.n_active
    if target_size < 1:
        raise ValueError("target_size must be >= 1")
    if target_size > n_active:
        raise ValueError(f"target_size {target_size} exceeds the {n_active} Active fine slots")
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    state = MergeState.from_fine(fine, target_size, max_rounds)
    slots = [int(k) for k in fine.active_indices]
    slot_pos = {s: i for i, s in enumerate(slots)}
    dist = slot_distances(fine, slots, cfg) if n_active else np.zeros((0, 0))
    while True:
        state.round += 1
        merge_round(state, cfg)
        if state.round >= max_rounds:
            break
        if not prune(state, fine, cfg, dist, slot_pos):
            break
    parent = np.full(len(fine), -1, dtype=np.int64)
    for c, p in enumerate(state.prototypes):
        parent[p.members] = c
    return CoarseCodebook(prototypes=state.prototypes, parent=parent)
