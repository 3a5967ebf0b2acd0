"""One streaming update step of the dynamic fine codebook.

A step matches the batch against the Active slots, folds matched items into
the EMA statistics, sweeps occupancy, grows new clusters from the unmatched
items by union-find over the similarity graph, and slots them in with
fill-then-append. Items that neither match nor join a large enough component
go back to the batcher.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import occupancy
from .batcher import TagBatcher
from .core import AssignmentIndex, FineCodebook, IndexConfig, ItemRecord, normalize_rows

log = logging.getLogger(__name__)


class UnionFind:
    """Disjoint sets over ``0..n-1`` where every root is its set's smallest element.

    ``union_edges`` links a whole edge list at once by repeated hooking of the
    larger root under the smaller one followed by pointer jumping.
    """

    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)

    def find(self, x: int) -> int:
        p = self.parent
        while p[x] != x:
            p[x] = p[p[x]]
            x = int(p[x])
        return int(x)

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            lo, hi = min(ra, rb), max(ra, rb)
            self.parent[hi] = lo

    def _compress(self) -> None:
        p = self.parent
        while True:
            pp = p[p]
            if np.array_equal(pp, p):
                break
            p = pp
        self.parent = p

    def union_edges(self, u: np.ndarray, v: np.ndarray) -> None:
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        self._compress()
        while u.size:
            ru, rv = self.parent[u], self.parent[v]
            cross = ru != rv
            if not cross.any():
                break
            u, v, ru, rv = u[cross], v[cross], ru[cross], rv[cross]
            np.minimum.at(self.parent, np.maximum(ru, rv), np.minimum(ru, rv))
            self._compress()

    def roots(self) -> np.ndarray:
        self._compress()
        return self.parent.copy()


def _stack(batch: Sequence[ItemRecord], d: Optional[int] = None) -> np.ndarray:
    if not batch:
        return np.zeros((0, d or 0))
    return np.stack([it.embedding for it in batch])


@dataclass
class MatchResult:
    best: np.ndarray  # best Active slot per item, -1 if the codebook had none
    score: np.ndarray  # best cosine per item, -inf if the codebook had none
    matched: np.ndarray  # bool mask: score >= tau
    embeddings: np.ndarray

    @property
    def matched_idx(self) -> np.ndarray:
        return np.flatnonzero(self.matched)

    @property
    def failed_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.matched)


def match_scores(embeddings: np.ndarray, fine: FineCodebook) -> tuple[np.ndarray, np.ndarray]:
    """Best Active slot and its cosine for each row; lowest index wins ties."""
    n = embeddings.shape[0]
    idx, cw = fine.active_codewords()
    if idx.size == 0 or n == 0:
        return np.full(n, -1, dtype=np.int64), np.full(n, -np.inf)
    sims = normalize_rows(embeddings) @ normalize_rows(cw).T
    np.clip(sims, -1.0, 1.0, out=sims)
    arg = sims.argmax(axis=1)
    return idx[arg].astype(np.int64), sims[np.arange(n), arg]


def match_batch(batch: Sequence[ItemRecord], fine: FineCodebook, cfg: IndexConfig) -> MatchResult:
    emb = _stack(batch, fine.d)
    best, score = match_scores(emb, fine)
    return MatchResult(best=best, score=score, matched=score >= cfg.tau, embeddings=emb)


def update_clusters(match: MatchResult, fine: FineCodebook, cfg: IndexConfig) -> None:
    """EMA update of every Active slot; slots without matches only decay."""
    idx = fine.active_indices
    if idx.size == 0:
        return
    n = len(fine)
    hit = match.matched_idx
    sums = np.zeros((n, fine.d))
    np.add.at(sums, match.best[hit], match.embeddings[hit])
    counts = np.bincount(match.best[hit], minlength=n).astype(np.float64)

    g = cfg.gamma
    S = g * fine.ema_sum[idx] + (1.0 - g) * sums[idx]
    N = g * fine.ema_count[idx] + (1.0 - g) * counts[idx]
    fine.ema_sum[idx] = S
    fine.ema_count[idx] = N
    pos = N > 0
    fine.codewords[idx[pos]] = S[pos] / N[pos][:, None]


@dataclass
class NewCluster:
    members: list[int]  # positions in the failed list
    item_ids: list[int]
    embedding_sum: np.ndarray

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def mean(self) -> np.ndarray:
        return self.embedding_sum / self.size


@dataclass
class UnionFindResult:
    groups: list[NewCluster]  # every component, ordered by smallest member position
    valid: list[NewCluster]
    rejected: list[int]  # positions in the failed list


def similarity_components(embeddings: np.ndarray, threshold: float) -> np.ndarray:
    """Component root (smallest member) per row of the graph ``cosine >= threshold``."""
    n = embeddings.shape[0]
    uf = UnionFind(n)
    if n > 1:
        u = normalize_rows(embeddings)
        sims = u @ u.T
        iu, iv = np.nonzero(np.triu(sims >= threshold, k=1))
        uf.union_edges(iu, iv)
    return uf.roots()


def union_find_extend(failed: Sequence[ItemRecord], cfg: IndexConfig) -> UnionFindResult:
    if not failed:
        return UnionFindResult([], [], [])
    emb = _stack(failed)
    roots = similarity_components(emb, cfg.tau_prime)
    order = np.argsort(roots, kind="stable")
    bounds = np.flatnonzero(np.diff(roots[order])) + 1
    groups, valid, rejected = [], [], []
    for members in np.split(order, bounds):
        members = sorted(int(i) for i in members)
        g = NewCluster(
            members=members,
            item_ids=[int(failed[i].item_id) for i in members],
            embedding_sum=emb[members].sum(axis=0),
        )
        groups.append(g)
        if g.size >= cfg.m:
            valid.append(g)
        else:
            rejected.extend(members)
    rejected.sort()
    return UnionFindResult(groups, valid, rejected)


def fill_then_append(fine: FineCodebook, valid: Sequence[NewCluster]) -> list[int]:
    """Place new clusters, largest first, into Empty slots then at the tail.

    Returns the slot index of each cluster in the order of ``valid``.
    """
    order = sorted(range(len(valid)), key=lambda j: (-valid[j].size, min(valid[j].item_ids)))
    empty = list(fine.empty_indices)
    slots = [0] * len(valid)
    for rank, j in enumerate(order):
        k = int(empty[rank]) if rank < len(empty) else fine.append_empty()
        fine.activate(k, valid[j].embedding_sum, float(valid[j].size))
        slots[j] = k
    return slots


@dataclass
class StepReport:
    step: int
    matched_count: int
    new_clusters: int
    reset_count: int
    recycled_count: int
    codebook_active_size: int
    matched_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)
    matched_slots: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)
    matched_scores: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    new_slots: list[int] = field(default_factory=list, repr=False)
    reset_slots: list[int] = field(default_factory=list, repr=False)
    rejected: list[ItemRecord] = field(default_factory=list, repr=False)

    def to_log(self) -> dict:
        return {
            "step": self.step,
            "matched_count": self.matched_count,
            "new_clusters": self.new_clusters,
            "reset_count": self.reset_count,
            "recycled_count": self.recycled_count,
            "codebook_active_size": self.codebook_active_size,
        }


class DynamicIndexer:
    """Owns the fine codebook and the assignment index for one training run."""

    def __init__(
        self,
        cfg: IndexConfig,
        fine: Optional[FineCodebook] = None,
        index: Optional[AssignmentIndex] = None,
        batcher: Optional[TagBatcher] = None,
        step_log=None,
    ):
        self.cfg = cfg
        self.fine = fine if fine is not None else FineCodebook(cfg.d)
        self.index = index if index is not None else AssignmentIndex()
        self.batcher = batcher
        self.step_log = step_log
        self.unindexed = 0

    def run_step(self, batch: Sequence[ItemRecord]) -> StepReport:
        cfg, fine = self.cfg, self.fine
        fine.step += 1
        match = match_batch(batch, fine, cfg)
        update_clusters(match, fine, cfg)

        hit = match.matched_idx
        matched_ids = np.array([batch[i].item_id for i in hit], dtype=np.int64)
        self.index.assign_many(matched_ids.tolist(), match.best[hit].tolist())

        resets = occupancy.sweep(fine, cfg, self.index)

        failed = [batch[i] for i in match.failed_idx]
        uf = union_find_extend(failed, cfg)
        new_slots = fill_then_append(fine, uf.valid)
        for g, k in zip(uf.valid, new_slots):
            self.index.assign_many(g.item_ids, [k] * g.size)

        rejected = [failed[i] for i in uf.rejected]
        if self.batcher is not None:
            self.batcher.recycle(rejected)

        report = StepReport(
            step=fine.step,
            matched_count=int(hit.size),
            new_clusters=len(new_slots),
            reset_count=len(resets),
            recycled_count=len(rejected),
            codebook_active_size=fine.n_active,
            matched_ids=matched_ids,
            matched_slots=match.best[hit],
            matched_scores=match.score[hit],
            new_slots=new_slots,
            reset_slots=resets,
            rejected=rejected,
        )
        line = json.dumps(report.to_log())
        log.debug(line)
        if self.step_log is not None:
            self.step_log.write(line + "\n")
        return report

    def train(self, stream: Iterable[ItemRecord], on_step=None) -> list[StepReport]:
        """Feed a whole stream through the batcher, then flush once.

        Items rejected during the flush batches stay unindexed.
        """
        if self.batcher is None:
            self.batcher = TagBatcher(self.cfg.batch_size)
        reports = []
        for item in stream:
            batch = self.batcher.push(item)
            if batch is not None:
                reports.append(self.run_step(batch))
                if on_step is not None:
                    on_step(reports[-1])
        tail = self.batcher.flush()
        batcher, self.batcher = self.batcher, None
        try:
            for batch in tail:
                rep = self.run_step(batch)
                self.unindexed += rep.recycled_count
                reports.append(rep)
                if on_step is not None:
                    on_step(rep)
        finally:
            self.batcher = batcher
        return reports
