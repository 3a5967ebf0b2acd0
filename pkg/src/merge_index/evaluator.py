"""Offline diagnostics: accuracy (I2C), separation (C2C), uniformity, stability, ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import normalize_rows

BIN_WIDTH = 0.02
BIN_EDGES = np.linspace(-1.0, 1.0, int(round(2.0 / BIN_WIDTH)) + 1)

# (low, high] view-count strata; the last one is open-ended.
VV_BUCKETS: tuple[tuple[float, float], ...] = (
    (0, 1_000),
    (1_000, 5_000),
    (5_000, 10_000),
    (10_000, 100_000),
    (100_000, math.inf),
)


@dataclass
class Snapshot:
    """Read-only view of a codebook for evaluation: all rows plus an Active mask."""

    codewords: np.ndarray
    active: np.ndarray

    @property
    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    @classmethod
    def of(cls, codewords, active=None) -> "Snapshot":
        codewords = np.asarray(codewords, dtype=np.float64)
        if active is None:
            active = np.any(codewords != 0, axis=1)
        return cls(codewords, np.asarray(active, dtype=bool))


@dataclass
class EvalSample:
    item_ids: np.ndarray
    embeddings: np.ndarray
    codes: np.ndarray
    popularity: Optional[np.ndarray] = None
    truth: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.item_ids)

    def subset(self, idx) -> "EvalSample":
        pick = lambda a: None if a is None else a[idx]
        return EvalSample(self.item_ids[idx], self.embeddings[idx], self.codes[idx], pick(self.popularity), pick(self.truth))


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    median: float
    n: int
    stale: int = 0

    def rows(self):
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            yield float(lo), float(hi), int(c)


def _histogram(values: np.ndarray, stale: int = 0) -> Histogram:
    values = np.clip(values, -1.0, 1.0)
    counts, edges = np.histogram(values, bins=BIN_EDGES)
    mean = float(values.mean()) if values.size else math.nan
    median = float(np.median(values)) if values.size else math.nan
    return Histogram(edges=edges, counts=counts, mean=mean, median=median, n=int(values.size), stale=stale)


def i2c_values(sample: EvalSample, snap: Snapshot) -> tuple[np.ndarray, int]:
    """Cosine of each sampled item to its assigned codeword; stale codes are dropped."""
    codes = sample.codes
    ok = (codes >= 0) & (codes < len(snap.active))
    ok[ok] = snap.active[codes[ok]]
    e = normalize_rows(sample.embeddings[ok])
    q = normalize_rows(snap.codewords[codes[ok]])
    return np.einsum("ij,ij->i", e, q), int((~ok).sum())


def i2c_histogram(sample: EvalSample, snap: Snapshot) -> Histogram:
    if len(sample) == 0:
        raise ValueError("empty sample")
    vals, stale = i2c_values(sample, snap)
    return _histogram(vals, stale)


def c2c_values(snap: Snapshot, block: int = 1024) -> np.ndarray:
    idx = snap.active_indices
    if idx.size < 2:
        raise ValueError("need at least 2 Active slots for cluster-to-cluster similarity")
    u = normalize_rows(snap.codewords[idx])
    parts = []
    for start in range(0, len(u), block):
        s = u[start : start + block] @ u.T
        rows = np.arange(start, min(start + block, len(u)))
        mask = np.arange(len(u))[None, :] > rows[:, None]
        parts.append(s[mask])
    return np.concatenate(parts)


def c2c_histogram(snap: Snapshot) -> Histogram:
    return _histogram(c2c_values(snap))


def gini(sizes) -> float:
    x = np.sort(np.asarray(sizes, dtype=np.float64))
    n = x.size
    if n == 0 or x.sum() == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    return float((2.0 * (ranks * x).sum()) / (n * x.sum()) - (n + 1.0) / n)


@dataclass
class BucketCurve:
    low: float
    high: float
    n_items: int
    clusters_spanned: int
    x: np.ndarray  # cluster rank (1-based) after sorting by bucket count
    y: np.ndarray  # cumulative share of the bucket's items


@dataclass
class UniformityReport:
    sizes: np.ndarray  # per Active slot, in slot order
    slot_ids: np.ndarray
    max_size: int
    median_size: float  # over occupied slots
    max_median_ratio: float
    occupied: int
    gini: float  # over all Active slots
    degenerate: bool
    curves: list[BucketCurve] = field(default_factory=list)
    omitted_buckets: list[tuple[float, float]] = field(default_factory=list)


def uniformity_report(sample: EvalSample, snap: Snapshot, buckets=VV_BUCKETS) -> UniformityReport:
    if sample.popularity is None:
        raise ValueError("sample carries no popularity")
    slot_ids = snap.active_indices
    codes = sample.codes
    ok = (codes >= 0) & (codes < len(snap.active))
    ok[ok] = snap.active[codes[ok]]
    codes, pop = codes[ok], sample.popularity[ok]
    counts = np.bincount(codes, minlength=len(snap.active))
    sizes = counts[slot_ids]
    occ = sizes[sizes > 0]
    max_size = int(occ.max()) if occ.size else 0
    median = float(np.median(occ)) if occ.size else 0.0
    curves, omitted = [], []
    for lo, hi in buckets:
        sel = (pop > lo) & (pop <= hi)
        if not sel.any():
            omitted.append((lo, hi))
            continue
        per = np.bincount(codes[sel], minlength=len(snap.active))[slot_ids]
        per = np.sort(per[per > 0])[::-1]
        y = np.cumsum(per) / per.sum()
        curves.append(
            BucketCurve(lo, hi, int(sel.sum()), int(per.size), np.arange(1, per.size + 1), y)
        )
    return UniformityReport(
        sizes=sizes,
        slot_ids=slot_ids,
        max_size=max_size,
        median_size=median,
        max_median_ratio=max_size / median if median > 0 else math.inf,
        occupied=int(occ.size),
        gini=gini(sizes),
        degenerate=occ.size < 2,
        curves=curves,
        omitted_buckets=omitted,
    )


def stability_threshold(alpha: float, delta_norm: float, eps: float) -> float:
    """Largest codeword cosine ``q_k . q_j`` under which an eps-perturbation cannot flip k to j."""
    return 1.0 - (eps + math.sqrt(eps * eps + 2.0 * alpha * delta_norm)) ** 2 / (2.0 * alpha * alpha)


@dataclass
class StabilityResult:
    trials: int
    violations: int
    skipped: int  # trials with non-positive alignment
    guarded_pairs: int  # (trial, competitor) pairs covered by the bound


def stability_check(
    snap: Snapshot,
    embeddings: np.ndarray,
    eps: float,
    trials: int,
    seed: int,
    codes: Optional[np.ndarray] = None,
) -> StabilityResult:
    """Count argmax flips toward competitors the stability bound says are safe.

    Codewords and items are unit-normalized here. Each trial draws an item,
    takes its code (or its argmax when ``codes`` is None), draws a perturbation
    uniformly on the radius-``eps`` sphere, and checks every competitor whose
    cosine to the assigned codeword is within the bound.
    """
    rng = np.random.default_rng(seed)
    idx = snap.active_indices
    q = normalize_rows(snap.codewords[idx])
    pos_of = np.full(len(snap.active), -1, dtype=np.int64)
    pos_of[idx] = np.arange(idx.size)
    emb = normalize_rows(np.asarray(embeddings, dtype=np.float64))
    n, d = emb.shape
    violations = skipped = guarded = 0
    for _ in range(trials):
        i = int(rng.integers(n))
        e = emb[i]
        if codes is None:
            k = int(np.argmax(q @ e))
        else:
            k = int(pos_of[codes[i]])
            if k < 0:
                skipped += 1
                continue
        alpha = float(q[k] @ e)
        delta = rng.standard_normal(d)
        delta *= eps / np.linalg.norm(delta)
        if alpha <= 0:
            skipped += 1
            continue
        dn = float(np.linalg.norm(e - alpha * q[k]))
        bound = stability_threshold(alpha, dn, eps)
        cos_k = q @ q[k]
        comp = np.flatnonzero(cos_k <= bound)
        comp = comp[comp != k]
        if comp.size == 0:
            continue
        guarded += int(comp.size)
        moved = q[comp] @ (e + delta)
        own = float(q[k] @ (e + delta))
        # slack for float rounding at exact equality of the bound
        if np.any(moved - own > 1e-12):
            violations += 1
    return StabilityResult(trials=trials, violations=violations, skipped=skipped, guarded_pairs=guarded)


@dataclass
class PairScores:
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    pred_pairs: int
    true_pairs: int
    both_pairs: int


def _pairs(counts: np.ndarray) -> int:
    counts = counts.astype(np.int64)
    return int((counts * (counts - 1) // 2).sum())


def pair_scores(pred, truth) -> PairScores:
    """Pairwise precision/recall of "same predicted cluster" against "same true cluster"."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    _, p_inv = np.unique(pred, return_inverse=True)
    _, t_inv = np.unique(truth, return_inverse=True)
    pp = _pairs(np.bincount(p_inv))
    tp_all = _pairs(np.bincount(t_inv))
    joint = p_inv.astype(np.int64) * (t_inv.max() + 1 if t_inv.size else 1) + t_inv
    both = _pairs(np.unique(joint, return_counts=True)[1]) if joint.size else 0
    precision = both / pp if pp else None
    recall = both / tp_all if tp_all else None
    f1 = None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    return PairScores(precision, recall, f1, pp, tp_all, both)


def ground_truth_scores(sample: EvalSample, snap: Optional[Snapshot] = None) -> PairScores:
    if sample.truth is None:
        raise ValueError("sample has no ground-truth cluster ids")
    codes = sample.codes
    keep = codes >= 0
    if snap is not None:
        keep &= codes < len(snap.active)
        keep[keep] = snap.active[codes[keep]]
    return pair_scores(codes[keep], sample.truth[keep])


@dataclass
class MetricReport:
    i2c: Histogram
    c2c: Optional[Histogram]  # None when fewer than 2 Active slots
    uniformity: Optional[UniformityReport]
    truth: Optional[PairScores]
    stability: Optional[StabilityResult]
    n_active: int
    sample_size: int

    def summary(self) -> dict:
        out = {
            "sample_size": self.sample_size,
            "n_active": self.n_active,
            "i2c_mean": self.i2c.mean,
            "i2c_median": self.i2c.median,
            "i2c_stale": self.i2c.stale,
            "c2c_mean": self.c2c.mean if self.c2c is not None else None,
            "c2c_median": self.c2c.median if self.c2c is not None else None,
        }
        u = self.uniformity
        if u is not None:
            out.update(
                max_size=u.max_size,
                median_size=u.median_size,
                max_median_ratio=None if math.isinf(u.max_median_ratio) else u.max_median_ratio,
                occupied_slots=u.occupied,
                gini=u.gini,
                degenerate_sizes=u.degenerate,
                bucket_clusters={f"{c.low:g}-{c.high:g}": c.clusters_spanned for c in u.curves},
                omitted_buckets=[f"{lo:g}-{hi:g}" for lo, hi in u.omitted_buckets],
            )
        if self.truth is not None:
            out.update(pair_precision=self.truth.precision, pair_recall=self.truth.recall, pair_f1=self.truth.f1)
        if self.stability is not None:
            out.update(
                stability_trials=self.stability.trials,
                stability_violations=self.stability.violations,
                stability_skipped=self.stability.skipped,
            )
        return out


def evaluate(
    sample: EvalSample,
    snap: Snapshot,
    stability_eps: Optional[float] = 0.05,
    stability_trials: int = 10_000,
    seed: int = 0,
) -> MetricReport:
    stability = None
    if stability_eps is not None and stability_trials > 0 and len(sample):
        stability = stability_check(snap, sample.embeddings, stability_eps, stability_trials, seed, sample.codes)
    return MetricReport(
        i2c=i2c_histogram(sample, snap),
        c2c=c2c_histogram(snap) if snap.active.sum() >= 2 else None,
        uniformity=uniformity_report(sample, snap) if sample.popularity is not None else None,
        truth=ground_truth_scores(sample, snap) if sample.truth is not None else None,
        stability=stability,
        n_active=int(snap.active.sum()),
        sample_size=len(sample),
    )
