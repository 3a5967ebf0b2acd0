"""Fixed-size VQ and residual-quantization baselines with EMA codeword updates.

Every item is assigned to its nearest codeword; there is no gate, no slot
creation and no reset. The codebook is seeded with the first ``K`` distinct
embeddings seen during training.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .batcher import TagBatcher
from .core import AssignmentIndex, ItemRecord, normalize_rows

COSINE = "cosine"
EUCLIDEAN = "euclidean"


class VqCodebook:
    def __init__(self, K: int, d: int, metric: str = COSINE, gamma: float = 0.9993):
        if K < 1:
            raise ValueError("K must be positive")
        if metric not in (COSINE, EUCLIDEAN):
            raise ValueError(f"unknown metric {metric!r}")
        self.K = K
        self.d = d
        self.metric = metric
        self.gamma = gamma
        self.codewords = np.zeros((K, d))
        self.ema_sum = np.zeros((K, d))
        self.ema_count = np.zeros(K)
        self.filled = 0
        self.step = 0

    @classmethod
    def from_codewords(cls, codewords, metric: str = COSINE, gamma: float = 0.9993) -> "VqCodebook":
        codewords = np.asarray(codewords, dtype=np.float64)
        cb = cls(codewords.shape[0], codewords.shape[1], metric, gamma)
        cb.codewords[:] = codewords
        cb.ema_sum[:] = codewords
        cb.ema_count[:] = 1.0
        cb.filled = cb.K
        return cb

    @property
    def initialized(self) -> bool:
        return self.filled == self.K

    def scores(self, embeddings: np.ndarray) -> np.ndarray:
        cw = self.codewords[: self.filled]
        x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if self.metric == COSINE:
            s = normalize_rows(x) @ normalize_rows(cw).T
            return np.clip(s, -1.0, 1.0, out=s)
        sq = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ cw.T) + (cw * cw).sum(axis=1)[None, :]
        return -sq

    def assign_batch(self, embeddings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.filled == 0:
            raise ValueError("codebook has no codewords yet")
        s = self.scores(embeddings)
        arg = s.argmax(axis=1)
        return arg.astype(np.int64), s[np.arange(s.shape[0]), arg]

    def equals(self, other: "VqCodebook") -> bool:
        return (
            self.K == other.K
            and self.d == other.d
            and self.metric == other.metric
            and self.gamma == other.gamma
            and self.filled == other.filled
            and self.step == other.step
            and self.codewords.tobytes() == other.codewords.tobytes()
            and self.ema_sum.tobytes() == other.ema_sum.tobytes()
            and self.ema_count.tobytes() == other.ema_count.tobytes()
        )


def vq_assign(e, cb: VqCodebook, metric: Optional[str] = None) -> tuple[int, float]:
    """Nearest codeword under ``metric`` (defaults to the codebook's); lowest index on ties."""
    cw = cb.codewords[: cb.filled]
    if cw.shape[0] == 0:
        raise ValueError("codebook has no codewords yet")
    e = np.asarray(e, dtype=np.float64)
    metric = metric or cb.metric
    best, best_score = 0, -np.inf
    if metric == COSINE:
        en = e / np.linalg.norm(e)
        for k, c in enumerate(cw):
            s = float(np.clip(en @ (c / np.linalg.norm(c)), -1.0, 1.0))
            if s > best_score:
                best, best_score = k, s
    else:
        for k, c in enumerate(cw):
            diff = e - c
            s = -float(diff @ diff)
            if s > best_score:
                best, best_score = k, s
    return best, best_score


def rq_assign(e, layers: Sequence[VqCodebook]) -> list[int]:
    """Residual codes ``[c1, ..., cL]``: each layer quantizes what the previous left over."""
    if not layers:
        raise ValueError("need at least one layer")
    residual = np.asarray(e, dtype=np.float64).copy()
    codes = []
    for cb in layers:
        k, _ = vq_assign(residual, cb)
        codes.append(k)
        residual = residual - cb.codewords[k]
    return codes


def rq_assign_batch(embeddings: np.ndarray, layers: Sequence[VqCodebook]) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized residual codes, shape ``(n, L)``, and the final residuals."""
    residual = np.array(embeddings, dtype=np.float64)
    codes = np.empty((residual.shape[0], len(layers)), dtype=np.int64)
    for l, cb in enumerate(layers):
        k, _ = cb.assign_batch(residual)
        codes[:, l] = k
        residual = residual - cb.codewords[k]
    return codes, residual


def _seed(cb: VqCodebook, emb: np.ndarray) -> np.ndarray:
    """Fill free codewords from distinct rows of ``emb``; returns rows consumed (or -1)."""
    slot_of = np.full(emb.shape[0], -1, dtype=np.int64)
    seen = {cb.codewords[k].tobytes() for k in range(cb.filled)}
    for i in range(emb.shape[0]):
        if cb.filled == cb.K:
            break
        key = emb[i].tobytes()
        if key in seen:
            continue
        seen.add(key)
        k = cb.filled
        cb.codewords[k] = emb[i]
        cb.ema_sum[k] = emb[i]
        cb.ema_count[k] = 1.0
        slot_of[i] = k
        cb.filled += 1
    return slot_of


def vq_update(cb: VqCodebook, emb: np.ndarray, codes: np.ndarray) -> None:
    """Decay every filled codeword's EMA state, then add this batch's assignments."""
    g = cb.gamma
    n = cb.filled
    onehot = np.zeros((emb.shape[0], n))
    onehot[np.arange(emb.shape[0]), codes] = 1.0
    cb.ema_sum[:n] = g * cb.ema_sum[:n] + (1.0 - g) * (onehot.T @ emb)
    cb.ema_count[:n] = g * cb.ema_count[:n] + (1.0 - g) * onehot.sum(axis=0)
    pos = cb.ema_count[:n] > 0
    cb.codewords[:n][pos] = cb.ema_sum[:n][pos] / cb.ema_count[:n][pos][:, None]


def vq_train_step(
    batch: Sequence[ItemRecord] | np.ndarray, cb: VqCodebook, index: Optional[AssignmentIndex] = None, ids=None
) -> np.ndarray:
    """Assign the whole batch and fold it into the EMA statistics; returns codes.

    Rows that seed a free codeword are assigned to it and do not enter the
    EMA update of this step.
    """
    if isinstance(batch, np.ndarray):
        emb = batch
    else:
        emb = np.stack([it.embedding for it in batch]) if len(batch) else np.zeros((0, cb.d))
        if ids is None:
            ids = [it.item_id for it in batch]
    cb.step += 1
    codes = np.full(emb.shape[0], -1, dtype=np.int64)
    if not cb.initialized and emb.shape[0]:
        codes = _seed(cb, emb)
    rest = np.flatnonzero(codes < 0)
    if rest.size and cb.filled:
        codes[rest], _ = cb.assign_batch(emb[rest])
    if cb.filled:
        vq_update(cb, emb[rest], codes[rest])
    if index is not None and ids is not None:
        index.assign_many(list(ids), codes.tolist())
    return codes


def rq_train_step(
    batch: Sequence[ItemRecord], layers: Sequence[VqCodebook], index: Optional[AssignmentIndex] = None
) -> np.ndarray:
    """Train each layer on the residuals left by the layers above; returns ``(n, L)`` codes.

    The assignment index records the first-layer code.
    """
    emb = np.stack([it.embedding for it in batch]) if len(batch) else np.zeros((0, layers[0].d))
    residual = emb.copy()
    codes = np.empty((emb.shape[0], len(layers)), dtype=np.int64)
    for l, cb in enumerate(layers):
        codes[:, l] = vq_train_step(residual, cb)
        residual = residual - cb.codewords[codes[:, l]]
    if index is not None:
        index.assign_many([it.item_id for it in batch], codes[:, 0].tolist())
    return codes


def train_stream(
    records: Iterable[ItemRecord],
    layers: Sequence[VqCodebook],
    batch_size: int,
    index: Optional[AssignmentIndex] = None,
    on_step: Optional[Callable[[int, list[ItemRecord]], None]] = None,
) -> int:
    """Train a VQ (one layer) or RQ codebook through the same tag batcher MERGE uses.

    Returns the number of steps run, including the final flush batches.
    """
    batcher = TagBatcher(batch_size)
    step = 0

    def run(batch):
        nonlocal step
        step += 1
        if len(layers) == 1:
            vq_train_step(batch, layers[0], index)
        else:
            rq_train_step(batch, layers, index)
        if on_step is not None:
            on_step(step, batch)

    for item in records:
        batch = batcher.push(item)
        if batch is not None:
            run(batch)
    for batch in batcher.flush():
        run(batch)
    return step
