"""Domain types shared across the indexer, plus the cosine kernel.

The fine codebook is stored column-wise in numpy arrays so that matching and
EMA updates stay vectorized; :class:`ClusterSlot` is the per-slot value view.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Optional

import numpy as np

EMPTY = "empty"
ACTIVE = "active"

UNASSIGNED = -1

_ARRAYS = ("codewords", "ema_sum", "ema_count", "active", "created_step", "growing_since")


class SlotState(str, Enum):
    EMPTY = EMPTY
    ACTIVE = ACTIVE


@dataclass(frozen=True)
class IndexConfig:
    """Hyperparameters of the streaming indexer and the hierarchy builder."""

    tau: float = 0.88
    gamma: float = 0.9993
    tau_prime: float = 0.83
    m: int = 4
    eps1: float = 0.25
    eps2: float = 0.2644
    M: int = 80
    lam: float = 0.01
    r: float = 0.0
    batch_size: int = 20480
    d: int = 64

    def __post_init__(self):
        # tau / tau_prime may leave [0, 1] to express degenerate configs
        # (gate always passes, extension never fires).
        if not -1.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [-1, 1], got {self.tau}")
        if not -1.0 <= self.tau_prime <= 2.0:
            raise ValueError(f"tau_prime must lie in [-1, 2], got {self.tau_prime}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.m < 1:
            raise ValueError(f"m must be a positive integer, got {self.m}")
        if not 0.0 <= self.eps1 <= self.eps2:
            raise ValueError(f"need 0 <= eps1 <= eps2, got {self.eps1}, {self.eps2}")
        if self.M < 1:
            raise ValueError(f"M must be a positive integer, got {self.M}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not -1.0 <= self.r <= 1.0:
            raise ValueError(f"r must lie in [-1, 1], got {self.r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.d < 1:
            raise ValueError(f"d must be positive, got {self.d}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "IndexConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})

    def replace(self, **changes) -> "IndexConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class ItemRecord:
    item_id: int
    embedding: np.ndarray
    tag: int = 0
    popularity: int = 0

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)

    def validate(self, d: int) -> None:
        if self.embedding.shape != (d,):
            raise ValueError(
                f"item {self.item_id}: embedding has {self.embedding.size} values, expected {d}"
            )
        if not np.all(np.isfinite(self.embedding)):
            raise ValueError(f"item {self.item_id}: embedding has non-finite components")
        if not np.any(self.embedding):
            raise ValueError(f"item {self.item_id}: embedding has zero norm")
        if self.popularity < 0:
            raise ValueError(f"item {self.item_id}: negative popularity")


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two non-zero vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    return float(a @ b) / (na * nb)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-normalize ``x``; zero rows stay zero."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs cosine between rows of ``a`` and rows of ``b``."""
    out = normalize_rows(a) @ normalize_rows(b).T
    return np.clip(out, -1.0, 1.0, out=out)


@dataclass
class ClusterSlot:
    codeword: np.ndarray
    ema_sum: np.ndarray
    ema_count: float
    state: SlotState
    created_step: int = 0
    growing_since: Optional[int] = None


class FineCodebook:
    """Dynamically sized codebook of cluster slots.

    Slot ``k`` occupies row ``k`` of the backing arrays. Rows past ``len(self)``
    are spare capacity.
    """

    def __init__(self, d: int, capacity: int = 64):
        self.d = d
        self.step = 0
        self._n = 0
        cap = max(int(capacity), 1)
        self.codewords = np.zeros((cap, d))
        self.ema_sum = np.zeros((cap, d))
        self.ema_count = np.zeros(cap)
        self.active = np.zeros(cap, dtype=bool)
        self.created_step = np.zeros(cap, dtype=np.int64)
        self.growing_since = np.full(cap, -1, dtype=np.int64)

    def __len__(self) -> int:
        return self._n

    def _grow(self, need: int) -> None:
        cap = self.codewords.shape[0]
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        for name in ("codewords", "ema_sum"):
            arr = np.zeros((new_cap, self.d))
            arr[:cap] = getattr(self, name)
            setattr(self, name, arr)
        for name, fill, dtype in (
            ("ema_count", 0.0, np.float64),
            ("active", False, bool),
            ("created_step", 0, np.int64),
            ("growing_since", -1, np.int64),
        ):
            arr = np.full(new_cap, fill, dtype=dtype)
            arr[:cap] = getattr(self, name)
            setattr(self, name, arr)

    def append_empty(self) -> int:
        self._grow(self._n + 1)
        self._n += 1
        return self._n - 1

    def activate(self, k: int, ema_sum, ema_count: float, created_step: Optional[int] = None) -> None:
        """Make slot ``k`` Active with the given EMA state."""
        ema_sum = np.asarray(ema_sum, dtype=np.float64)
        self.ema_sum[k] = ema_sum
        self.ema_count[k] = ema_count
        self.codewords[k] = ema_sum / ema_count if ema_count > 0 else 0.0
        self.active[k] = True
        self.created_step[k] = self.step if created_step is None else created_step
        self.growing_since[k] = -1

    def add_slot(self, ema_sum, ema_count: float, created_step: Optional[int] = None) -> int:
        k = self.append_empty()
        self.activate(k, ema_sum, ema_count, created_step)
        return k

    def reset(self, k: int) -> None:
        self.codewords[k] = 0.0
        self.ema_sum[k] = 0.0
        self.ema_count[k] = 0.0
        self.active[k] = False
        self.growing_since[k] = -1

    @property
    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.active[: self._n])

    @property
    def empty_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.active[: self._n])

    @property
    def n_active(self) -> int:
        return int(self.active[: self._n].sum())

    def slot(self, k: int) -> ClusterSlot:
        if not 0 <= k < self._n:
            raise IndexError(k)
        gs = int(self.growing_since[k])
        return ClusterSlot(
            codeword=self.codewords[k].copy(),
            ema_sum=self.ema_sum[k].copy(),
            ema_count=float(self.ema_count[k]),
            state=SlotState.ACTIVE if self.active[k] else SlotState.EMPTY,
            created_step=int(self.created_step[k]),
            growing_since=None if gs < 0 else gs,
        )

    @property
    def slots(self) -> list[ClusterSlot]:
        return [self.slot(k) for k in range(self._n)]

    def __iter__(self) -> Iterator[ClusterSlot]:
        return iter(self.slots)

    def snapshot(self) -> "FineCodebook":
        """Read-only copy safe to share with concurrent readers."""
        snap = self.copy()
        for name in _ARRAYS:
            getattr(snap, name).flags.writeable = False
        return snap

    def copy(self) -> "FineCodebook":
        out = FineCodebook(self.d, capacity=max(self._n, 1))
        out.step = self.step
        out._n = self._n
        for name in _ARRAYS:
            getattr(out, name)[: self._n] = getattr(self, name)[: self._n]
        return out

    def active_codewords(self) -> tuple[np.ndarray, np.ndarray]:
        idx = self.active_indices
        return idx, self.codewords[idx]

    @classmethod
    def from_slots(cls, slots: Iterable[ClusterSlot], d: int, step: int = 0) -> "FineCodebook":
        slots = list(slots)
        fine = cls(d, capacity=max(len(slots), 1))
        fine.step = step
        for s in slots:
            k = fine.append_empty()
            if s.state == SlotState.ACTIVE:
                fine.codewords[k] = s.codeword
                fine.ema_sum[k] = s.ema_sum
                fine.ema_count[k] = s.ema_count
                fine.active[k] = True
            fine.created_step[k] = s.created_step
            fine.growing_since[k] = -1 if s.growing_since is None else s.growing_since
        return fine

    def equals(self, other: "FineCodebook") -> bool:
        """Bit-exact equality of all persisted state."""
        if self.d != other.d or self.step != other.step or len(self) != len(other):
            return False
        n = self._n
        for name in _ARRAYS:
            a = getattr(self, name)[:n]
            b = getattr(other, name)[:n]
            if a.tobytes() != b.tobytes():
                return False
        return True


def audit_codebook(fine: FineCodebook, rtol: float = 1e-9) -> list[int]:
    """Slots violating the Empty invariant or ``codeword == ema_sum / ema_count``."""
    bad = []
    for k in range(len(fine)):
        count = fine.ema_count[k]
        if not np.isfinite(count) or count < 0:
            bad.append(k)
            continue
        if not fine.active[k]:
            if count != 0 or np.any(fine.codewords[k]) or np.any(fine.ema_sum[k]):
                bad.append(k)
            continue
        if count > 0:
            expected = fine.ema_sum[k] / count
            scale = max(float(np.max(np.abs(expected))), 1e-300)
            if float(np.max(np.abs(fine.codewords[k] - expected))) > rtol * scale:
                bad.append(k)
    return bad


@dataclass
class CoarsePrototype:
    embedding: np.ndarray
    ema_count: float
    members: list[int] = field(default_factory=list)


@dataclass
class CoarseCodebook:
    """Coarse prototypes over a fine codebook, with the fine-to-coarse parent map."""

    prototypes: list[CoarsePrototype]
    parent: np.ndarray  # fine slot -> coarse index, -1 for Empty slots

    def __len__(self) -> int:
        return len(self.prototypes)

    def coarse_of(self, fine_code: int) -> int:
        if 0 <= fine_code < len(self.parent):
            return int(self.parent[fine_code])
        return UNASSIGNED

    def equals(self, other: "CoarseCodebook") -> bool:
        if len(self) != len(other) or self.parent.tobytes() != other.parent.tobytes():
            return False
        for a, b in zip(self.prototypes, other.prototypes):
            if (
                a.embedding.tobytes() != b.embedding.tobytes()
                or np.float64(a.ema_count).tobytes() != np.float64(b.ema_count).tobytes()
                or list(a.members) != list(b.members)
            ):
                return False
        return True


class AssignmentIndex:
    """Bidirectional item <-> code map.

    ``forward`` holds the fine code; the coarse code is resolved through the
    hierarchy when one is attached.
    """

    def __init__(self):
        self.forward: dict[int, int] = {}
        self.reverse: dict[int, dict[int, None]] = {}
        self.coarse: Optional[CoarseCodebook] = None

    def __len__(self) -> int:
        return len(self.forward)

    def __contains__(self, item_id: int) -> bool:
        return item_id in self.forward

    def assign(self, item_id: int, fine_code: int) -> None:
        item_id = int(item_id)
        fine_code = int(fine_code)
        old = self.forward.get(item_id)
        if old is not None and old != fine_code:
            bucket = self.reverse.get(old)
            if bucket is not None:
                bucket.pop(item_id, None)
                if not bucket:
                    del self.reverse[old]
        self.forward[item_id] = fine_code
        self.reverse.setdefault(fine_code, {})[item_id] = None

    def assign_many(self, item_ids, fine_codes) -> None:
        for i, k in zip(item_ids, fine_codes):
            self.assign(i, k)

    def clear_slot(self, fine_code: int) -> list[int]:
        """Drop every item assigned to ``fine_code``; returns the dropped ids."""
        items = list(self.reverse.pop(int(fine_code), {}))
        for i in items:
            del self.forward[i]
        return items

    def lookup(self, item_id: int) -> tuple[int, int]:
        """``(coarse_code, fine_code)``; raises KeyError for unknown items."""
        fine_code = self.forward[int(item_id)]
        coarse = self.coarse.coarse_of(fine_code) if self.coarse is not None else UNASSIGNED
        return coarse, fine_code

    def items_of(self, fine_code: int) -> list[int]:
        return list(self.reverse.get(int(fine_code), {}))

    def check_consistency(self) -> bool:
        n = 0
        for k, items in self.reverse.items():
            for i in items:
                if self.forward.get(i) != k:
                    return False
                n += 1
        return n == len(self.forward)
