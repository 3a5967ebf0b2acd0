"""Tag-homogeneous batch formation with a bounded recycle queue."""

from __future__ import annotations

from collections import OrderedDict, deque
from typing import Iterable, Optional

from .core import ItemRecord


class TagBatcher:
    """Per-tag FIFO queues plus a drop-oldest recycle FIFO.

    Recycled items wait in the recycle FIFO until the next push of their tag,
    at which point they move to the front of that tag's queue.
    """

    def __init__(self, batch_size: int, recycle_capacity: Optional[int] = None):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.batch_size = batch_size
        self.recycle_capacity = 10 * batch_size if recycle_capacity is None else recycle_capacity
        self.queues: dict[int, deque[ItemRecord]] = {}
        self.recycled: deque[ItemRecord] = deque()
        self.evicted = 0

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues.values()) + len(self.recycled)

    def _absorb_recycled(self, tag: int) -> None:
        if not self.recycled:
            return
        same = [it for it in self.recycled if it.tag == tag]
        if not same:
            return
        self.recycled = deque(it for it in self.recycled if it.tag != tag)
        q = self.queues.setdefault(tag, deque())
        q.extendleft(reversed(same))

    def push(self, item: ItemRecord) -> Optional[list[ItemRecord]]:
        tag = int(item.tag)
        self._absorb_recycled(tag)
        q = self.queues.setdefault(tag, deque())
        q.append(item)
        if len(q) >= self.batch_size:
            return [q.popleft() for _ in range(self.batch_size)]
        return None

    def recycle(self, items: Iterable[ItemRecord]) -> None:
        for it in items:
            self.recycled.append(it)
            if len(self.recycled) > self.recycle_capacity:
                self.recycled.popleft()
                self.evicted += 1

    def flush(self) -> list[list[ItemRecord]]:
        """Drain everything as undersized batches; recycled items come last."""
        batches = []
        for tag in sorted(self.queues):
            q = self.queues[tag]
            while q:
                n = min(len(q), self.batch_size)
                batches.append([q.popleft() for _ in range(n)])
        self.queues.clear()
        grouped: OrderedDict[int, list[ItemRecord]] = OrderedDict()
        for it in self.recycled:
            grouped.setdefault(int(it.tag), []).append(it)
        self.recycled.clear()
        for items in grouped.values():
            for start in range(0, len(items), self.batch_size):
                batches.append(items[start : start + self.batch_size])
        return batches
