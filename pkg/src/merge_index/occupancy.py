"""Occupancy classification of Active slots and the reset sweep."""

from __future__ import annotations

from enum import Enum
from typing import Optional

import numpy as np

from .core import AssignmentIndex, ClusterSlot, FineCodebook, IndexConfig, SlotState


class SlotStatus(str, Enum):
    UNDERFILLED = "underfilled"
    GROWING = "growing"
    STABLE = "stable"


def classify_count(n: float, eps1: float, eps2: float) -> SlotStatus:
    if n < eps1:
        return SlotStatus.UNDERFILLED
    if n < eps2:
        return SlotStatus.GROWING
    return SlotStatus.STABLE


def classify(slot: ClusterSlot, cfg: IndexConfig) -> SlotStatus:
    if slot.state != SlotState.ACTIVE:
        raise ValueError("cannot classify an Empty slot")
    return classify_count(slot.ema_count, cfg.eps1, cfg.eps2)


def sweep(
    fine: FineCodebook, cfg: IndexConfig, index: Optional[AssignmentIndex] = None
) -> list[int]:
    """Reset underfilled and stalled growing slots; returns reset indices in ascending order.

    A growing slot is reset once it has stayed Growing for ``cfg.M`` steps,
    counted from the step it entered Growing (re-anchored after any Stable visit).
    """
    idx = fine.active_indices
    if idx.size == 0:
        return []
    counts = fine.ema_count[idx]
    now = fine.step

    underfilled = counts < cfg.eps1
    stable = counts >= cfg.eps2
    growing = ~underfilled & ~stable

    fine.growing_since[idx[stable]] = -1
    g = idx[growing]
    fresh = g[fine.growing_since[g] < 0]
    fine.growing_since[fresh] = now
    stalled = g[now - fine.growing_since[g] >= cfg.M]

    to_reset = np.sort(np.concatenate([idx[underfilled], stalled]))
    for k in to_reset:
        fine.reset(int(k))
        if index is not None:
            index.clear_slot(int(k))
    return [int(k) for k in to_reset]
