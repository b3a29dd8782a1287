"""Episodic memory with recency-weighted stochastic recall.

A store of ``n`` records assigns record ``i`` (0 = oldest) the weight
``exp(decay * (i - n))``, normalized to sum to one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

DEFAULT_DECAY = 0.1


class MemoryOrderError(ValueError):
    """Raised when a record would break the strictly increasing week order."""


@dataclass(frozen=True)
class MemoryRecord:
    week: int
    restriction: float
    cases_on_decision_day: float

    def __post_init__(self):
        if self.week < 1:
            raise ValueError(f"week must be >= 1, got {self.week}")
        if not 0.0 <= self.restriction <= 1.0:
            raise ValueError(f"restriction must lie in [0, 1], got {self.restriction}")
        if self.cases_on_decision_day < 0:
            raise ValueError("cases must be non-negative")


@dataclass
class MemoryStore:
    records: list[MemoryRecord] = field(default_factory=list)
    decay: float = DEFAULT_DECAY

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def append(self, record: MemoryRecord) -> "MemoryStore":
        if self.records and record.week <= self.records[-1].week:
            raise MemoryOrderError(
                f"week {record.week} does not follow stored week {self.records[-1].week}"
            )
        self.records.append(record)
        return self

    def weights(self) -> np.ndarray:
        return retrieval_weights(len(self.records), self.decay)

    def sample_indices(self, m: int, rng: np.random.Generator) -> list[int]:
        return sample_indices(len(self.records), m, rng, self.decay)

    def sample(self, m: int, rng: np.random.Generator) -> list[MemoryRecord]:
        return [self.records[i] for i in self.sample_indices(m, rng)]


def retrieval_weights(n: int, decay: float = DEFAULT_DECAY) -> np.ndarray:
    if n <= 0:
        return np.empty(0)
    # Shifting by the max exponent (0, the newest record) keeps this stable.
    raw = np.exp(decay * (np.arange(n) - (n - 1)))
    return raw / raw.sum()


def _draw(weights: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(weights)
    u = rng.random() * cdf[-1]
    return min(int(np.searchsorted(cdf, u, side="right")), len(weights) - 1)


def sample_indices(n: int, m: int, rng: np.random.Generator, decay: float = DEFAULT_DECAY) -> list[int]:
    """Draw ``m`` distinct record indices, returned in chronological order.

    Draws are sequential without replacement: after each pick the remaining
    weights are renormalized. When ``n <= m`` every index is returned and the
    generator is left untouched.
    """
    if m < 0:
        raise ValueError(f"sample size must be non-negative, got {m}")
    if n <= m:
        return list(range(n))
    remaining = list(range(n))
    weights = retrieval_weights(n, decay)
    chosen = []
    for _ in range(m):
        pos = _draw(weights, rng)
        chosen.append(remaining.pop(pos))
        weights = np.delete(weights, pos)
    return sorted(chosen)


def sample(store: MemoryStore, m: int, rng: np.random.Generator) -> list[MemoryRecord]:
    return store.sample(m, rng)


def append(store: MemoryStore, record: MemoryRecord) -> MemoryStore:
    return store.append(record)


def from_records(records: Iterable[MemoryRecord], decay: float = DEFAULT_DECAY) -> MemoryStore:
    store = MemoryStore(decay=decay)
    for record in records:
        store.append(record)
    return store
