"""Reservoir-sampled population buffers of frozen model checkpoints."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .params import ParameterStore


@dataclass
class BufferEntry:
    """Immutable snapshot of one agent added to the population."""

    arch: object
    store: ParameterStore
    iteration: int
    fingerprint: str
    _frozen: dict | None = field(default=None, repr=False)

    def frozen_tensors(self) -> dict:
        """Constant (non-trainable) view of the parameters, cached."""
        if self._frozen is None:
            self._frozen = {n: Tensor(t.data) for n, t in self.store.tensors().items()}
        return self._frozen


class PopulationBuffer:
    """Uniform reservoir over every agent ever inserted, at fixed capacity."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.items: list[BufferEntry] = []
        self.n_seen = 0

    def __len__(self) -> int:
        return len(self.items)

    def fingerprints(self) -> list[str]:
        return [e.fingerprint for e in self.items]


def reservoir_insert(buffer: PopulationBuffer, arch, store: ParameterStore,
                     iteration: int, rng: np.random.Generator) -> None:
    """Algorithm R: keep the first `capacity` items, then replace a random
    slot with probability capacity/n for the n-th insertion."""
    snapshot = store.clone()
    entry = BufferEntry(arch=arch, store=snapshot, iteration=iteration,
                        fingerprint=snapshot.fingerprint())
    buffer.n_seen += 1
    if len(buffer.items) < buffer.capacity:
        buffer.items.append(entry)
    else:
        j = int(rng.integers(buffer.n_seen))
        if j < buffer.capacity:
            buffer.items[j] = entry
