"""Gradient-free branch: EMA-mirrored key encoders and momentum queues."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels as K
from .encoder import EncoderParams
from .errors import (
    CapacityError,
    ConfigError,
    EmptyQueueError,
    NormalizationError,
    ParameterError,
    ShapeError,
)


@dataclass
class MomentumPair:
    """Trainable query parameters plus their EMA mirror (never on a tape)."""

    query: EncoderParams
    key: EncoderParams

    @classmethod
    def create(cls, query: EncoderParams) -> "MomentumPair":
        return cls(query=query, key=query.copy())


def _pair_arrays(pair: MomentumPair):
    qs = [a for _, a in _named(pair.query)]
    ks = [a for _, a in _named(pair.key)]
    return zip(ks, qs)


def _named(params: EncoderParams):
    for i, (w, b) in enumerate(params.layers):
        yield f"h{i}.w", w
        yield f"h{i}.b", b
    yield "proj.w", params.proj[0]
    yield "proj.b", params.proj[1]


def ema_update(pair: MomentumPair, m: float) -> MomentumPair:
    """In-place theta_k <- m*theta_k + (1-m)*theta_q, coordinate-wise."""
    if not (0.0 <= m <= 1.0):
        raise ParameterError(f"momentum coefficient must lie in [0, 1], got {m}")
    for k_arr, q_arr in _pair_arrays(pair):
        if k_arr.shape != q_arr.shape:
            raise ShapeError("query/key parameter shapes disagree")
        K.ema_update(k_arr.reshape(-1), q_arr.reshape(-1), m)
    return pair


class QueueSnapshot(NamedTuple):
    keys: np.ndarray  # fill x d_e, oldest first, gradient-free copy
    index_of: dict[int, int]  # sample id -> newest row holding its key


class MomentumQueue:
    """Fixed-capacity FIFO ring of unit-norm key embeddings with sample ids."""

    def __init__(self, capacity: int, dim: int):
        if capacity <= 0 or dim <= 0:
            raise ConfigError(f"capacity and dim must be positive, got {capacity}, {dim}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.ring = np.zeros((self.capacity, self.dim))
        self.ids = np.full(self.capacity, -1, dtype=np.int64)
        self.head = 0  # next slot to write
        self.fill = 0

    def enqueue(self, keys: np.ndarray, ids) -> None:
        """Append rows as the newest entries, evicting the oldest on overflow."""
        keys = np.asarray(keys, dtype=np.float64)
        ids = np.asarray(ids, dtype=np.int64)
        if keys.ndim != 2 or keys.shape[1] != self.dim or keys.shape[0] != ids.shape[0]:
            raise ShapeError(f"enqueue expects ({ids.shape[0]}, {self.dim}) keys, got {keys.shape}")
        b = keys.shape[0]
        if b > self.capacity:
            raise CapacityError(f"cannot enqueue {b} keys into capacity {self.capacity}")
        if b == 0:
            return
        norms = K.row_l2_norms(keys)
        worst = np.abs(norms - 1.0).max()
        if worst > 1e-9:
            raise NormalizationError(f"keys must be unit norm (max |norm-1| = {worst:.3e})")
        end = self.head + b
        if end <= self.capacity:
            self.ring[self.head : end] = keys
            self.ids[self.head : end] = ids
        else:
            first = self.capacity - self.head
            self.ring[self.head :] = keys[:first]
            self.ids[self.head :] = ids[:first]
            self.ring[: end - self.capacity] = keys[first:]
            self.ids[: end - self.capacity] = ids[first:]
        self.head = end % self.capacity
        self.fill = min(self.fill + b, self.capacity)

    def snapshot(self) -> QueueSnapshot:
        """Oldest-first copy of the live keys plus the id -> row map."""
        if self.fill == 0:
            raise EmptyQueueError("queue holds no keys")
        start = (self.head - self.fill) % self.capacity
        order = (start + np.arange(self.fill)) % self.capacity
        keys = self.ring[order].copy()
        ids = self.ids[order]
        # Later rows overwrite earlier ones, so each id maps to its newest key.
        index_of = {int(sid): row for row, sid in enumerate(ids)}
        return QueueSnapshot(keys=keys, index_of=index_of)

    def state(self) -> dict:
        """Raw buffers for checkpointing."""
        return {
            "capacity": self.capacity,
            "dim": self.dim,
            "ring": self.ring,
            "ids": self.ids,
            "head": self.head,
            "fill": self.fill,
        }

    @classmethod
    def from_state(cls, state: dict) -> "MomentumQueue":
        q = cls(state["capacity"], state["dim"])
        q.ring[:] = state["ring"]
        q.ids[:] = state["ids"]
        q.head = int(state["head"])
        q.fill = int(state["fill"])
        return q
