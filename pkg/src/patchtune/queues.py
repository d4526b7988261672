"""Per-class FIFO queues of unit-norm keys produced by the key model.

Two groups exist: image-level queues hold ``d``-vectors, patch-level queues
hold whole ``(R, d)`` patch blocks so that a key example's complete patch set
is available for matching.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NotWarm, ShapeError

NORM_TOL = 1e-8

IMAGE = "image"
PATCH = "patch"


def random_unit(rng: np.random.Generator, shape) -> np.ndarray:
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass
class ClassQueue:
    class_id: int
    capacity: int
    kind: str = IMAGE
    entries: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 1:
            raise ContractError(f"queue capacity must be positive, got {self.capacity}")
        if self.kind not in (IMAGE, PATCH):
            raise ContractError(f"unknown queue kind {self.kind!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self) -> list[np.ndarray]:
        return [k for k, _ in self.entries]

    def steps(self) -> list[int]:
        return [s for _, s in self.entries]


def enqueue(queue: ClassQueue, key, step: int) -> None:
    """Append a detached copy of ``key``; evict the oldest entry past capacity."""
    arr = np.array(getattr(key, "data", key), dtype=np.float64)
    want = 1 if queue.kind == IMAGE else 2
    if arr.ndim != want:
        raise ContractError(f"{queue.kind} queue expects a {want}-d key, got shape {arr.shape}")
    if queue.entries:
        ref = queue.entries[0][0].shape
        if arr.shape != ref:
            raise ShapeError(f"key shape {arr.shape} differs from queued {ref}")
    norms = np.linalg.norm(arr, axis=-1)
    if np.abs(norms - 1.0).max() > NORM_TOL:
        raise ContractError(f"key not unit-normalised (norms {norms})")
    arr.setflags(write=False)
    queue.entries.append((arr, int(step)))
    while len(queue.entries) > queue.capacity:
        queue.entries.popleft()


class QueueGroup:
    """One queue per class, all of the same kind."""

    def __init__(self, num_classes: int, capacity: int, kind: str = IMAGE):
        self.kind = kind
        self.queues = [ClassQueue(c, capacity, kind) for c in range(num_classes)]

    def __getitem__(self, c: int) -> ClassQueue:
        return self.queues[c]

    def __len__(self) -> int:
        return len(self.queues)

    def seed_random(self, rng: np.random.Generator, key_shape) -> None:
        """Fill every queue to capacity with random unit vectors (step -1)."""
        for q in self.queues:
            for _ in range(q.capacity - len(q)):
                enqueue(q, random_unit(rng, key_shape), -1)


def sample_positive_negative(queues: QueueGroup, label: int, k_plus: int, k_minus: int,
                             rng: np.random.Generator) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Draw positives from ``queues[label]`` and negatives from all other classes.

    Both draws are uniform without replacement, truncated to what is available.

    Raises:
        NotWarm: if the label's queue or the union of the others is empty.
    """
    if not 0 <= label < len(queues):
        raise ContractError(f"label {label} out of range")
    pos_pool = queues[label].keys()
    neg_pool = [k for c, q in enumerate(queues.queues) if c != label for k in q.keys()]
    if not pos_pool:
        raise NotWarm(f"queue for class {label} is empty")
    if not neg_pool:
        raise NotWarm(f"no negative keys for class {label}")
    pi = rng.choice(len(pos_pool), size=min(k_plus, len(pos_pool)), replace=False)
    ni = rng.choice(len(neg_pool), size=min(k_minus, len(neg_pool)), replace=False)
    return [pos_pool[i] for i in pi], [neg_pool[i] for i in ni]
