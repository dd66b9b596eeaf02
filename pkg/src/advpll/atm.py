"""Prototype-momentum disambiguation.

Class prototypes live on the unit sphere and move toward query embeddings
predicted as their class, pushed away from the other prototypes in
proportion to their normalized margins. Pseudo labels track, by EMA, the
nearest prototype within each instance's candidate set.

All argmax operations break ties toward the smallest label index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-9
DEGENERATE_G = 1e-12


def compute_margins(v: np.ndarray) -> np.ndarray:
    """Normalized margins ``exp(-v_i.v_j) / sum_{j != i} exp(-v_i.v_j)``, zero diagonal."""
    m = np.exp(-(v @ v.T))
    np.fill_diagonal(m, 0.0)
    return m / m.sum(axis=1, keepdims=True)


class PrototypeBank:
    def __init__(self, vectors: np.ndarray):
        v = np.array(vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 2:
            raise ValueError("need at least two prototype vectors")
        norms = np.linalg.norm(v, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ValueError("prototypes must be unit vectors")
        self.vectors = v
        self.margins = compute_margins(v)
        self.skipped = 0

    @classmethod
    def random(cls, k: int, dim: int, seed: int = 0) -> "PrototypeBank":
        rng = np.random.default_rng(seed)
        v = rng.standard_normal((k, dim))
        return cls(v / np.linalg.norm(v, axis=1, keepdims=True))

    @property
    def k(self) -> int:
        return self.vectors.shape[0]

    def copy(self) -> "PrototypeBank":
        other = PrototypeBank.__new__(PrototypeBank)
        other.vectors = self.vectors.copy()
        other.margins = self.margins.copy()
        other.skipped = self.skipped
        return other


def prototype_update(bank: PrototypeBank, u: np.ndarray, i: int, alpha: float, beta: float) -> PrototypeBank:
    """Move prototype ``i`` toward query embedding ``u``, in place.

    ``g = u - beta * sum_{j != i} mbar_ij v_j`` and
    ``v_i <- sqrt(1 - alpha^2) v_i + alpha g / |g|``, re-normalized
    afterwards (the combination is unit-length only when ``v_i`` is
    orthogonal to ``g``). A near-zero ``g`` skips the update.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    v = bank.vectors
    g = u - beta * (bank.margins[i] @ v)
    gn = math.sqrt(float(g @ g))
    if gn < DEGENERATE_G:
        bank.skipped += 1
        return bank
    new = math.sqrt(1.0 - alpha * alpha) * v[i] + (alpha / gn) * g
    v[i] = new / math.sqrt(float(new @ new))
    # only row i and column i of the margins change
    bank.margins = compute_margins(v)
    return bank


def restricted_argmax(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Row-wise argmax over candidate labels only."""
    scores = np.atleast_2d(scores)
    candidates = np.atleast_2d(candidates)
    if not candidates.any(axis=1).all():
        raise ValueError("every candidate set must be nonempty")
    masked = np.where(candidates, scores, -np.inf)
    return np.argmax(masked, axis=1)


def predict_label(f: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Most probable candidate label under the classifier output ``f``."""
    return restricted_argmax(f, candidates)


@dataclass
class PseudoLabelStore:
    """Per-instance soft targets, initialized uniform over all labels."""

    targets: np.ndarray
    phi: float = 0.99

    @classmethod
    def uniform(cls, n: int, c: int, phi: float = 0.99) -> "PseudoLabelStore":
        if not 0.0 <= phi <= 1.0:
            raise ValueError("phi must lie in [0, 1]")
        return cls(np.full((n, c), 1.0 / c), phi)


def pseudo_label_update(store: PseudoLabelStore, index, u, bank: PrototypeBank, candidates) -> PseudoLabelStore:
    """EMA toward the one-hot nearest candidate prototype, in place.

    ``index`` may be one instance or an array; ``u`` and ``candidates``
    carry matching rows.
    """
    index = np.atleast_1d(index)
    u = np.atleast_2d(u)
    winners = restricted_argmax(u @ bank.vectors.T, candidates)
    onehot = np.zeros((len(index), store.targets.shape[1]))
    onehot[np.arange(len(index)), winners] = 1.0
    store.targets[index] = store.phi * store.targets[index] + (1.0 - store.phi) * onehot
    return store


class EmbeddingQueue:
    """FIFO of key embeddings with the labels predicted when they were pushed."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.z = np.zeros((0, dim))
        self.labels = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def push(self, z: np.ndarray, labels: np.ndarray) -> "EmbeddingQueue":
        z = np.atleast_2d(np.asarray(z, dtype=np.float64)).reshape(-1, self.z.shape[1])
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if len(z) != len(labels):
            raise ValueError("one label per key embedding")
        if len(z) == 0:
            return self
        if np.any(np.abs(np.linalg.norm(z, axis=1) - 1.0) > UNIT_TOL):
            raise ValueError("queue keys must be unit vectors")
        keep = self.capacity
        self.z = np.concatenate([self.z, z])[-keep:] if keep else self.z[:0]
        self.labels = np.concatenate([self.labels, labels])[-keep:] if keep else self.labels[:0]
        return self


def queue_push(queue: EmbeddingQueue, z, labels) -> EmbeddingQueue:
    return queue.push(z, labels)


@dataclass
class ContrastivePool:
    """``D_q ∪ D_k ∪ queue`` with one predicted label per entry.

    The first ``n_queries`` rows are the query embeddings themselves.
    """

    embeddings: np.ndarray
    labels: np.ndarray
    n_queries: int
    positives: np.ndarray = field(init=False, repr=False)
    denominators: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        b = self.n_queries
        not_self = np.ones((b, len(self.labels)), dtype=bool)
        not_self[np.arange(b), np.arange(b)] = False
        self.denominators = not_self
        self.positives = not_self & (self.labels[None, :] == self.labels[:b, None])


def build_pool(queries: np.ndarray, keys: np.ndarray, predictions: np.ndarray,
               queue: EmbeddingQueue | None = None) -> ContrastivePool:
    parts = [queries, keys]
    labels = [predictions, predictions]
    if queue is not None and len(queue):
        parts.append(queue.z)
        labels.append(queue.labels)
    return ContrastivePool(np.concatenate(parts), np.concatenate(labels).astype(np.int64), len(queries))


def build_positive_set(query_index: int, pool: ContrastivePool) -> np.ndarray:
    """Pool row indices sharing the query's predicted label, the query itself excluded."""
    return np.nonzero(pool.positives[query_index])[0]


def prototype_accuracy(embeddings: np.ndarray, bank: PrototypeBank, candidates: np.ndarray,
                       true_labels: np.ndarray) -> float:
    """Fraction of instances whose nearest candidate prototype is the true label."""
    pred = restricted_argmax(embeddings @ bank.vectors.T, candidates)
    return float(np.mean(pred == true_labels))
