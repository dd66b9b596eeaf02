"""Transition matrices for rival-label corruption.

Conventions
-----------
* Labels are ``0..c-1``. A candidate set is a bitmask with bit ``b`` set when
  label ``b`` is a candidate.
* Set-indexed matrices have one row per candidate set, ordered by ascending
  mask value, skipping the empty set (0) and the full set (2**c - 1). Column
  ``y`` conditions on the true label ``y``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STRUCT_TOL = 1e-9
RECOVERY_TOL = 1e-8
ENUMERATION_LIMIT = 20
RATE_CEILING = 1.0 - 1e-6


class RankDeficientError(ValueError):
    """Raised when a set-indexed matrix lacks full column rank."""


def _check_square(entries):
    if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {entries.shape}")


@dataclass(frozen=True)
class RivalMatrix:
    """Row-stochastic, zero-diagonal matrix of rival probabilities.

    ``entries[y, r]`` is the probability that an instance of class ``y`` is
    assigned the rival label ``r``.
    """

    entries: np.ndarray
    checked: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.float64)
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        _check_square(entries)
        if self.checked:
            self.validate()

    @classmethod
    def _unchecked(cls, entries) -> "RivalMatrix":
        return cls(entries, checked=False)

    @property
    def c(self) -> int:
        return self.entries.shape[0]

    def validate(self):
        e = self.entries
        if self.c < 3:
            raise ValueError("a rival matrix needs at least 3 labels")
        if not np.all(np.isfinite(e)):
            raise ValueError("rival matrix has non-finite entries")
        if np.any(np.diag(e) != 0.0):
            raise ValueError("rival matrix diagonal must be zero")
        if np.any(e < 0.0) or np.any(e > 1.0):
            raise ValueError("rival matrix entries must lie in [0, 1]")
        sums = e.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > STRUCT_TOL):
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise ValueError(f"row {bad} sums to {sums[bad]!r}, expected 1")


@dataclass(frozen=True)
class AdversaryAwareMatrix:
    """The correction matrix ``T + I`` used by the corrected loss."""

    entries: np.ndarray

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.float64)
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        _check_square(entries)

    @property
    def c(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class FlipProfile:
    """Per-label false-positive inclusion rates.

    ``base_rate`` is the nominal flip probability ``q``; each (instance,
    label) pair perturbs it by a uniform draw in ``[-perturbation,
    +perturbation]`` and clips to ``[0, 1 - 1e-6]``. ``rates``, when given,
    fixes the realized per-label rates used by the exact enumerations.
    """

    base_rate: float
    perturbation: float = 0.02
    rates: tuple | None = None

    def __post_init__(self):
        if not 0.0 <= self.base_rate <= 1.0:
            raise ValueError(f"base rate {self.base_rate} outside [0, 1]")
        if self.perturbation < 0.0:
            raise ValueError("perturbation half-width must be non-negative")
        if self.rates is not None:
            rates = tuple(float(r) for r in self.rates)
            if any(not 0.0 <= r < 1.0 for r in rates):
                raise ValueError("realized rates must lie in [0, 1)")
            object.__setattr__(self, "rates", rates)

    def realized(self, c: int) -> np.ndarray:
        """Rates used by exact enumeration (no per-instance perturbation)."""
        if self.rates is not None:
            if len(self.rates) != c:
                raise ValueError(f"profile has {len(self.rates)} rates, expected {c}")
            return np.array(self.rates)
        return np.full(c, min(self.base_rate, RATE_CEILING))

    def perturbed(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms in [0, 1) to perturbed, clipped rates."""
        p = self.base_rate + (2.0 * u - 1.0) * self.perturbation
        return np.clip(p, 0.0, RATE_CEILING)

    @property
    def max_rate(self) -> float:
        return min(self.base_rate + self.perturbation, RATE_CEILING)


class CandidateSetIndex:
    """Bijection between set indices ``0..2**c-3`` and proper nonempty masks."""

    def __init__(self, c: int):
        if c < 1:
            raise ValueError("need at least one label")
        self.c = c
        self.masks = np.arange(1, 2**c - 1, dtype=np.int64)

    def __len__(self):
        return len(self.masks)

    def mask(self, j: int) -> int:
        return int(self.masks[j])

    def index(self, mask: int) -> int:
        if not 0 < mask < 2**self.c - 1:
            raise KeyError(f"mask {mask:#x} is not a proper nonempty subset")
        return mask - 1

    def membership(self) -> np.ndarray:
        """Boolean matrix (sets x labels)."""
        bits = np.arange(self.c, dtype=np.int64)
        return ((self.masks[:, None] >> bits[None, :]) & 1).astype(bool)


def build_rival_matrix(c: int, k: int, w: float) -> RivalMatrix:
    """Rival matrix with ``k`` entries of weight ``w`` per row.

    Row ``y`` puts weight on the cyclic successors ``y+1, ..., y+k`` (mod c).
    """
    if not 1 <= k <= c - 1:
        raise ValueError(f"support size k={k} must satisfy 1 <= k <= c-1 = {c - 1}")
    if abs(k * w - 1.0) > STRUCT_TOL:
        raise ValueError(f"rows would sum to k*w = {k * w!r}, not 1")
    entries = np.zeros((c, c))
    for y in range(c):
        for step in range(1, k + 1):
            entries[y, (y + step) % c] = w
    return RivalMatrix(entries)


def adversary_aware_matrix(rival: RivalMatrix) -> AdversaryAwareMatrix:
    return AdversaryAwareMatrix(rival.entries + np.eye(rival.c))


def identity_correction(c: int) -> AdversaryAwareMatrix:
    """The no-rival correction, used for the without-T baseline."""
    return AdversaryAwareMatrix(np.eye(c))


def _guard(c):
    if c > ENUMERATION_LIMIT:
        raise ValueError(f"c={c} exceeds the enumeration limit {ENUMERATION_LIMIT}")


def enumerate_q_bar(c: int, profile: FlipProfile) -> np.ndarray:
    """Candidate-set likelihoods ``P(set | Y=y)`` without rival corruption.

    Returns a ``(2**c - 2, c)`` matrix. Entry ``[j, y]`` is the product of
    inclusion rates of the non-true members of set ``j`` times the exclusion
    rates of its non-members, and zero when ``y`` is not in the set. The full
    label set is not indexed, so column ``y`` sums to ``1 - full_set_mass``.
    """
    _guard(c)
    p = profile.realized(c)
    member = CandidateSetIndex(c).membership()
    # log-free product: rate where member, (1 - rate) elsewhere
    factors = np.where(member, p[None, :], 1.0 - p[None, :])
    out = np.zeros((len(member), c))
    for y in range(c):
        f = factors.copy()
        f[:, y] = 1.0
        out[:, y] = np.where(member[:, y], f.prod(axis=1), 0.0)
    return out


def full_set_mass(c: int, profile: FlipProfile) -> np.ndarray:
    """``P(full label set | Y=y)`` for each ``y``; the mass not indexed by Q-bar."""
    p = profile.realized(c)
    return np.array([np.prod(np.delete(p, y)) for y in range(c)])


def enumerate_q_star(
    rival: RivalMatrix, profile: FlipProfile, noise: np.ndarray | None = None
) -> np.ndarray:
    """Rival-embedded set matrix ``min(1, (Q-bar + noise) @ T)``.

    ``noise`` is the instance-level perturbation added to every row of
    Q-bar; the sum is clipped to [0, 1] before the product.
    """
    c = rival.c
    _guard(c)
    a = enumerate_q_bar(c, profile)
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (c,):
            raise ValueError(f"noise must have shape ({c},), got {noise.shape}")
        a = np.clip(a + noise[None, :], 0.0, 1.0)
    return np.minimum(1.0, a @ rival.entries)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, len(v) + 1)
    rho = np.nonzero(u * ks > css - 1.0)[0][-1]
    theta = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def recover_posterior(q_star: np.ndarray, observed: np.ndarray):
    """Least-squares inversion of ``observed = Q* p`` followed by simplex projection.

    Returns ``(posterior, residual)`` where ``residual`` is the Euclidean
    norm of ``Q* x - observed`` for the unprojected solution ``x``.
    """
    q_star = np.asarray(q_star, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != (q_star.shape[0],):
        raise ValueError("observed vector does not match the set dimension")
    if np.any(observed < 0):
        raise ValueError("observed probabilities must be non-negative")
    rank = np.linalg.matrix_rank(q_star, tol=STRUCT_TOL)
    if rank < q_star.shape[1]:
        raise RankDeficientError(f"rank {rank} < {q_star.shape[1]} columns")
    x, *_ = np.linalg.lstsq(q_star, observed, rcond=None)
    residual = float(np.linalg.norm(q_star @ x - observed))
    return project_simplex(x), residual


def save_matrix(path, entries):
    entries = np.asarray(entries, dtype=np.float64)
    lines = [f"c={entries.shape[0]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def load_matrix(path) -> np.ndarray:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("c="):
        raise ValueError(f"{path}: first line must be 'c=<int>'")
    c = int(lines[0][2:])
    rows = [[float(tok) for tok in ln.split()] for ln in lines[1:]]
    if len(rows) != c or any(len(r) != c for r in rows):
        raise ValueError(f"{path}: expected {c} rows of {c} values")
    return np.array(rows)
