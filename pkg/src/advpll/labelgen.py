"""Partial-label corruption of clean datasets.

Two generators share the same flip draws for a given seed, so a standard and
an adversary-aware dataset built from the same inputs differ only by the
injected rival.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _random
from .transition import FlipProfile, RivalMatrix

STANDARD = "standard"
ADVERSARY_AWARE = "adversary_aware"

# Nominal flip rates per regime. The hardest 100-class clean rate is quoted
# as both 0.01 and 0.03, so both are kept.
RATE_PRESETS = {
    "c10": (0.1, 0.3, 0.5),
    "c100": (0.03, 0.05, 0.1),
    "c100_low": (0.01, 0.05, 0.1),
}


class DatasetFormatError(ValueError):
    """A malformed row in a dataset file; the message carries the line number."""


@dataclass(frozen=True)
class CleanDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
            raise ValueError(f"features must be a nonempty n x d array, got {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ValueError("one label per instance required")
        if np.any(labels < 0) or np.any(labels >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class PllDataset:
    """A clean dataset plus one candidate set per instance.

    ``candidates`` is a boolean ``(n, c)`` matrix. ``rivals`` holds the
    injected rival label per instance, ``-1`` when none; it is kept for
    diagnostics and never consumed by training.
    """

    clean: CleanDataset
    candidates: np.ndarray
    rivals: np.ndarray
    mode: str = STANDARD

    def __post_init__(self):
        cand = np.asarray(self.candidates, dtype=bool)
        rivals = np.asarray(self.rivals, dtype=np.int64)
        n, c = self.clean.n, self.clean.n_classes
        if cand.shape != (n, c):
            raise ValueError(f"candidates must have shape ({n}, {c})")
        if rivals.shape != (n,):
            raise ValueError("one rival entry per instance required")
        if self.mode not in (STANDARD, ADVERSARY_AWARE):
            raise ValueError(f"unknown mode {self.mode!r}")
        rows = np.arange(n)
        if not cand[rows, self.clean.labels].all():
            raise ValueError("every candidate set must contain the true label")
        has_rival = rivals >= 0
        if np.any(rivals >= c):
            raise ValueError("rival label out of range")
        if not cand[rows[has_rival], rivals[has_rival]].all():
            raise ValueError("every candidate set must contain its rival")
        if self.mode == ADVERSARY_AWARE and not has_rival.all():
            raise ValueError("adversary-aware datasets need a rival per instance")
        object.__setattr__(self, "candidates", cand)
        object.__setattr__(self, "rivals", rivals)

    @property
    def n_classes(self) -> int:
        return self.clean.n_classes


@dataclass
class GenerationReport:
    inclusion: np.ndarray
    mean_cardinality: float
    ambiguity_ok: bool
    full_set_count: int = 0
    rival_frequencies: np.ndarray | None = field(default=None, repr=False)

    def lines(self):
        yield f"mean_cardinality={self.mean_cardinality!r}"
        yield f"ambiguity_ok={self.ambiguity_ok}"
        yield f"full_set_count={self.full_set_count}"
        for y, row in enumerate(self.inclusion):
            yield f"inclusion[{y}]=" + " ".join(f"{v:.6f}" for v in row)


@dataclass
class AmbiguityReport:
    ok: bool
    max_rate: float
    # marginal co-occurrence of a wrong label with the true one, rival included
    max_marginal_rate: float


def check_ambiguity(profile: FlipProfile, rival: RivalMatrix | None = None) -> AmbiguityReport:
    """Small-ambiguity check: every wrong label's inclusion probability, given
    the rival, stays strictly below one.

    Given the rival, a false positive co-occurs with it at the false
    positive's own flip rate, so the verdict depends only on the flip
    profile. The marginal rate (rival draw averaged out) is reported too.
    """
    max_rate = profile.max_rate
    ok = profile.base_rate < 1.0 and max_rate < 1.0
    if profile.rates is not None:
        max_rate = max(max_rate, max(profile.rates))
        ok = ok and max_rate < 1.0
    marginal = max_rate
    if rival is not None:
        t = rival.entries
        marginal = float(np.max(max_rate + (1.0 - max_rate) * t))
    return AmbiguityReport(ok=bool(ok), max_rate=float(max_rate), max_marginal_rate=marginal)


def _flip_matrix(n, c, profile, seed):
    inst = np.arange(n)[:, None]
    lab = np.arange(c)[None, :]
    rates = profile.perturbed(_random.uniform(seed, _random.PERTURB, inst, lab))
    return _random.uniform(seed, _random.FLIP, inst, lab) < rates


def _require_learnable(profile):
    if profile.base_rate >= 1.0:
        raise ValueError("flip rate q >= 1 violates the ambiguity condition")


def generate_standard(clean: CleanDataset, profile: FlipProfile, seed: int) -> PllDataset:
    """Each wrong label joins the candidate set independently at its perturbed rate."""
    _require_learnable(profile)
    cand = _flip_matrix(clean.n, clean.n_classes, profile, seed)
    cand[np.arange(clean.n), clean.labels] = True
    return PllDataset(clean, cand, np.full(clean.n, -1), STANDARD)


def sample_rivals(labels: np.ndarray, rival: RivalMatrix, seed: int) -> np.ndarray:
    """Inverse-CDF draw of one rival per instance from its class row."""
    t = rival.entries
    sums = t.sum(axis=1)
    bad = np.unique(labels[sums[labels] <= 0.0])
    if len(bad):
        raise ValueError(f"rival rows {bad.tolist()} have no mass to sample from")
    cdf = np.cumsum(t, axis=1) / sums[:, None]
    u = _random.uniform(seed, _random.RIVAL, np.arange(len(labels)))
    rows = cdf[labels]
    picks = (rows <= u[:, None]).sum(axis=1)
    # u < 1 always, but guard against cdf rounding below 1 on the last column
    picks = np.minimum(picks, t.shape[1] - 1)
    # never land on a zero-weight label through rounding
    zero = t[labels, picks] == 0.0
    if zero.any():
        for i in np.nonzero(zero)[0]:
            picks[i] = int(np.nonzero(t[labels[i]] > 0)[0][-1])
    return picks


def generate_adversary_aware(
    clean: CleanDataset, rival: RivalMatrix, profile: FlipProfile, seed: int
) -> PllDataset:
    """Standard flips plus one rival drawn from the class row of ``rival``."""
    _require_learnable(profile)
    if rival.c != clean.n_classes:
        raise ValueError("rival matrix size does not match the label count")
    rivals = sample_rivals(clean.labels, rival, seed)
    cand = _flip_matrix(clean.n, clean.n_classes, profile, seed)
    rows = np.arange(clean.n)
    cand[rows, clean.labels] = True
    cand[rows, rivals] = True
    return PllDataset(clean, cand, rivals, ADVERSARY_AWARE)


def audit_generation(ds: PllDataset) -> GenerationReport:
    c = ds.n_classes
    labels = ds.clean.labels
    inclusion = np.zeros((c, c))
    rival_freq = None
    if (ds.rivals >= 0).any():
        rival_freq = np.zeros((c, c))
    for y in range(c):
        sel = labels == y
        if sel.any():
            inclusion[y] = ds.candidates[sel].mean(axis=0)
            if rival_freq is not None:
                r = ds.rivals[sel]
                rival_freq[y] = np.bincount(r[r >= 0], minlength=c) / sel.sum()
        inclusion[y, y] = 1.0
    off = inclusion[~np.eye(c, dtype=bool)]
    card = ds.candidates.sum(axis=1)
    return GenerationReport(
        inclusion=inclusion,
        mean_cardinality=float(card.mean()),
        ambiguity_ok=bool(np.all(off < 1.0)),
        full_set_count=int((card == c).sum()),
        rival_frequencies=rival_freq,
    )


def mask_to_hex(row: np.ndarray) -> str:
    value = 0
    for b in np.nonzero(row)[0]:
        value |= 1 << int(b)
    return format(value, "x")


def hex_to_mask(text: str, c: int) -> np.ndarray:
    value = int(text, 16)
    if value >> c:
        raise ValueError(f"mask {text} has bits beyond {c} labels")
    return np.array([(value >> b) & 1 for b in range(c)], dtype=bool)


def save_pll_csv(ds: PllDataset, path):
    d = ds.clean.d
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "true_label", "rival_label", "candidate_mask_hex"] + [f"f{j}" for j in range(d)])
        for i in range(ds.clean.n):
            w.writerow(
                [i, int(ds.clean.labels[i]), int(ds.rivals[i]), mask_to_hex(ds.candidates[i])]
                + [repr(float(v)) for v in ds.clean.features[i]]
            )


def load_pll_csv(path, n_classes: int | None = None, mode: str | None = None) -> PllDataset:
    """Parse and validate a partial-label CSV.

    ``n_classes`` defaults to the smallest count consistent with every label
    and mask in the file. ``mode`` defaults to adversary-aware when every row
    carries a rival.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:4] != ["id", "true_label", "rival_label", "candidate_mask_hex"]:
            raise DatasetFormatError(f"{path}:1: bad header {header}")
        d = len(header) - 4
        if d < 1:
            raise DatasetFormatError(f"{path}:1: no feature columns")
        labels, rivals, masks, feats = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4 + d:
                raise DatasetFormatError(f"{path}:{lineno}: expected {4 + d} columns, got {len(row)}")
            try:
                labels.append(int(row[1]))
                rivals.append(int(row[2]))
                masks.append(int(row[3], 16))
                feats.append([float(v) for v in row[4:]])
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
    if not labels:
        raise DatasetFormatError(f"{path}: no data rows")
    inferred = max(max(labels), max(rivals)) + 1
    inferred = max(inferred, max(m.bit_length() for m in masks))
    c = n_classes if n_classes is not None else inferred
    for lineno, (y, m) in enumerate(zip(labels, masks), start=2):
        if y >= c or y < 0:
            raise DatasetFormatError(f"{path}:{lineno}: label {y} outside [0, {c})")
        if m >> c:
            raise DatasetFormatError(f"{path}:{lineno}: mask has bits beyond {c} labels")
    cand = np.array([[(m >> b) & 1 for b in range(c)] for m in masks], dtype=bool)
    rivals = np.array(rivals)
    if mode is None:
        mode = ADVERSARY_AWARE if np.all(rivals >= 0) else STANDARD
    clean = CleanDataset(np.array(feats), np.array(labels), c)
    return PllDataset(clean, cand, rivals, mode)
