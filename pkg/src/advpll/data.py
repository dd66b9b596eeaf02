"""Synthetic Gaussian-mixture benchmarks with exact posteriors, and clean CSV I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _random
from .labelgen import CleanDataset, DatasetFormatError


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """Isotropic Gaussian mixture.

    means: (c, d); variances: (c,) per-class isotropic variance; priors: (c,).
    """

    means: np.ndarray
    variances: np.ndarray
    priors: np.ndarray
    seed: int = 0

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        variances = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        priors = np.asarray(self.priors, dtype=np.float64).reshape(-1)
        c = means.shape[0]
        if variances.shape != (c,) or priors.shape != (c,):
            raise ValueError("need one variance and one prior per class")
        if np.any(variances <= 0):
            raise ValueError("variances must be positive")
        if np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-9:
            raise ValueError("priors must lie on the simplex")
        for name, arr in (("means", means), ("variances", variances), ("priors", priors)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def c(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def log_joint(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        sq = ((x[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        return (
            np.log(np.maximum(self.priors, 1e-300))[None, :]
            - 0.5 * self.d * np.log(self.variances)[None, :]
            - 0.5 * sq / self.variances[None, :]
        )

    def posterior(self, x: np.ndarray) -> np.ndarray:
        """Exact ``P(Y | X=x)`` by Bayes' rule; rows sum to one."""
        lj = self.log_joint(x)
        lj -= lj.max(axis=1, keepdims=True)
        p = np.exp(lj)
        return p / p.sum(axis=1, keepdims=True)

    def bayes_label(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.log_joint(x), axis=1)


def default_mixture(c: int = 3, d: int = 16, separation: float = 4.0, variance: float = 1.0,
                    seed: int = 0) -> GaussianMixtureSpec:
    """Equal-prior mixture with means at ``separation`` times orthonormal directions.

    When ``c <= d`` the directions are coordinate axes (a scaled simplex);
    otherwise they are seeded random unit vectors.
    """
    if c <= d:
        means = separation * np.eye(c, d)
    else:
        rng = np.random.default_rng(seed)
        dirs = rng.standard_normal((c, d))
        means = separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    return GaussianMixtureSpec(means, np.full(c, variance), np.full(c, 1.0 / c), seed)


def sample_mixture(spec: GaussianMixtureSpec, n: int, offset: int = 0):
    """Draw ``n`` labelled points; returns ``(CleanDataset, posterior_fn)``.

    Instance ``i`` is keyed by ``offset + i``, so disjoint offsets give
    independent samples (e.g. a train and a test split) from one seed.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    idx = np.arange(offset, offset + n)
    u = _random.uniform(spec.seed, _random.LABEL, idx)
    cdf = np.cumsum(spec.priors)
    labels = np.minimum(np.searchsorted(cdf, u, side="right"), spec.c - 1)
    z = _random.normal(spec.seed, _random.FEATURE, _random.FEATURE_AUX, idx[:, None], np.arange(spec.d)[None, :])
    x = spec.means[labels] + np.sqrt(spec.variances[labels])[:, None] * z
    return CleanDataset(x, labels, spec.c), spec.posterior


def save_csv(ds: CleanDataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "true_label"] + [f"f{j}" for j in range(ds.d)])
        for i in range(ds.n):
            w.writerow([i, int(ds.labels[i])] + [repr(float(v)) for v in ds.features[i]])


def load_csv(path, n_classes: int | None = None) -> CleanDataset:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["id", "true_label"] or len(header) < 3:
            raise DatasetFormatError(f"{path}:1: bad header {header}")
        d = len(header) - 2
        labels, feats = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2 + d:
                raise DatasetFormatError(f"{path}:{lineno}: expected {2 + d} columns, got {len(row)}")
            try:
                y = int(row[1])
                feats.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
            if y < 0 or (n_classes is not None and y >= n_classes):
                raise DatasetFormatError(f"{path}:{lineno}: label {y} outside [0, {n_classes})")
            labels.append(y)
    if not labels:
        raise DatasetFormatError(f"{path}: no data rows")
    c = n_classes if n_classes is not None else max(labels) + 1
    return CleanDataset(np.array(feats), np.array(labels), c)


def save_mixture_spec(spec: GaussianMixtureSpec, path):
    """Plain key=value text; arrays as space-separated reprs, means row-major."""
    lines = [
        f"c={spec.c}",
        f"d={spec.d}",
        f"seed={spec.seed}",
        "priors=" + " ".join(repr(float(v)) for v in spec.priors),
        "variances=" + " ".join(repr(float(v)) for v in spec.variances),
        "means=" + " ".join(repr(float(v)) for v in spec.means.ravel()),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mixture_spec(path) -> GaussianMixtureSpec:
    kv = {}
    for ln in Path(path).read_text().splitlines():
        if ln.strip():
            key, _, value = ln.partition("=")
            kv[key.strip()] = value.strip()
    c, d = int(kv["c"]), int(kv["d"])

    def vec(text):
        return np.array([float(t) for t in text.split()])

    return GaussianMixtureSpec(vec(kv["means"]).reshape(c, d), vec(kv["variances"]),
                               vec(kv["priors"]), int(kv["seed"]))
