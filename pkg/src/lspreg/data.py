"""Datasets, synthetic generators and the CSV fixture format.

Features always live in the unit box [0, 1]^d so attack budgets read like
pixel-scale budgets.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError

FEATURE_RANGE = (0.0, 1.0)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    feature_range: tuple[float, float] = FEATURE_RANGE
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ConfigError(f"features must be 2-D, got shape {self.features.shape}")
        if len(self.labels) != len(self.features):
            raise ConfigError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ConfigError(f"labels must lie in [0, {self.n_classes})")
        lo, hi = self.feature_range
        if self.features.size and (self.features.min() < lo or self.features.max() > hi):
            raise ConfigError(f"features outside feature range {self.feature_range}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, features=self.features[idx], labels=self.labels[idx],
                       split=split or self.split)

    def fingerprint(self) -> str:
        """SHA-256 over labels, features and class count."""
        h = hashlib.sha256()
        h.update(np.int64(self.n_classes).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        return h.hexdigest()


def _scale_unit(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    span[span == 0] = 1.0
    return np.clip((x - lo) / span, 0.0, 1.0)


def gen_two_moons(n: int, noise_sigma: float = 0.1, seed: int = 0, scale: bool = True) -> Dataset:
    """Two interleaved half-circles, n/2 points each.

    Class 0 follows (cos t, sin t) and class 1 follows (1 - cos t, 0.5 - sin t)
    for t evenly spaced on [0, pi]. With ``scale`` the result is min-max scaled
    per feature into the unit box.
    """
    if n <= 0 or n % 2:
        raise ConfigError(f"two-moons needs a positive even n, got {n}")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")
    half = n // 2
    t = np.linspace(0.0, np.pi, half)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    x = np.concatenate([upper, lower])
    rng = np.random.default_rng(seed)
    if noise_sigma > 0:
        x = x + rng.normal(0.0, noise_sigma, size=x.shape)
    y = np.repeat([0, 1], half)
    if scale:
        x = _scale_unit(x)
        return Dataset(x, y, 2)
    return Dataset(x, y, 2, feature_range=(float(x.min()), float(x.max())))


def gen_gaussian_blobs(n: int, centers, sigma: float = 0.05, seed: int = 0) -> Dataset:
    """Equal-sized isotropic clusters around ``centers``, clamped to the unit box.

    ``n`` must be divisible by the number of centers.
    """
    c = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    k = len(c)
    if k < 2:
        raise ConfigError("need at least two centers")
    if n <= 0 or n % k:
        raise ConfigError(f"n={n} must be a positive multiple of {k} centers")
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    if c.min() < 0 or c.max() > 1:
        raise ConfigError("centers must lie in the unit box")
    rng = np.random.default_rng(seed)
    per = n // k
    y = np.repeat(np.arange(k), per)
    x = c[y] + rng.normal(0.0, sigma, size=(n, c.shape[1])) if sigma > 0 else c[y].copy()
    return Dataset(np.clip(x, 0.0, 1.0), y, k)


def stratified_split(labels, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split indices into (train, held-out) with ``fraction`` of each class held out.

    Every class keeps at least one training sample.
    """
    y = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, held = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        k = min(int(round(fraction * len(idx))), len(idx) - 1)
        held.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{j}" for j in range(dataset.dim)])
        for y, row in zip(dataset.labels, dataset.features):
            w.writerow([int(y)] + [repr(float(v)) for v in row])


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """Read a ``label,f0,f1,...`` file; the class count defaults to max label + 1."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"dataset not found: {p}")
    with open(p, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{p}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0] != "label" or header[1:] != [f"f{j}" for j in range(len(header) - 1)]:
        raise ParseError(f"{p}:1: header must be label,f0,f1,...")
    width = len(header)
    labels, feats = [], []
    lo, hi = FEATURE_RANGE
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise ParseError(f"{p}:{lineno}: expected {width} fields, got {len(row)}")
        try:
            label = int(row[0])
            vals = [float(v) for v in row[1:]]
        except ValueError:
            raise ParseError(f"{p}:{lineno}: malformed value") from None
        if label < 0:
            raise ParseError(f"{p}:{lineno}: negative label")
        if not all(lo <= v <= hi for v in vals):
            raise ParseError(f"{p}:{lineno}: feature outside [{lo}, {hi}]")
        labels.append(label)
        feats.append(vals)
    if not labels:
        raise ParseError(f"{p}: no data rows")
    y = np.array(labels)
    c = int(y.max()) + 1 if n_classes is None else n_classes
    if y.max() >= c:
        raise ParseError(f"{p}: label {y.max()} >= class count {c}")
    return Dataset(np.array(feats), y, c)
