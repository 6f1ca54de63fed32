"""Two-domain datasets: synthetic shift generators, CSV I/O, paired batching."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray  # n x d
    labels: np.ndarray | None  # n ints in [0, n_classes)
    domain: str  # "source" | "target"
    seed: int | None = None
    n_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain NaN or Inf")
        if self.domain not in ("source", "target"):
            raise DataError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.features),):
                raise DataError("labels must be a vector with one entry per row")
            if self.n_classes is None and len(self.labels):
                self.n_classes = int(self.labels.max()) + 1
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise DataError(f"labels outside [0, {self.n_classes})")
        elif self.domain == "source":
            raise DataError("source datasets must carry labels")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass
class PairedBatch:
    """One training step: labeled source half and unlabeled target half."""

    x_s: np.ndarray
    y_s: np.ndarray  # one-hot
    x_t: np.ndarray
    epoch: int
    step: int


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def rotate(points: np.ndarray, degrees: float) -> np.ndarray:
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    return points @ np.array([[c, s], [-s, c]])


def _moons(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n_upper = (n + 1) // 2
    labels = np.r_[np.zeros(n_upper, dtype=np.int64), np.ones(n - n_upper, dtype=np.int64)]
    t = rng.uniform(0.0, math.pi, size=n)
    upper = np.c_[np.cos(t), np.sin(t)]
    lower = np.c_[1.0 - np.cos(t), 0.5 - np.sin(t)]
    pts = np.where(labels[:, None] == 0, upper, lower)
    # centre the pair so rotation about the origin is a rotation of the whole shape
    pts = pts - np.array([0.5, 0.25])
    return pts, labels


def make_two_moons_shift(
    n_per_domain: int = 500,
    noise_sigma: float = 0.1,
    rotation_deg: float = 30.0,
    translation=(0.0, 0.0),
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    """Interleaving half circles; the target is rotated about the origin then translated.

    Noise is added after the geometric shift. Each domain is sampled
    independently from its own child stream of ``seed``.
    """
    if n_per_domain < 4:
        raise DataError(f"n_per_domain must be >= 4, got {n_per_domain}")
    if noise_sigma < 0:
        raise DataError(f"noise_sigma must be >= 0, got {noise_sigma}")
    rng_s, rng_t = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    translation = np.asarray(translation, dtype=np.float64).reshape(2)

    xs, ys = _moons(n_per_domain, rng_s)
    xs = xs + rng_s.normal(0.0, noise_sigma, size=xs.shape)
    perm = rng_s.permutation(n_per_domain)
    source = Dataset(xs[perm], ys[perm], "source", seed, 2)

    xt, yt = _moons(n_per_domain, rng_t)
    xt = rotate(xt, rotation_deg) + translation
    xt = xt + rng_t.normal(0.0, noise_sigma, size=xt.shape)
    perm = rng_t.permutation(n_per_domain)
    target = Dataset(xt[perm], yt[perm], "target", seed, 2)
    return source, target


def make_blob_shift(
    n_per_domain: int = 500,
    n_classes: int = 3,
    class_sep: float = 3.0,
    mean_shift_vector=0.0,
    nuisance_dims: int = 4,
    seed: int = 0,
    informative_dims: int = 2,
) -> tuple[Dataset, Dataset]:
    """Gaussian class blobs plus class-uninformative nuisance coordinates.

    Informative coordinates share class centres across domains. Nuisance
    coordinates are N(0, 1) in the source and N(mean_shift, 1) in the target.
    """
    if n_classes < 2:
        raise DataError(f"n_classes must be >= 2, got {n_classes}")
    if n_per_domain < n_classes:
        raise DataError(f"n_per_domain ({n_per_domain}) must be >= n_classes ({n_classes})")
    if nuisance_dims < 0 or informative_dims < 1:
        raise DataError("need informative_dims >= 1 and nuisance_dims >= 0")
    shift = np.broadcast_to(np.asarray(mean_shift_vector, dtype=np.float64), (nuisance_dims,))
    rng_c, rng_s, rng_t = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    directions = rng_c.normal(size=(n_classes, informative_dims))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centres = class_sep * directions

    def draw(rng, nuisance_mean):
        counts = np.full(n_classes, n_per_domain // n_classes)
        counts[: n_per_domain % n_classes] += 1
        labels = np.repeat(np.arange(n_classes), counts)
        informative = centres[labels] + rng.normal(size=(n_per_domain, informative_dims))
        nuisance = nuisance_mean + rng.normal(size=(n_per_domain, nuisance_dims))
        perm = rng.permutation(n_per_domain)
        return np.hstack([informative, nuisance])[perm], labels[perm]

    xs, ys = draw(rng_s, np.zeros(nuisance_dims))
    xt, yt = draw(rng_t, shift)
    return (
        Dataset(xs, ys, "source", seed, n_classes),
        Dataset(xt, yt, "target", seed, n_classes),
    )


def standardize(source: Dataset, target: Dataset) -> tuple[Dataset, Dataset]:
    """Scale both domains with the source mean and standard deviation."""
    mu = source.features.mean(axis=0)
    sd = source.features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (
        replace(source, features=(source.features - mu) / sd),
        replace(target, features=(target.features - mu) / sd),
    )


def load_csv(path: str | os.PathLike, domain: str = "source", n_classes: int | None = None) -> Dataset:
    """Read ``f0,...,fk[,label]`` rows. Source files must have a label column."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        has_label = bool(header) and header[-1] == "label"
        n_feat = len(header) - has_label
        if n_feat < 1:
            raise DataError(f"{path}: header has no feature columns")
        if domain == "source" and not has_label:
            raise DataError(f"{path}: source file has no 'label' column")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row[:n_feat]]
                if has_label:
                    labels.append(int(row[-1]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    features = np.array(rows, dtype=np.float64).reshape(len(rows), n_feat)
    return Dataset(features, np.array(labels) if has_label else None, domain, None, n_classes)


def save_csv(dataset: Dataset, path: str | os.PathLike, include_labels: bool = True) -> None:
    d = dataset.n_features
    write_labels = include_labels and dataset.labels is not None
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{i}" for i in range(d)] + (["label"] if write_labels else []))
        for i, row in enumerate(dataset.features):
            cells = [repr(float(v)) for v in row]
            if write_labels:
                cells.append(str(int(dataset.labels[i])))
            writer.writerow(cells)


def _cycled_order(n: int, total: int, rng: np.random.Generator) -> np.ndarray:
    """Concatenate fresh permutations of range(n) until ``total`` indices exist."""
    chunks = []
    while sum(len(c) for c in chunks) < total:
        chunks.append(rng.permutation(n))
    return np.concatenate(chunks)[:total]


def steps_per_epoch(n_source: int, n_target: int, batch_per_domain: int) -> int:
    return math.ceil(max(n_source, n_target) / batch_per_domain)


def paired_batches(
    source: Dataset,
    target: Dataset,
    batch_per_domain: int,
    seed: int,
    epoch: int,
) -> Iterator[PairedBatch]:
    """Balanced source/target batches for one epoch.

    Both domains are shuffled independently; the shorter one (and the
    longer one's last partial batch) is filled from further permutations,
    so every sample appears at least once per epoch.
    """
    n_s, n_t = len(source), len(target)
    if n_s == 0 or n_t == 0:
        raise DataError("both domains must be nonempty")
    if batch_per_domain > min(n_s, n_t):
        raise DataError(f"batch_per_domain {batch_per_domain} exceeds dataset size {min(n_s, n_t)}")
    if source.labels is None:
        raise DataError("source dataset has no labels")
    n_classes = source.n_classes
    steps = steps_per_epoch(n_s, n_t, batch_per_domain)
    total = steps * batch_per_domain
    rng_s, rng_t = (
        np.random.default_rng(s) for s in np.random.SeedSequence([seed, epoch]).spawn(2)
    )
    idx_s = _cycled_order(n_s, total, rng_s)
    idx_t = _cycled_order(n_t, total, rng_t)
    for k in range(steps):
        sl = slice(k * batch_per_domain, (k + 1) * batch_per_domain)
        s, t = idx_s[sl], idx_t[sl]
        yield PairedBatch(
            x_s=source.features[s],
            y_s=one_hot(source.labels[s], n_classes),
            x_t=target.features[t],
            epoch=epoch,
            step=k,
        )
