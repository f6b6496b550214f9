"""Synthetic shifted domain pairs and CSV feature files."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from sklearn.datasets import make_moons


class CsvFormatError(ValueError):
    """A feature file does not follow the documented CSV layout."""


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    domain: str = "source"

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError(f"features must be a non-empty 2-D array, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "features", X)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (X.shape[0],):
                raise ValueError(f"expected {X.shape[0]} labels, got shape {y.shape}")
            if y.size and y.min() < 0:
                raise ValueError("labels must be non-negative class indices")
            object.__setattr__(self, "labels", y)
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {self.domain!r}")

    def __len__(self):
        return self.features.shape[0]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def unlabeled(self) -> "LabeledDataset":
        """Copy with the labels removed, as handed to training for the target domain."""
        return replace(self, labels=None, domain="target")


@dataclass(frozen=True)
class ShiftSpec:
    """How a target domain is derived from the source distribution.

    The target distribution is the image of the source one under
    ``x -> scale * R x + translation``, where ``R`` rotates the first two
    coordinates by ``rotation`` radians.
    """

    rotation: float = 0.0
    translation: tuple[float, ...] = (0.0, 0.0)
    scale: float = 1.0
    class_count: int = 3
    samples_per_class: int = 500
    noise_std: float = 0.3
    seed: int = 0
    radius: float = 1.0
    anisotropy: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be non-negative, got {self.noise_std}")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be at least 1")
        if self.dim < 2:
            raise ValueError("need at least 2 dimensions (translation length)")

    @property
    def dim(self) -> int:
        return len(self.translation)

    def transform_matrix(self) -> np.ndarray:
        A = np.eye(self.dim)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        A[:2, :2] = [[c, -s], [s, c]]
        return self.scale * A

    def apply(self, X: np.ndarray) -> np.ndarray:
        return X @ self.transform_matrix().T + np.asarray(self.translation)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def mixture_components(spec: ShiftSpec):
    """Per-class means and covariances of the source mixture.

    Means sit evenly on a circle in the first two coordinates. Each component
    is elongated along the tangent of that circle, so the mixture is not
    rotation invariant beyond its ``class_count``-fold symmetry.
    """
    c, d = spec.class_count, spec.dim
    means, covs = [], []
    for k in range(c):
        theta = 2 * math.pi * k / c
        mu = np.zeros(d)
        mu[:2] = spec.radius * np.array([math.cos(theta), math.sin(theta)])
        axes = np.eye(d)
        axes[:2, :2] = [[-math.sin(theta), math.cos(theta)], [math.cos(theta), math.sin(theta)]]
        stds = np.full(d, spec.noise_std)
        stds[1] = spec.noise_std * spec.anisotropy
        cov = (axes.T * stds**2) @ axes
        means.append(mu)
        covs.append(cov)
    return np.array(means), np.array(covs)


def _sample_mixture(means, covs, n_per_class, rng):
    X, y = [], []
    for k, (mu, cov) in enumerate(zip(means, covs)):
        X.append(rng.multivariate_normal(mu, cov, size=n_per_class, method="eigh"))
        y.append(np.full(n_per_class, k))
    return np.vstack(X), np.concatenate(y)


def gen_gaussian_mixture_pair(spec: ShiftSpec):
    """Source and shifted target datasets, one Gaussian component per class."""
    if spec.class_count < 2:
        raise ValueError("class_count must be at least 2")
    means, covs = mixture_components(spec)
    Xs, ys = _sample_mixture(means, covs, spec.samples_per_class, _rng(spec.seed, 0))
    A = spec.transform_matrix()
    t_means = means @ A.T + np.asarray(spec.translation)
    t_covs = np.array([A @ cov @ A.T for cov in covs])
    Xt, yt = _sample_mixture(t_means, t_covs, spec.samples_per_class, _rng(spec.seed, 1))
    return LabeledDataset(Xs, ys, "source"), LabeledDataset(Xt, yt, "target")


def gen_two_moons_pair(spec: ShiftSpec, n_samples: int | None = None):
    """Interleaving half-circles; the target is shifted about the moons' center."""
    if spec.class_count != 2:
        raise ValueError(f"two moons has exactly 2 classes, got class_count={spec.class_count}")
    n = 2 * spec.samples_per_class if n_samples is None else int(n_samples)
    pair = []
    for stream in (0, 1):
        seed = int(_rng(spec.seed, stream).integers(2**31))
        X2, y = make_moons(n_samples=n, noise=spec.noise_std, random_state=seed)
        X = np.zeros((n, spec.dim))
        X[:, :2] = X2 - [0.5, 0.25]
        if stream:
            X = spec.apply(X)
        pair.append((X, y))
    (Xs, ys), (Xt, yt) = pair
    return LabeledDataset(Xs, ys, "source"), LabeledDataset(Xt, yt, "target")


# ---------------------------------------------------------------------------
# CSV


def write_features_csv(dataset: LabeledDataset, path, names=None) -> None:
    """Write a dataset; floats use ``repr`` so reading back is exact."""
    X = dataset.features
    names = list(names) if names is not None else [f"f{j}" for j in range(X.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + (["label"] if dataset.has_labels else []))
        for i, row in enumerate(X):
            cells = [repr(float(v)) for v in row]
            if dataset.has_labels:
                cells.append(str(int(dataset.labels[i])))
            w.writerow(cells)


def load_features_csv(path, domain: str | None = None) -> LabeledDataset:
    """Read a feature table; a trailing ``label`` column is optional.

    Files without labels can only serve as a target domain.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvFormatError(f"{path}: empty file, expected a header line")
    header = [h.strip() for h in rows[0]]
    has_label = bool(header) and header[-1] == "label"
    width = len(header) - has_label
    if width < 1:
        raise CsvFormatError(f"{path}: header has no feature columns")
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise CsvFormatError(f"{path}, line {lineno}: expected {len(header)} fields, "
                                 f"found {len(row)}")
        try:
            feats.append([float(v) for v in row[:width]])
            if has_label:
                labels.append(int(row[-1]))
        except ValueError as exc:
            raise CsvFormatError(f"{path}, line {lineno}: {exc}") from None
    if not feats:
        raise CsvFormatError(f"{path}: no data rows")
    X = np.array(feats)
    if not np.all(np.isfinite(X)):
        raise CsvFormatError(f"{path}: non-finite feature values")
    if not has_label:
        if domain == "source":
            raise CsvFormatError(f"{path}: source files need a trailing 'label' column")
        return LabeledDataset(X, None, "target")
    return LabeledDataset(X, np.array(labels), domain or "source")
