import logging
import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import pandas as pd

from fedrg.errors import DataError, ManifestError, ValidationError

logger = logging.getLogger(__name__)

MAX_ANCHOR_RETRIES = 1000


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 4
    n_per_class: int = 150
    test_per_class: int = 100
    input_dim: int = 16
    class_separation: float = 6.0
    class_sigma: float = 1.0
    num_clients: int = 10
    dirichlet_alpha: float = 0.1
    csv_path: Optional[str] = None
    label_column: str = "label"

    def validate(self, prefix="data"):
        if self.csv_path is None and self.num_classes < 2:
            raise ManifestError(f"{prefix}.num_classes", f"must be >= 2 (got {self.num_classes})")
        if self.n_per_class < 1:
            raise ManifestError(f"{prefix}.n_per_class", f"must be >= 1 (got {self.n_per_class})")
        if self.test_per_class < 0:
            raise ManifestError(f"{prefix}.test_per_class", f"must be >= 0 (got {self.test_per_class})")
        if self.input_dim < 2:
            raise ManifestError(f"{prefix}.input_dim", f"must be >= 2 (got {self.input_dim})")
        if self.class_separation < 0:
            raise ManifestError(f"{prefix}.class_separation", f"must be >= 0 (got {self.class_separation})")
        if self.class_sigma < 0:
            raise ManifestError(f"{prefix}.class_sigma", f"must be >= 0 (got {self.class_sigma})")
        if self.num_clients < 1:
            raise ManifestError(f"{prefix}.num_clients", f"must be >= 1 (got {self.num_clients})")
        if not self.dirichlet_alpha > 0:
            raise ManifestError(f"{prefix}.dirichlet_alpha", f"must be > 0 (got {self.dirichlet_alpha})")


@dataclass(frozen=True)
class AugmentationConfig:
    jitter_sigma: float = 0.1
    mask_fraction: float = 0.2

    def validate(self, prefix="augmentation"):
        if self.jitter_sigma < 0:
            raise ManifestError(f"{prefix}.jitter_sigma", f"must be >= 0 (got {self.jitter_sigma})")
        if not 0.0 <= self.mask_fraction < 1.0:
            raise ManifestError(f"{prefix}.mask_fraction", f"must be in [0, 1) (got {self.mask_fraction})")


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    features: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    anchors: np.ndarray
    num_classes: int

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, index):
        return replace(self, features=self.features[index], labels=self.labels[index], sample_ids=self.sample_ids[index])


@dataclass(frozen=True, eq=False)
class UnlabeledView:
    """What Stage I may see: inputs only."""

    client_id: int
    features: np.ndarray
    sample_ids: np.ndarray


@dataclass(frozen=True, eq=False)
class LabeledView:
    """Inputs with observed (possibly corrupted) labels; never the ground truth."""

    client_id: int
    features: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    features: np.ndarray
    true_labels: np.ndarray
    sample_ids: np.ndarray
    observed_labels: Optional[np.ndarray] = None

    @property
    def num_samples(self):
        return int(self.true_labels.shape[0])

    @property
    def label_support(self):
        return frozenset(int(c) for c in np.unique(self.true_labels))

    def with_observed(self, observed_labels):
        observed = np.asarray(observed_labels, dtype=int)
        if observed.shape != self.true_labels.shape:
            raise ValidationError(f"client {self.client_id}: {observed.shape[0]} observed labels for {self.num_samples} samples")
        return replace(self, observed_labels=observed)

    def unlabeled_view(self):
        return UnlabeledView(self.client_id, self.features, self.sample_ids)

    def labeled_view(self):
        if self.observed_labels is None:
            raise ValidationError(f"client {self.client_id} has no observed labels yet")
        return LabeledView(self.client_id, self.features, self.observed_labels, self.sample_ids)


# Place class anchors at least `class_separation` apart
def _place_anchors(rng, num_classes, input_dim, class_separation):
    scale = max(class_separation, 1.0)
    anchors = []
    retries = 0
    while len(anchors) < num_classes:
        candidate = rng.normal(scale=scale, size=input_dim)
        if all(np.linalg.norm(candidate - other) >= class_separation for other in anchors):
            anchors.append(candidate)
            continue
        retries += 1
        if retries >= MAX_ANCHOR_RETRIES:
            raise DataError(f"could not place {num_classes} anchors {class_separation} apart in {input_dim} dimensions after {MAX_ANCHOR_RETRIES} retries")
    return np.stack(anchors)


def generate_synthetic(C, n_per_class, input_dim, class_separation, rng_seed, sigma=1.0):
    """
    Gaussian class blobs around well-separated anchors.

    Parameters:
    - C: number of classes
    - n_per_class: samples drawn per class
    - input_dim: feature dimension
    - class_separation: minimum pairwise anchor distance
    - rng_seed: generation seed; equal seeds give identical bytes
    - sigma: isotropic standard deviation around each anchor
    """
    if C < 2:
        raise ValidationError(f"need at least 2 classes (got {C})")
    if n_per_class < 1:
        raise ValidationError(f"n_per_class must be >= 1 (got {n_per_class})")
    if input_dim < 2:
        raise ValidationError(f"input_dim must be >= 2 (got {input_dim})")
    rng = np.random.default_rng(rng_seed)
    anchors = _place_anchors(rng, C, input_dim, class_separation)
    labels = np.repeat(np.arange(C), n_per_class)
    features = anchors[labels] + sigma * rng.standard_normal((labels.size, input_dim))
    return SyntheticDataset(features, labels, np.arange(labels.size), anchors, C)


def load_csv_dataset(csv_path, label_column="label"):
    """
    Load a small external dataset (numeric feature columns + a label column).

    The CSV is converted once to a Parquet file next to it; later loads read
    the Parquet copy.
    """
    parquet_path = os.path.splitext(csv_path)[0] + ".parquet"
    if not os.path.exists(parquet_path):
        if not os.path.exists(csv_path):
            raise DataError(f"dataset file not found: {csv_path}")
        logger.info(f"Converting {csv_path} to Parquet (one-time operation)")
        pd.read_csv(csv_path).to_parquet(parquet_path)

    frame = pd.read_parquet(parquet_path)
    if label_column not in frame.columns:
        raise DataError(f"label column {label_column!r} missing from {csv_path}")
    frame = frame.dropna()
    sample_ids = frame.pop("sample_id").to_numpy(dtype=int) if "sample_id" in frame.columns else np.arange(len(frame))
    codes, _ = pd.factorize(frame.pop(label_column), sort=True)
    features = frame.select_dtypes(include="number").to_numpy(dtype=float)
    if features.shape[1] < 2:
        raise DataError(f"{csv_path} needs at least 2 numeric feature columns")
    num_classes = int(codes.max()) + 1
    anchors = np.stack([features[codes == c].mean(axis=0) for c in range(num_classes)])
    return SyntheticDataset(features, codes.astype(int), sample_ids, anchors, num_classes)


def split_holdout(dataset, per_class, rng_seed):
    """Move `per_class` random samples of every class into a held-out test set."""
    rng = np.random.default_rng(rng_seed)
    test_index = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if members.size <= per_class:
            raise DataError(f"class {c} has {members.size} samples, cannot hold out {per_class}")
        test_index.extend(rng.choice(members, size=per_class, replace=False).tolist())
    test_mask = np.zeros(len(dataset), dtype=bool)
    test_mask[test_index] = True
    return dataset.subset(~test_mask), dataset.subset(test_mask)


def dirichlet_partition(dataset, K, alpha, rng_seed):
    """
    Label-skewed split: per class, client proportions ~ Dirichlet(alpha * 1_K).

    Clients left empty receive one sample from the currently largest client.
    """
    if K < 1:
        raise ValidationError(f"number of clients must be >= 1 (got {K})")
    if not alpha > 0:
        raise ValidationError(f"alpha must be > 0 (got {alpha})")
    if K > len(dataset):
        raise DataError(f"cannot split {len(dataset)} samples over {K} clients")

    rng = np.random.default_rng(rng_seed)
    client_indices = [[] for _ in range(K)]
    for c in np.unique(dataset.labels):
        idx_c = np.flatnonzero(dataset.labels == c)
        rng.shuffle(idx_c)
        proportions = rng.dirichlet(np.full(K, alpha))
        splits = (proportions * idx_c.size).astype(int)

        # Fix rounding to keep the class total exact
        remainder = idx_c.size - splits.sum()
        if remainder > 0:
            order = np.argsort(-(proportions * idx_c.size - splits), kind="stable")
            splits[order[:remainder]] += 1

        for k, chunk in enumerate(np.split(idx_c, np.cumsum(splits)[:-1])):
            client_indices[k].extend(chunk.tolist())

    for k in range(K):
        if not client_indices[k]:
            donor = max(range(K), key=lambda j: len(client_indices[j]))
            client_indices[k].append(client_indices[donor].pop())
            logger.debug(f"Client {k} was empty; moved one sample from client {donor}")

    shards = []
    for k, indices in enumerate(client_indices):
        index = np.array(sorted(indices), dtype=int)
        shards.append(ClientShard(k, dataset.features[index], dataset.labels[index], dataset.sample_ids[index]))
    return shards


def augment_two_views(x, cfg, rng_seed):
    """Two stochastic views: Gaussian jitter plus a random coordinate mask."""
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(rng_seed)
    views = []
    for _ in range(2):
        view = x + cfg.jitter_sigma * rng.standard_normal(x.shape)
        if cfg.mask_fraction > 0:
            view = np.where(rng.random(x.shape) < cfg.mask_fraction, 0.0, view)
        views.append(view)
    return views[0], views[1]


def shards_frame(shards):
    """One row per sample: sample_id, client_id, y_true, y_obs and the feature columns."""
    frames = []
    for shard in shards:
        frame = pd.DataFrame(shard.features, columns=[f"x{j}" for j in range(shard.features.shape[1])])
        frame.insert(0, "y_obs", shard.observed_labels if shard.observed_labels is not None else -1)
        frame.insert(0, "y_true", shard.true_labels)
        frame.insert(0, "client_id", shard.client_id)
        frame.insert(0, "sample_id", shard.sample_ids)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)
