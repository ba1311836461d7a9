"""
Label-noise transition kernels and noise injection.

A kernel is a C x C matrix whose entry [i, j] is p(observed=j | true=i).
Globalized kernels cover every class and are shared by all clients;
localized kernels only move mass inside a client's own label support.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from fedrg.errors import ManifestError, NoiseModelError

logger = logging.getLogger(__name__)

FLAVORS = ("symmetric", "pairflip")
PATTERNS = ("globalized", "localized")


@dataclass(frozen=True)
class NoiseSpec:
    flavor: str = "symmetric"
    pattern: str = "globalized"
    rate: float = 0.4

    def validate(self, prefix="noise"):
        if self.flavor not in FLAVORS:
            raise ManifestError(f"{prefix}.flavor", f"must be one of {list(FLAVORS)} (got {self.flavor!r})")
        if self.pattern not in PATTERNS:
            raise ManifestError(f"{prefix}.pattern", f"must be one of {list(PATTERNS)} (got {self.pattern!r})")
        if not 0.0 <= self.rate < 1.0:
            raise ManifestError(f"{prefix}.rate", f"must be in [0, 1) (got {self.rate})")
        if self.flavor == "pairflip" and self.rate >= 0.5:
            raise ManifestError(f"{prefix}.rate", f"pairflip rate must be < 0.5 so the true class stays the row mode (got {self.rate})")


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """Rows outside `support` are all-zero and may not be sampled from."""

    matrix: np.ndarray
    support: tuple
    flavor: str

    @property
    def num_classes(self):
        return self.matrix.shape[0]

    def to_dict(self):
        return {"flavor": self.flavor, "support": list(self.support), "matrix": self.matrix.tolist()}


@dataclass(frozen=True, eq=False)
class CorruptionRecord:
    true_labels: np.ndarray
    observed_labels: np.ndarray
    is_noisy_true: np.ndarray

    @property
    def noise_rate(self):
        return float(self.is_noisy_true.mean()) if self.is_noisy_true.size else 0.0

    def to_frame(self, sample_ids):
        return pd.DataFrame({
            "sample_id": np.asarray(sample_ids, dtype=int),
            "y_true": self.true_labels,
            "y_obs": self.observed_labels,
            "is_noisy": self.is_noisy_true.astype(int),
        })


def _prepare(classes, rate, num_classes, max_rate):
    support = tuple(sorted({int(c) for c in classes}))
    if not support:
        raise NoiseModelError("class set is empty")
    if support[0] < 0:
        raise NoiseModelError(f"class indices must be >= 0 (got {support[0]})")
    size = support[-1] + 1 if num_classes is None else int(num_classes)
    if support[-1] >= size:
        raise NoiseModelError(f"class {support[-1]} outside [0, {size})")
    if not 0.0 <= rate < max_rate:
        raise NoiseModelError(f"rate must be in [0, {max_rate}) (got {rate})")
    if len(support) < 2 and rate > 0:
        raise NoiseModelError(f"class set {list(support)} has no admissible flip target")
    return support, np.zeros((size, size))


def build_symmetric_kernel(classes, rate, num_classes=None):
    """Keep 1 - rate on the diagonal and spread rate evenly over the other admissible classes."""
    support, matrix = _prepare(classes, rate, num_classes, 1.0)
    idx = np.array(support)
    if len(support) > 1:
        matrix[np.ix_(idx, idx)] = rate / (len(support) - 1)
    matrix[idx, idx] = 1.0 - rate
    return TransitionKernel(matrix, support, "symmetric")


def build_pairflip_kernel(classes, rate, num_classes=None):
    """Move mass `rate` to the cyclic successor within the sorted class set."""
    support, matrix = _prepare(classes, rate, num_classes, 0.5)
    idx = np.array(support)
    matrix[idx, idx] = 1.0 - rate
    if len(support) > 1:
        matrix[idx, np.roll(idx, -1)] += rate
    return TransitionKernel(matrix, support, "pairflip")


def build_kernel(spec, classes, num_classes):
    builder = build_symmetric_kernel if spec.flavor == "symmetric" else build_pairflip_kernel
    return builder(classes, spec.rate, num_classes)


def identity_kernel(classes, num_classes):
    support = tuple(sorted({int(c) for c in classes}))
    matrix = np.zeros((num_classes, num_classes))
    idx = np.array(support, dtype=int)
    matrix[idx, idx] = 1.0
    return TransitionKernel(matrix, support, "identity")


def inject_noise(labels, kernel, rng_seed):
    """Draw each observed label independently from its kernel row."""
    labels = np.asarray(labels, dtype=int).reshape(-1)
    outside = ~np.isin(labels, kernel.support)
    if np.any(outside):
        raise NoiseModelError(f"labels {sorted(set(labels[outside].tolist()))} lie outside kernel support {list(kernel.support)}")
    rng = np.random.default_rng(rng_seed)
    u = rng.random(labels.size)
    cumulative = np.cumsum(kernel.matrix[labels], axis=1)
    cumulative /= cumulative[:, -1:]
    observed = (cumulative <= u[:, None]).sum(axis=1)
    return CorruptionRecord(labels.copy(), observed, observed != labels)


def corrupt_shards(shards, spec, num_classes, seed_for):
    """
    Build kernels and inject noise for every shard.

    Parameters:
    - shards: objects with client_id, true_labels and label_support
    - spec: NoiseSpec
    - num_classes: total class count C
    - seed_for: callable client_id -> injection seed

    Returns {client_id: (kernel, record)}. Under the globalized pattern every
    client holds the same kernel object.
    """
    shared = build_kernel(spec, range(num_classes), num_classes) if spec.pattern == "globalized" else None
    results = {}
    for shard in shards:
        if shared is not None:
            kernel = shared
        elif len(shard.label_support) < 2 and spec.rate > 0:
            logger.warning(f"Client {shard.client_id} has a single local class {sorted(shard.label_support)}; using the identity kernel")
            kernel = identity_kernel(shard.label_support, num_classes)
        else:
            kernel = build_kernel(spec, shard.label_support, num_classes)
        record = inject_noise(shard.true_labels, kernel, seed_for(shard.client_id))
        logger.debug(f"Client {shard.client_id}: injected noise rate {record.noise_rate:.3f}")
        results[shard.client_id] = (kernel, record)
    return results
