"""
Label-geometry evidence for noisy-label detection.

A client's class-to-geometry matrix B maps each observed class to a
distribution over the G semantic clusters of its vMF mixture. A sample
whose tempered responsibilities disagree with its class's row in B gets
a low cleanliness score; a two-component Gaussian mixture on 1 - score
then splits the shard into a likely-clean and a likely-noisy subset.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture

from fedrg.directional_stats import (
    EmConfig,
    TemperingConfig,
    consistency_factor,
    em_fit,
    tempered_responsibilities,
)
from fedrg.errors import FedRGError, ManifestError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvidenceConfig:
    eta: float = 1e-2

    def validate(self, prefix="evidence"):
        if not self.eta > 0:
            raise ManifestError(f"{prefix}.eta", f"must be > 0 (got {self.eta})")


@dataclass(frozen=True)
class GmmConfig:
    """Two-component 1-D Gaussian mixture used for the clean/noisy split."""

    max_iters: int = 100
    tol: float = 1e-7
    var_floor: float = 1e-6
    threshold: float = 0.5
    degenerate_var: float = 1e-10
    min_mean_gap: float = 0.1

    def validate(self, prefix="gmm"):
        if self.max_iters < 1:
            raise ManifestError(f"{prefix}.max_iters", f"must be >= 1 (got {self.max_iters})")
        if self.tol <= 0:
            raise ManifestError(f"{prefix}.tol", f"must be > 0 (got {self.tol})")
        if self.var_floor <= 0:
            raise ManifestError(f"{prefix}.var_floor", f"must be > 0 (got {self.var_floor})")
        if not 0.0 < self.threshold < 1.0:
            raise ManifestError(f"{prefix}.threshold", f"must be in (0, 1) (got {self.threshold})")
        if self.degenerate_var < 0:
            raise ManifestError(f"{prefix}.degenerate_var", f"must be >= 0 (got {self.degenerate_var})")
        if self.min_mean_gap < 0:
            raise ManifestError(f"{prefix}.min_mean_gap", f"must be >= 0 (got {self.min_mean_gap})")


@dataclass(frozen=True, eq=False)
class ClassGeometryMatrix:
    """Row-stochastic C x G matrix; the background component has no column."""

    rows: np.ndarray
    smoothing: float

    @classmethod
    def uniform(cls, num_classes, num_clusters, eta):
        return cls(np.full((num_classes, num_clusters), 1.0 / num_clusters), eta)

    @property
    def num_classes(self):
        return self.rows.shape[0]

    @property
    def num_clusters(self):
        return self.rows.shape[1]

    def to_dict(self):
        return {"rows": self.rows.tolist(), "smoothing": self.smoothing}


@dataclass(frozen=True, eq=False)
class PartitionResult:
    clean_mask: np.ndarray
    clean_posterior: np.ndarray
    gmm_means: tuple
    gmm_vars: tuple
    gmm_weights: tuple
    degenerate: bool

    @property
    def noisy_mask(self):
        return ~self.clean_mask

    @property
    def noisy_fraction(self):
        return float(self.noisy_mask.mean()) if self.clean_mask.size else 0.0

    def to_dict(self):
        return {
            "clean_mask": self.clean_mask.astype(int).tolist(),
            "gmm_means": list(self.gmm_means),
            "gmm_vars": list(self.gmm_vars),
            "gmm_weights": list(self.gmm_weights),
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True, eq=False)
class DetectionOutcome:
    """Everything one detection pass leaves on the device."""

    mixture: object
    geometry: ClassGeometryMatrix
    partition: PartitionResult
    scores: np.ndarray
    tempering: np.ndarray
    em_iterations: int
    vmf_fallback: bool


def _check_resp_labels(resp, labels):
    resp = np.asarray(resp, dtype=float)
    if resp.ndim == 1:
        resp = resp[None, :]
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if resp.ndim != 2 or resp.shape[1] < 2:
        raise ValidationError(f"responsibilities must be (n, G+1) with G >= 1, got shape {resp.shape}")
    if resp.shape[0] != labels.shape[0]:
        raise ValidationError(f"{resp.shape[0]} responsibility rows for {labels.shape[0]} labels")
    return resp, labels


def update_class_geometry(resp, labels, C, eta):
    """
    Dirichlet-smoothed class-to-cluster distribution from (clean) samples.

    Parameters:
    - resp: (n, G+1) tempered responsibilities; column 0 is ignored
    - labels: observed class of each row
    - C: number of classes
    - eta: smoothing mass added to every (class, cluster) cell
    """
    if not eta > 0:
        raise ValidationError(f"eta must be > 0 (got {eta})")
    resp, labels = _check_resp_labels(resp, labels)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValidationError(f"labels must lie in [0, {C})")
    counts = np.zeros((C, resp.shape[1] - 1))
    np.add.at(counts, labels, resp[:, 1:])
    smoothed = counts + eta
    return ClassGeometryMatrix(smoothed / smoothed.sum(axis=1, keepdims=True), float(eta))


def cleanliness_scores(resp, labels, B):
    """P_i = <B[label_i], gamma_i[1:]>; background mass lowers the score."""
    resp, labels = _check_resp_labels(resp, labels)
    if resp.shape[1] - 1 != B.num_clusters:
        raise ValidationError(f"responsibilities have {resp.shape[1] - 1} clusters, B has {B.num_clusters}")
    if labels.size and (labels.min() < 0 or labels.max() >= B.num_classes):
        raise ValidationError(f"labels must lie in [0, {B.num_classes})")
    scores = np.einsum("ij,ij->i", B.rows[labels], resp[:, 1:])
    return np.clip(scores, 0.0, 1.0)


def small_loss_scores(pred_dists, labels):
    """Loss-based cleanliness: 1 - CE_i / max CE, so the GMM sees the normalized loss."""
    probs = np.asarray(pred_dists, dtype=float)
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValidationError(f"expected (n, C) predictions for {labels.shape[0]} labels, got {probs.shape}")
    losses = -np.log(np.clip(probs[np.arange(labels.size), labels], 1e-12, 1.0))
    top = losses.max() if losses.size else 0.0
    if top <= 0:
        return np.ones(labels.size)
    return 1.0 - losses / top


def _degenerate_partition(x, cfg):
    n = x.shape[0]
    center = float(x.mean()) if n else 0.0
    spread = max(float(x.var()) if n else 0.0, cfg.var_floor)
    return PartitionResult(
        clean_mask=np.ones(n, dtype=bool),
        clean_posterior=np.ones(n),
        gmm_means=(center, center),
        gmm_vars=(spread, spread),
        gmm_weights=(1.0, 0.0),
        degenerate=True,
    )


def all_clean_partition(n, cfg=GmmConfig()):
    return _degenerate_partition(np.zeros(n), cfg)


def gmm_partition(scores, cfg=GmmConfig(), rng_seed=0):
    """
    Split samples into clean/noisy with a 2-component GMM on x = 1 - P.

    The component with the smaller mean is the clean one. Zero-variance
    scores, a single sample, or two components closer than
    cfg.min_mean_gap give an all-clean result with `degenerate` set.
    """
    x = 1.0 - np.asarray(scores, dtype=float).reshape(-1)
    if x.size == 0:
        raise ValidationError("cannot partition an empty score vector")
    if not np.all(np.isfinite(x)):
        raise ValidationError("cleanliness scores contain non-finite values")
    if x.size < 2 or x.var() < cfg.degenerate_var:
        logger.debug(f"Degenerate cleanliness scores (n={x.size}); marking all samples clean")
        return _degenerate_partition(x, cfg)

    gmm = GaussianMixture(
        n_components=2,
        covariance_type="full",
        tol=cfg.tol,
        reg_covar=cfg.var_floor,
        max_iter=cfg.max_iters,
        init_params="kmeans",
        random_state=int(rng_seed) % (2**32),
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        gmm.fit(x[:, None])
    means = gmm.means_.reshape(-1)
    variances = gmm.covariances_.reshape(-1)
    order = np.argsort(means, kind="stable")
    clean, noisy = int(order[0]), int(order[1])
    if means[noisy] - means[clean] < cfg.min_mean_gap:
        logger.debug(f"GMM means {means[clean]:.4f}/{means[noisy]:.4f} too close; marking all samples clean")
        return _degenerate_partition(x, cfg)

    posterior = gmm.predict_proba(x[:, None])[:, clean]
    weights = gmm.weights_ / gmm.weights_.sum()
    return PartitionResult(
        clean_mask=posterior >= cfg.threshold,
        clean_posterior=posterior,
        gmm_means=(float(means[clean]), float(means[noisy])),
        gmm_vars=(float(variances[clean]), float(variances[noisy])),
        gmm_weights=(float(weights[clean]), float(1.0 - weights[clean])),
        degenerate=False,
    )


def run_detection(
    embeddings,
    views,
    labels,
    num_classes,
    num_clusters,
    previous_mixture=None,
    previous_geometry=None,
    vmf_cfg=EmConfig(),
    tempering_cfg=TemperingConfig(),
    evidence_cfg=EvidenceConfig(),
    gmm_cfg=GmmConfig(),
    em_seed=0,
    gmm_seed=0,
):
    """
    One geometry-based detection pass over a client's embedded shard.

    Parameters:
    - embeddings: (n, d) unit embeddings of the unaugmented samples
    - views: pair of (n, d) unit embeddings of two augmented views
    - labels: observed labels
    - previous_mixture / previous_geometry: state retained from the last pass
    """
    labels = np.asarray(labels, dtype=int).reshape(-1)
    geometry = previous_geometry
    if geometry is None or geometry.rows.shape != (num_classes, num_clusters):
        geometry = ClassGeometryMatrix.uniform(num_classes, num_clusters, evidence_cfg.eta)

    try:
        fit = em_fit(embeddings, np.ones(labels.size), num_clusters, vmf_cfg, em_seed, init=previous_mixture)
        mixture, iterations, fallback = fit.mixture, fit.iterations, False
    except FedRGError as exc:
        logger.warning(f"vMF fit failed ({exc}); reusing the previous mixture")
        mixture, iterations, fallback = previous_mixture, 0, True

    if mixture is None:
        return DetectionOutcome(
            mixture=None,
            geometry=geometry,
            partition=all_clean_partition(labels.size, gmm_cfg),
            scores=np.ones(labels.size),
            tempering=np.ones(labels.size),
            em_iterations=0,
            vmf_fallback=True,
        )

    r = consistency_factor(views[0], views[1], tempering_cfg)
    resp = tempered_responsibilities(mixture, embeddings, r)
    scores = cleanliness_scores(resp, labels, geometry)
    partition = gmm_partition(scores, gmm_cfg, gmm_seed)
    clean = partition.clean_mask
    updated = update_class_geometry(resp[clean], labels[clean], num_classes, evidence_cfg.eta)
    return DetectionOutcome(
        mixture=mixture,
        geometry=updated,
        partition=partition,
        scores=scores,
        tempering=np.atleast_1d(r),
        em_iterations=iterations,
        vmf_fallback=fallback,
    )
