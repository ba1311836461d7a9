"""
Tiny differentiable model used by every client.

encoder:    h = tanh(x W1 + b1),  f = h W2 + b2,  z = f / ||f||
classifier: p = softmax(z Wc + bc)
absorption: T = row-softmax(logits), applied as p T for forward correction

Gradients are accumulated in reverse order for this fixed architecture.
"""

import logging
from dataclasses import dataclass, fields, replace

import numpy as np
from scipy import special

from fedrg.errors import LearnerError, ManifestError, ValidationError

logger = logging.getLogger(__name__)

ENCODER_KEYS = ("w1", "b1", "w2", "b2")
CLASSIFIER_KEYS = ("wc", "bc")
ALL_KEYS = ENCODER_KEYS + CLASSIFIER_KEYS


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 32
    embed_dim: int = 16

    def validate(self, prefix="model"):
        if self.hidden_dim < 1:
            raise ManifestError(f"{prefix}.hidden_dim", f"must be >= 1 (got {self.hidden_dim})")
        if self.embed_dim < 2:
            raise ManifestError(f"{prefix}.embed_dim", f"must be >= 2 (got {self.embed_dim})")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.5
    sce_alpha: float = 0.1
    sce_beta: float = 1.0
    rce_log_zero: float = -4.0
    lambda_s: float = 1.0
    lambda_n: float = 1.0
    epsilon_guard: float = 1e-8
    prob_clamp: float = 1e-7

    def validate(self, prefix="loss"):
        if not self.tau > 0:
            raise ManifestError(f"{prefix}.tau", f"must be > 0 (got {self.tau})")
        if self.sce_alpha < 0 or self.sce_beta < 0:
            raise ManifestError(f"{prefix}.sce_alpha", "SCE weights must be >= 0")
        if self.sce_alpha == 0 and self.sce_beta == 0:
            raise ManifestError(f"{prefix}.sce_alpha", "sce_alpha and sce_beta cannot both be 0")
        if not self.rce_log_zero < 0:
            raise ManifestError(f"{prefix}.rce_log_zero", f"must be < 0 (got {self.rce_log_zero})")
        if self.lambda_s < 0:
            raise ManifestError(f"{prefix}.lambda_s", f"must be >= 0 (got {self.lambda_s})")
        if self.lambda_n < 0:
            raise ManifestError(f"{prefix}.lambda_n", f"must be >= 0 (got {self.lambda_n})")
        if not self.epsilon_guard > 0:
            raise ManifestError(f"{prefix}.epsilon_guard", f"must be > 0 (got {self.epsilon_guard})")
        if not 0 < self.prob_clamp < 1:
            raise ManifestError(f"{prefix}.prob_clamp", f"must be in (0, 1) (got {self.prob_clamp})")


@dataclass(frozen=True, eq=False)
class ModelParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wc: np.ndarray
    bc: np.ndarray

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def copy(self):
        return ModelParams(**{key: value.copy() for key, value in self.items()})

    def with_values(self, **updates):
        return replace(self, **updates)

    @property
    def embed_dim(self):
        return self.w2.shape[1]

    @property
    def num_classes(self):
        return self.wc.shape[1]

    def to_dict(self):
        return {key: {"shape": list(value.shape), "data": value.reshape(-1).tolist()} for key, value in self.items()}

    @classmethod
    def from_dict(cls, payload):
        return cls(**{key: np.asarray(payload[key]["data"], dtype=float).reshape(payload[key]["shape"]) for key in ALL_KEYS})


@dataclass(frozen=True, eq=False)
class NoiseAbsorptionMatrix:
    """Free logits; the row-stochastic matrix T is their row softmax."""

    logits: np.ndarray

    @classmethod
    def initial(cls, num_classes, diagonal=2.0):
        return cls(np.eye(num_classes) * diagonal)

    @classmethod
    def from_effective(cls, matrix):
        return cls(np.log(np.asarray(matrix, dtype=float)))

    @property
    def effective(self):
        return special.softmax(self.logits, axis=1)

    def to_dict(self):
        return {"logits": self.logits.tolist(), "effective": self.effective.tolist()}


@dataclass(frozen=True, eq=False)
class ForwardCache:
    x: np.ndarray
    h: np.ndarray
    f: np.ndarray
    norms: np.ndarray
    z: np.ndarray
    guarded: np.ndarray


def init_params(cfg, input_dim, num_classes, rng_seed):
    rng = np.random.default_rng(rng_seed)

    def layer(fan_in, fan_out):
        return rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)), np.zeros(fan_out)

    w1, b1 = layer(input_dim, cfg.hidden_dim)
    w2, b2 = layer(cfg.hidden_dim, cfg.embed_dim)
    wc, bc = layer(cfg.embed_dim, num_classes)
    return ModelParams(w1, b1, w2, b2, wc, bc)


def forward(x, params, epsilon_guard=1e-8):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.w1.shape[0]:
        raise ValidationError(f"inputs have {x.shape[1]} features, encoder expects {params.w1.shape[0]}")
    h = np.tanh(x @ params.w1 + params.b1)
    f = h @ params.w2 + params.b2
    norms = np.linalg.norm(f, axis=1)
    guarded = norms <= 0
    if np.any(guarded):
        logger.warning(f"{int(guarded.sum())} zero-norm embeddings; adding {epsilon_guard} to the norm")
        norms = np.where(guarded, norms + epsilon_guard, norms)
    return ForwardCache(x, h, f, norms, f / norms[:, None], guarded)


def encode(x, params, epsilon_guard=1e-8):
    """L2-normalized embeddings, one row per input."""
    return forward(x, params, epsilon_guard).z


def classify(z, params):
    return special.softmax(z @ params.wc + params.bc, axis=1)


def predict_proba(x, params, epsilon_guard=1e-8):
    return classify(encode(x, params, epsilon_guard), params)


def predict(x, params):
    return np.argmax(predict_proba(x, params), axis=1)


def _encoder_backward(cache, grad_z, params):
    z, norms = cache.z, cache.norms
    grad_f = (grad_z - z * np.sum(z * grad_z, axis=1, keepdims=True)) / norms[:, None]
    grad_h = grad_f @ params.w2.T
    grad_a = grad_h * (1.0 - cache.h ** 2)
    return {
        "w1": cache.x.T @ grad_a,
        "b1": grad_a.sum(axis=0),
        "w2": cache.h.T @ grad_f,
        "b2": grad_f.sum(axis=0),
    }


def _softmax_backward(probs, grad_probs):
    return probs * (grad_probs - np.sum(grad_probs * probs, axis=-1, keepdims=True))


def nt_xent_loss(embeddings, tau):
    """
    Symmetric NT-Xent over 2b embeddings.

    Rows 0..b-1 are first views and rows b..2b-1 second views; the positive
    of row i is row (i + b) mod 2b. Returns (loss, gradient w.r.t. embeddings).
    """
    if not tau > 0:
        raise ValidationError(f"temperature must be > 0 (got {tau})")
    z = np.asarray(embeddings, dtype=float)
    n = z.shape[0]
    if n < 2 or n % 2:
        raise ValidationError(f"expected an even number (>= 2) of embeddings, got {n}")
    b = n // 2
    positives = (np.arange(n) + b) % n
    sims = (z @ z.T) / tau
    np.fill_diagonal(sims, -np.inf)
    log_probs = sims - special.logsumexp(sims, axis=1, keepdims=True)
    loss = -float(np.mean(log_probs[np.arange(n), positives]))

    coeff = np.exp(log_probs)
    coeff[np.arange(n), positives] -= 1.0
    coeff /= n
    grad = (coeff + coeff.T) @ z / tau
    return loss, grad


def sce_loss(pred_dist, label, cfg):
    """
    Symmetric cross-entropy alpha * CE + beta * RCE, averaged over the batch.

    RCE uses log(0) := cfg.rce_log_zero, so RCE_i = -A * sum_{k != y} p_k.
    Returns (loss, gradient w.r.t. the probabilities).
    """
    probs = np.atleast_2d(np.asarray(pred_dist, dtype=float))
    labels = np.atleast_1d(np.asarray(label, dtype=int))
    n, C = probs.shape
    if labels.shape[0] != n:
        raise ValidationError(f"{labels.shape[0]} labels for {n} predictions")
    rows = np.arange(n)
    p_true = probs[rows, labels]
    clamped = np.maximum(p_true, cfg.prob_clamp)
    ce = -np.log(clamped)
    off_true = np.ones_like(probs)
    off_true[rows, labels] = 0.0
    rce = -cfg.rce_log_zero * np.sum(probs * off_true, axis=1)
    loss = float(np.mean(cfg.sce_alpha * ce + cfg.sce_beta * rce))

    grad = -cfg.rce_log_zero * cfg.sce_beta * off_true
    grad[rows, labels] = np.where(p_true > cfg.prob_clamp, -cfg.sce_alpha / clamped, 0.0)
    return loss, grad / n


def forward_corrected_loss(pred_dists, T, labels, noisy_mask, cfg):
    """
    L_n = -(sum m_i + eps)^-1 sum m_i log((p_i T)_{y_i} + eps).

    Returns (loss, gradient w.r.t. probabilities, gradient w.r.t. T logits).
    """
    probs = np.atleast_2d(np.asarray(pred_dists, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    mask = np.atleast_1d(np.asarray(noisy_mask, dtype=float))
    if mask.shape[0] != probs.shape[0] or labels.shape[0] != probs.shape[0]:
        raise ValidationError(f"mask/labels/predictions disagree on batch size: {mask.shape[0]}/{labels.shape[0]}/{probs.shape[0]}")
    eps = cfg.epsilon_guard
    matrix = T.effective
    rows = np.arange(probs.shape[0])
    corrected = (probs @ matrix)[rows, labels] + eps
    denom = mask.sum() + eps
    loss = -float(np.sum(mask * np.log(corrected)) / denom)

    coef = -mask / (denom * corrected)
    grad_probs = coef[:, None] * matrix[:, labels].T
    one_hot = np.zeros_like(probs)
    one_hot[rows, labels] = coef
    grad_matrix = probs.T @ one_hot
    return loss, grad_probs, _softmax_backward(matrix, grad_matrix)


def loss_head(pred_dists, labels, noisy_mask, T, cfg):
    """lambda_s * SCE over all samples + lambda_n * forward-corrected loss over noisy ones."""
    sce, grad_sce = sce_loss(pred_dists, labels, cfg)
    value = cfg.lambda_s * sce
    grad_probs = cfg.lambda_s * grad_sce
    grad_T = np.zeros_like(T.logits)
    if cfg.lambda_n > 0:
        noisy, grad_noisy, grad_T = forward_corrected_loss(pred_dists, T, labels, noisy_mask, cfg)
        value += cfg.lambda_n * noisy
        grad_probs = grad_probs + cfg.lambda_n * grad_noisy
        grad_T = cfg.lambda_n * grad_T
    return value, grad_probs, grad_T


def total_loss(x, labels, noisy_mask, params, T, cfg):
    """Robust supervised objective with gradients for every parameter and the T logits."""
    cache = forward(x, params, cfg.epsilon_guard)
    probs = classify(cache.z, params)
    value, grad_probs, grad_T = loss_head(probs, labels, noisy_mask, T, cfg)
    grad_logits = _softmax_backward(probs, grad_probs)
    grads = _encoder_backward(cache, grad_logits @ params.wc.T, params)
    grads["wc"] = cache.z.T @ grad_logits
    grads["bc"] = grad_logits.sum(axis=0)
    return value, grads, grad_T


def contrastive_loss(view1, view2, params, cfg):
    """NT-Xent on the encoder outputs of two views; gradients cover encoder weights only."""
    cache = forward(np.vstack([view1, view2]), params, cfg.epsilon_guard)
    value, grad_z = nt_xent_loss(cache.z, cfg.tau)
    return value, _encoder_backward(cache, grad_z, params)


def sgd_step(params, T, grads, lr, grad_T=None):
    """Plain SGD on the given parameter gradients (and on the T logits when grad_T is set)."""
    if lr < 0:
        raise ValidationError(f"learning rate must be >= 0 (got {lr})")
    for key, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise LearnerError(f"non-finite gradient for {key}; step rejected")
    if grad_T is not None and not np.all(np.isfinite(grad_T)):
        raise LearnerError("non-finite gradient for the noise absorption logits; step rejected")
    updated = params.with_values(**{key: getattr(params, key) - lr * grad for key, grad in grads.items()})
    if grad_T is not None:
        T = NoiseAbsorptionMatrix(T.logits - lr * grad_T)
    return updated, T
