"""
Von Mises-Fisher mixture with a uniform background on the unit hypersphere.

The mixture density is

    p(z) = pi0 * U(z) + sum_g pi_g * vMF(z | mu_g, kappa_g)

where U is the uniform density on S^{d-1} and

    vMF(z | mu, kappa) = C_d(kappa) * exp(kappa * mu^T z)
    C_d(kappa) = kappa^(d/2-1) / ((2*pi)^(d/2) * I_{d/2-1}(kappa))

Only log-space densities are exposed. Batches of unit vectors are (n, d)
arrays and responsibilities are (n, G+1) arrays whose column 0 is the
background.
"""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import special

from fedrg.errors import DegenerateMixtureError, DimensionError, ManifestError, ValidationError

logger = logging.getLogger(__name__)

KAPPA_MAX = 1e4
UNIT_TOL = 1e-9
WEIGHT_TOL = 1e-9


@dataclass(frozen=True)
class TemperingConfig:
    """Map from two-view agreement to the tempering exponent r."""

    r_min: float = 0.1

    def validate(self, prefix="tempering"):
        if not 0.0 < self.r_min <= 1.0:
            raise ManifestError(f"{prefix}.r_min", f"must be in (0, 1] (got {self.r_min})")


@dataclass(frozen=True)
class EmConfig:
    """EM settings for the spherical mixture fit."""

    max_iters: int = 50
    tol: float = 1e-5
    pi0_init: float = 0.05
    pi0_floor: float = 0.01
    kappa_init: float = 10.0
    kappa_max: float = KAPPA_MAX
    empty_mass: float = 1e-6
    collapse_ratio: float = 0.1
    newton_steps: int = 3
    n_init: int = 5
    restart_margin: float = 1e-3

    def validate(self, prefix="vmf"):
        if self.max_iters < 1:
            raise ManifestError(f"{prefix}.max_iters", f"must be >= 1 (got {self.max_iters})")
        if self.tol <= 0:
            raise ManifestError(f"{prefix}.tol", f"must be > 0 (got {self.tol})")
        if not 0.0 <= self.pi0_floor < 1.0:
            raise ManifestError(f"{prefix}.pi0_floor", f"must be in [0, 1) (got {self.pi0_floor})")
        if not 0.0 <= self.pi0_init < 1.0:
            raise ManifestError(f"{prefix}.pi0_init", f"must be in [0, 1) (got {self.pi0_init})")
        if self.kappa_init < 0 or not math.isfinite(self.kappa_init):
            raise ManifestError(f"{prefix}.kappa_init", f"must be finite and >= 0 (got {self.kappa_init})")
        if not 0 < self.kappa_max < math.inf:
            raise ManifestError(f"{prefix}.kappa_max", f"must be finite and > 0 (got {self.kappa_max})")
        if self.empty_mass < 0:
            raise ManifestError(f"{prefix}.empty_mass", f"must be >= 0 (got {self.empty_mass})")
        if self.newton_steps < 0:
            raise ManifestError(f"{prefix}.newton_steps", f"must be >= 0 (got {self.newton_steps})")
        if not 0.0 <= self.collapse_ratio < 1.0:
            raise ManifestError(f"{prefix}.collapse_ratio", f"must be in [0, 1) (got {self.collapse_ratio})")
        if self.n_init < 1:
            raise ManifestError(f"{prefix}.n_init", f"must be >= 1 (got {self.n_init})")
        if self.restart_margin < 0:
            raise ManifestError(f"{prefix}.restart_margin", f"must be >= 0 (got {self.restart_margin})")


def normalize_rows(x, eps=0.0):
    """L2-normalize the last axis; `eps` is added to the norm."""
    x = np.asarray(x, dtype=float)
    return x / (np.linalg.norm(x, axis=-1, keepdims=True) + eps)


def as_unit_vectors(points, dim=None):
    """Validate and return an (n, d) array of unit vectors."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionError(f"expected an (n, d) array of unit vectors, got shape {arr.shape}")
    if arr.shape[1] < 2:
        raise DimensionError(f"sphere dimension must be >= 2 (got {arr.shape[1]})")
    if dim is not None and arr.shape[1] != dim:
        raise DimensionError(f"dimension mismatch: points have d={arr.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("unit vectors contain non-finite coordinates")
    norms = np.linalg.norm(arr, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValidationError(f"vectors are not unit-norm (max deviation {worst:.3e})")
    return arr


@dataclass(frozen=True, eq=False)
class VmfComponent:
    mean_direction: np.ndarray
    concentration: float

    def __post_init__(self):
        mu = as_unit_vectors(self.mean_direction)[0]
        kappa = float(self.concentration)
        if not math.isfinite(kappa):
            raise ValidationError(f"concentration must be finite (got {kappa})")
        if kappa < 0:
            raise ValidationError(f"concentration must be >= 0 (got {kappa})")
        object.__setattr__(self, "mean_direction", mu)
        object.__setattr__(self, "concentration", kappa)

    @property
    def dim(self):
        return self.mean_direction.shape[0]


@dataclass(frozen=True, eq=False)
class VmfMixture:
    """Background weight pi0 plus G weighted vMF components."""

    background_weight: float
    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        components = tuple(self.components)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        pi0 = float(self.background_weight)
        if len(components) < 1:
            raise ValidationError("a mixture needs at least one vMF component")
        if weights.shape[0] != len(components):
            raise ValidationError(f"{weights.shape[0]} weights for {len(components)} components")
        if pi0 < 0 or np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValidationError("mixture weights must be finite and non-negative")
        total = pi0 + float(weights.sum())
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ValidationError(f"mixture weights sum to {total!r}, expected 1")
        dims = {component.dim for component in components}
        if len(dims) != 1:
            raise DimensionError(f"components disagree on dimension: {sorted(dims)}")
        object.__setattr__(self, "components", components)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "background_weight", pi0)

    @classmethod
    def from_arrays(cls, background_weight, weights, means, kappas):
        components = tuple(VmfComponent(mu, kappa) for mu, kappa in zip(np.asarray(means), np.asarray(kappas)))
        return cls(background_weight, weights, components)

    @property
    def dim(self):
        return self.components[0].dim

    @property
    def num_components(self):
        return len(self.components)

    @property
    def means(self):
        return np.stack([component.mean_direction for component in self.components])

    @property
    def kappas(self):
        return np.array([component.concentration for component in self.components])

    def log_prior(self):
        with np.errstate(divide="ignore"):
            return np.log(np.concatenate([[self.background_weight], self.weights]))

    def to_dict(self):
        return {
            "pi0": self.background_weight,
            "components": [
                {"weight": float(weight), "mu": component.mean_direction.tolist(), "kappa": component.concentration}
                for weight, component in zip(self.weights, self.components)
            ],
            "dim": self.dim,
        }

    @classmethod
    def from_dict(cls, payload):
        entries = payload["components"]
        mixture = cls.from_arrays(
            payload["pi0"],
            [entry["weight"] for entry in entries],
            [entry["mu"] for entry in entries],
            [entry["kappa"] for entry in entries],
        )
        if mixture.dim != payload["dim"]:
            raise DimensionError(f"serialized dim {payload['dim']} does not match means of dim {mixture.dim}")
        return mixture


class KappaEstimate(NamedTuple):
    kappa: float
    saturated: bool


class EmResult(NamedTuple):
    mixture: VmfMixture
    log_likelihood_trace: tuple
    iterations: int
    converged: bool
    saturated: bool


def log_uniform_density(d):
    """Log of 1 / area(S^{d-1}) = -log(2 pi^{d/2} / Gamma(d/2))."""
    if d < 2:
        raise DimensionError(f"sphere dimension must be >= 2 (got {d})")
    return -(math.log(2.0) + 0.5 * d * math.log(math.pi) - math.lgamma(0.5 * d))


def log_bessel_iv(nu, kappa):
    """log I_nu(kappa) for kappa >= 0, through the exponentially scaled Bessel function."""
    kappa = np.asarray(kappa, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.log(special.ive(nu, kappa)) + kappa
    # ive underflows for tiny kappa at high order; the leading series term takes over there
    underflow = ~np.isfinite(out) & (kappa > 0)
    if np.any(underflow):
        safe = np.where(underflow, kappa, 1.0)
        series = nu * np.log(safe / 2.0) - special.gammaln(nu + 1.0)
        out = np.where(underflow, series, out)
    return out


def log_vmf_normalizer(kappa, d):
    """log C_d(kappa); kappa = 0 returns the uniform limit exactly."""
    if d < 2:
        raise DimensionError(f"sphere dimension must be >= 2 (got {d})")
    kappa = np.asarray(kappa, dtype=float)
    nu = 0.5 * d - 1.0
    positive = kappa > 0
    safe = np.where(positive, kappa, 1.0)
    log_c = nu * np.log(safe) - 0.5 * d * math.log(2.0 * math.pi) - log_bessel_iv(nu, safe)
    return np.where(positive, log_c, log_uniform_density(d))


def mean_resultant_length(kappa, d):
    """A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa)."""
    kappa = np.asarray(kappa, dtype=float)
    nu = 0.5 * d - 1.0
    positive = kappa > 0
    safe = np.where(positive, kappa, 1.0)
    ratio = special.ive(nu + 1.0, safe) / special.ive(nu, safe)
    return np.where(positive, ratio, 0.0)


def log_vmf_density(z, comp):
    """log vMF(z | mu, kappa) for one unit vector or an (n, d) batch."""
    single = np.ndim(z) == 1
    points = as_unit_vectors(z)
    if points.shape[1] != comp.dim:
        raise DimensionError(f"dimension mismatch: z has d={points.shape[1]}, component has d={comp.dim}")
    kappa = comp.concentration
    values = log_vmf_normalizer(kappa, comp.dim) + kappa * (points @ comp.mean_direction)
    return float(values[0]) if single else values


def component_log_densities(mix, points):
    """(n, G+1) matrix of log p_g(z_i); column 0 is the uniform background."""
    points = as_unit_vectors(points, dim=mix.dim)
    return _log_densities(points, mix.means, mix.kappas)


def _log_densities(points, means, kappas):
    d = points.shape[1]
    vmf = log_vmf_normalizer(kappas, d)[None, :] + (points @ means.T) * kappas[None, :]
    background = np.full((points.shape[0], 1), log_uniform_density(d))
    return np.hstack([background, vmf])


def _posterior(log_prior, log_lik, r=None):
    scaled = log_lik if r is None else log_lik * r[:, None]
    joint = log_prior[None, :] + scaled
    with np.errstate(invalid="ignore"):
        log_norm = special.logsumexp(joint, axis=1, keepdims=True)
    if not np.all(np.isfinite(log_norm)):
        raise DegenerateMixtureError("every mixture component has zero weight or zero density")
    return np.exp(joint - log_norm), log_norm[:, 0]


def responsibilities(mix, z):
    """Posterior gamma_{i,0..G} of each mixture component for z."""
    single = np.ndim(z) == 1
    resp, _ = _posterior(mix.log_prior(), component_log_densities(mix, z))
    return resp[0] if single else resp


def tempered_responsibilities(mix, z, r):
    """Responsibilities under tempered likelihoods r * log p_g(z), background included."""
    single = np.ndim(z) == 1
    points = as_unit_vectors(z, dim=mix.dim)
    r = np.broadcast_to(np.asarray(r, dtype=float), (points.shape[0],))
    if np.any(~np.isfinite(r)) or np.any(r <= 0) or np.any(r > 1):
        raise ValidationError("tempering factor must lie in (0, 1]")
    resp, _ = _posterior(mix.log_prior(), _log_densities(points, mix.means, mix.kappas), r)
    return resp[0] if single else resp


def consistency_factor(z1, z2, cfg=TemperingConfig()):
    """r = max(r_min, (1 + <z1, z2>) / 2), row-wise for batches."""
    single = np.ndim(z1) == 1
    a = as_unit_vectors(z1)
    b = as_unit_vectors(z2, dim=a.shape[1])
    if a.shape != b.shape:
        raise DimensionError(f"view shapes differ: {a.shape} vs {b.shape}")
    agreement = np.clip(np.sum(a * b, axis=1), -1.0, 1.0)
    r = np.maximum(cfg.r_min, 0.5 * (1.0 + agreement))
    return float(r[0]) if single else r


def estimate_kappa(mean_resultant_length, d, kappa_max=KAPPA_MAX):
    """Closed-form concentration estimate rbar (d - rbar^2) / (1 - rbar^2), clamped."""
    rbar = float(mean_resultant_length)
    if not math.isfinite(rbar) or rbar < 0:
        raise ValidationError(f"mean resultant length must be >= 0 (got {rbar})")
    if rbar >= 1.0:
        return KappaEstimate(float(kappa_max), True)
    kappa = rbar * (d - rbar * rbar) / (1.0 - rbar * rbar)
    if kappa >= kappa_max:
        return KappaEstimate(float(kappa_max), True)
    return KappaEstimate(max(kappa, 0.0), False)


def _refine_kappa(kappa, rbar, d, steps, kappa_max):
    # Newton iterations on A_d(kappa) = rbar
    for _ in range(steps):
        if kappa <= 0:
            break
        a = float(mean_resultant_length(kappa, d))
        slope = 1.0 - a * a - (d - 1.0) / kappa * a
        if not math.isfinite(slope) or slope <= 0:
            break
        kappa = min(max(kappa - (a - rbar) / slope, 0.0), kappa_max)
    return kappa


def _expected_log_lik(kappa, mass, resultant_norm, d):
    return mass * float(log_vmf_normalizer(kappa, d)) + kappa * resultant_norm


def _kmeanspp_seeds(points, weights, num_components, rng):
    # Spherical k-means++: cosine distance is half the squared chord length
    probs = weights / weights.sum()
    first = rng.choice(points.shape[0], p=probs)
    centers = [points[first]]
    closest = 1.0 - points @ points[first]
    for _ in range(1, num_components):
        scores = weights * np.maximum(closest, 0.0)
        if scores.sum() <= 0:
            idx = rng.choice(points.shape[0], p=probs)
        else:
            idx = rng.choice(points.shape[0], p=scores / scores.sum())
        centers.append(points[idx])
        closest = np.minimum(closest, 1.0 - points @ points[idx])
    return normalize_rows(np.stack(centers))


def _floor_background(pi0, weights, floor):
    if pi0 >= floor:
        return pi0, weights
    total = weights.sum()
    if total > 0:
        return floor, weights * ((1.0 - floor) / total)
    return floor, np.full(weights.shape[0], (1.0 - floor) / weights.shape[0])


def _m_step(points, weights, resp, state, cfg):
    pi0, mix_weights, means, kappas = state
    d = points.shape[1]
    weighted = weights[:, None] * resp
    mass = weighted.sum(axis=0)
    pi = mass / weights.sum()
    new_pi0, new_weights = _floor_background(float(pi[0]), pi[1:].copy(), cfg.pi0_floor)
    resultants = weighted[:, 1:].T @ points
    new_means = means.copy()
    new_kappas = kappas.copy()
    for g in range(means.shape[0]):
        comp_mass = mass[g + 1]
        norm = float(np.linalg.norm(resultants[g]))
        if comp_mass < cfg.empty_mass * points.shape[0] or norm <= 0:
            continue
        new_means[g] = resultants[g] / norm
        estimate = estimate_kappa(norm / comp_mass, d, cfg.kappa_max)
        candidates = [kappas[g], estimate.kappa]
        if not estimate.saturated:
            candidates.append(_refine_kappa(estimate.kappa, norm / comp_mass, d, cfg.newton_steps, cfg.kappa_max))
        # best candidate under the expected complete-data log-likelihood
        new_kappas[g] = max(candidates, key=lambda k: _expected_log_lik(k, comp_mass, norm, d))
    return new_pi0, new_weights, new_means, new_kappas


def _evaluate(points, weights, state):
    pi0, mix_weights, means, kappas = state
    with np.errstate(divide="ignore"):
        log_prior = np.log(np.concatenate([[pi0], mix_weights]))
    resp, log_norm = _posterior(log_prior, _log_densities(points, means, kappas))
    return resp, float(weights @ log_norm / weights.sum())


def _reseed_collapsed(points, weights, resp, state, cfg):
    """
    Move empty or collapsed components onto the points the background
    explains best. A component has collapsed when its mixing weight falls
    below `collapse_ratio / G`, which is how two components sharing one
    cluster while the background swallows another shows up.
    """
    pi0, mix_weights, means, kappas = state
    n, G = points.shape[0], mix_weights.shape[0]
    mass = (weights[:, None] * resp[:, 1:]).sum(axis=0)
    collapsed = np.flatnonzero((mass < cfg.empty_mass * n) | (mix_weights < cfg.collapse_ratio / G))
    if collapsed.size == 0:
        return None
    mix_weights = mix_weights.copy()
    means = means.copy()
    kappas = kappas.copy()
    targets = np.argsort(-resp[:, 0], kind="stable")
    for slot, g in enumerate(collapsed):
        if mix_weights[g] < 1.0 / n:
            donor = int(np.argmax(mix_weights))
            share = min(1.0 / n, mix_weights[donor] / 2.0)
            mix_weights[donor] -= share
            mix_weights[g] += share
        means[g] = points[targets[slot % n]]
        kappas[g] = cfg.kappa_init
    return pi0, mix_weights, means, kappas


def _run_em(points, weights, state, cfg):
    resp, log_lik = _evaluate(points, weights, state)
    trace = [log_lik]
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        candidate = _m_step(points, weights, resp, state, cfg)
        new_resp, new_log_lik = _evaluate(points, weights, candidate)
        reseeded = _reseed_collapsed(points, weights, new_resp, candidate, cfg)
        if reseeded is not None:
            # one M-step from the reseeded state; kept only if it fits better
            reseed_resp, _ = _evaluate(points, weights, reseeded)
            refit = _m_step(points, weights, reseed_resp, reseeded, cfg)
            refit_resp, refit_log_lik = _evaluate(points, weights, refit)
            if refit_log_lik > new_log_lik:
                candidate, new_resp, new_log_lik = refit, refit_resp, refit_log_lik
        state, resp = candidate, new_resp
        trace.append(new_log_lik)
        if new_log_lik - log_lik < cfg.tol * max(abs(log_lik), 1e-12):
            converged = True
            break
        log_lik = new_log_lik
    return state, tuple(trace), iterations, converged


def em_fit(points, point_weights, num_components, cfg=EmConfig(), rng_seed=0, init=None):
    """
    Fit a uniform-background vMF mixture by (generalized) EM.

    `init` warm-starts from a previous mixture of the same shape. On top of
    it, `cfg.n_init` fits start from spherical k-means++ seedings and the
    fit with the best final log-likelihood wins; a restart replaces an
    earlier fit only when it beats it by more than `cfg.restart_margin`.
    The weighted mean log-likelihood of the chosen fit is recorded before
    the first and after every iteration and never decreases.
    """
    points = as_unit_vectors(points)
    n, d = points.shape
    G = int(num_components)
    if G < 1:
        raise ValidationError(f"number of components must be >= 1 (got {G})")
    if n < G:
        raise ValidationError(f"need at least {G} points to fit {G} components (got {n})")
    weights = np.asarray(point_weights, dtype=float).reshape(-1)
    if weights.shape[0] != n:
        raise ValidationError(f"{weights.shape[0]} weights for {n} points")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0) or weights.sum() <= 0:
        raise ValidationError("point weights must be finite, non-negative and not all zero")

    rng = np.random.default_rng(rng_seed)
    starts = []
    if init is not None and init.dim == d and init.num_components == G:
        pi0, mix_weights = _floor_background(init.background_weight, init.weights.copy(), cfg.pi0_floor)
        starts.append((pi0, mix_weights, init.means, init.kappas))
    elif init is not None:
        logger.debug(f"Ignoring warm start of shape (G={init.num_components}, d={init.dim})")
    pi0 = max(cfg.pi0_init, cfg.pi0_floor)
    for _ in range(cfg.n_init):
        starts.append((pi0, np.full(G, (1.0 - pi0) / G), _kmeanspp_seeds(points, weights, G, rng), np.full(G, cfg.kappa_init)))

    best = None
    for attempt, start in enumerate(starts):
        run = _run_em(points, weights, start, cfg)
        if best is None or run[1][-1] > best[1][-1] + cfg.restart_margin:
            if best is not None:
                logger.debug(f"EM start {attempt} improved the log-likelihood to {run[1][-1]:.6f}")
            best = run
    state, trace, iterations, converged = best

    pi0, mix_weights, means, kappas = state
    mixture = VmfMixture.from_arrays(pi0, mix_weights, normalize_rows(means), kappas)
    saturated = bool(np.any(kappas >= cfg.kappa_max))
    return EmResult(mixture, tuple(trace), iterations, converged, saturated)
