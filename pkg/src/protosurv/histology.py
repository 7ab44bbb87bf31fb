"""Histological prototypes: a per-slide diagonal Gaussian mixture over patch
embeddings, fitted with EM and flattened into one matrix row per component.

Fitting is slide-level preprocessing; survival-loss gradients never flow
into mixture parameters. Everything is deterministic given (seed, data).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DegenerateInput
from .rng import substream

VAR_FLOOR = 1e-6
# a component owning less than this fraction of total responsibility is re-seeded
RESCUE_FRACTION = 1e-8
MAX_RESCUE_ROUNDS = 3


@dataclass
class PatchFeatures:
    slide_id: str
    patches: np.ndarray  # (n_patches, d_h)


@dataclass
class GmmParams:
    weights: np.ndarray  # (k,), positive, sums to 1
    means: np.ndarray  # (k, d_h)
    variances: np.ndarray  # (k, d_h) diagonal covariances, >= VAR_FLOOR


@dataclass
class EmTrace:
    log_likelihoods: list[float]  # per-iteration average log-likelihood (pre-update)
    iterations: int
    converged: bool


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return substream(int(seed), "gmm")


def init_gmm(n_components: int, dim: int, seed) -> GmmParams:
    """Means drawn from N(0, 0.1^2), unit variances, uniform weights."""
    if n_components < 1 or dim < 1:
        raise ValueError("n_components and dim must be >= 1")
    rng = _as_rng(seed)
    return GmmParams(
        weights=np.full(n_components, 1.0 / n_components),
        means=rng.normal(scale=0.1, size=(n_components, dim)),
        variances=np.ones((n_components, dim)),
    )


def _component_log_densities(x: np.ndarray, params: GmmParams) -> np.ndarray:
    """(n, k) matrix of log N(x_n; mu_k, diag var_k)."""
    diff = x[:, None, :] - params.means[None, :, :]
    quad = (diff * diff / params.variances[None, :, :]).sum(axis=-1)
    log_det = np.log(params.variances).sum(axis=-1)
    d = x.shape[1]
    return -0.5 * (d * math.log(2.0 * math.pi) + log_det[None, :] + quad)


def log_density(x: np.ndarray, params: GmmParams) -> float:
    """log-likelihood of one embedding under the mixture (log-sum-exp)."""
    x = np.asarray(x, dtype=float)[None, :]
    log_joint = _component_log_densities(x, params) + np.log(params.weights)[None, :]
    m = log_joint.max()
    return float(m + np.log(np.exp(log_joint - m).sum()))


def responsibilities(patches: PatchFeatures, params: GmmParams) -> np.ndarray:
    """(n, k) posterior component probabilities per patch."""
    log_joint = _component_log_densities(patches.patches, params) + np.log(params.weights)[None, :]
    log_joint -= log_joint.max(axis=1, keepdims=True)
    resp = np.exp(log_joint)
    return resp / resp.sum(axis=1, keepdims=True)


def _em_step(patches: PatchFeatures, params: GmmParams, rng) -> tuple[GmmParams, float, int]:
    x = patches.patches
    n, _ = x.shape
    k = params.weights.shape[0]

    log_joint = _component_log_densities(x, params) + np.log(params.weights)[None, :]
    row_max = log_joint.max(axis=1, keepdims=True)
    shifted = np.exp(log_joint - row_max)
    row_sum = shifted.sum(axis=1, keepdims=True)
    avg_ll = float(np.mean(row_max.squeeze(1) + np.log(row_sum.squeeze(1))))
    resp = shifted / row_sum

    nk = resp.sum(axis=0)
    nk_safe = np.maximum(nk, 1e-300)
    weights = nk / n
    means = (resp.T @ x) / nk_safe[:, None]
    variances = (resp.T @ (x * x)) / nk_safe[:, None] - means * means

    starved = nk < RESCUE_FRACTION * n
    n_rescued = int(starved.sum())
    if n_rescued:
        for c in np.flatnonzero(starved):
            means[c] = x[rng.integers(n)]
            variances[c] = 1.0
            weights[c] = 1.0 / k
        weights = weights / weights.sum()
    variances = np.maximum(variances, VAR_FLOOR)
    return GmmParams(weights, means, variances), avg_ll, n_rescued


def em_step(patches: PatchFeatures, params: GmmParams, rng=None) -> tuple[GmmParams, float]:
    """One EM update. Returns the new parameters together with the average
    log-likelihood of the *incoming* parameters."""
    if rng is None:
        rng = np.random.default_rng(0)
    new_params, avg_ll, _ = _em_step(patches, params, rng)
    return new_params, avg_ll


def fit_gmm(
    patches: PatchFeatures,
    n_components: int,
    seed,
    max_iters: int = 100,
    rel_tol: float = 1e-5,
) -> tuple[GmmParams, EmTrace]:
    """Iterate EM until the relative change in average log-likelihood falls
    below ``rel_tol`` or ``max_iters`` is reached."""
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    n, dim = patches.patches.shape
    if n < n_components:
        warnings.warn(
            f"slide {patches.slide_id}: {n} patches for {n_components} components",
            stacklevel=2,
        )
    rng = _as_rng(seed)
    params = init_gmm(n_components, dim, rng)
    lls: list[float] = []
    converged = False
    rescue_rounds = 0
    previous = None
    for _ in range(max_iters):
        params, avg_ll, n_rescued = _em_step(patches, params, rng)
        if n_rescued:
            rescue_rounds += 1
            if rescue_rounds > MAX_RESCUE_ROUNDS:
                raise DegenerateInput(
                    f"slide {patches.slide_id}: re-seeding failed {MAX_RESCUE_ROUNDS} times"
                )
        lls.append(avg_ll)
        if previous is not None and abs(avg_ll - previous) / max(abs(avg_ll), 1.0) < rel_tol:
            converged = True
            break
        previous = avg_ll
    return params, EmTrace(lls, len(lls), converged)


def slide_representation(params: GmmParams) -> np.ndarray:
    """Stack [weight, mean, variance-diagonal] per component into an
    (k, 1 + 2 d_h) matrix, rows sorted by descending weight (ties keep
    component order)."""
    k = params.weights.shape[0]
    order = np.lexsort((np.arange(k), -params.weights))
    return np.concatenate(
        [params.weights[order, None], params.means[order], params.variances[order]],
        axis=1,
    )


def project_histo(representation: np.ndarray, weight, bias):
    """Row-wise affine map of the slide representation into the shared width."""
    return nm.affine(representation, weight, bias)
