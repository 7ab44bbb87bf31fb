import math
from itertools import permutations

import numpy as np
import pytest

from protosurv.histology import (
    GmmParams,
    PatchFeatures,
    VAR_FLOOR,
    em_step,
    fit_gmm,
    init_gmm,
    log_density,
    project_histo,
    responsibilities,
    slide_representation,
)
from protosurv.rng import substream


def _cluster_slide(seed, n=200, d=8, k=3, scale=2.5, noise=0.5):
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=scale, size=(k, d))
    labels = rng.integers(0, k, size=n)
    x = centers[labels] + rng.normal(scale=noise, size=(n, d))
    return PatchFeatures(f"slide{seed}", x), labels, centers


def test_init_gmm_defaults_at_paper_scale():
    params = init_gmm(16, 512, seed=0)
    np.testing.assert_allclose(params.weights, np.full(16, 1 / 16))
    assert np.all(params.variances == 1.0)
    assert abs(params.means.std() - 0.1) < 0.005


def test_init_gmm_deterministic():
    a = init_gmm(4, 8, seed=123)
    b = init_gmm(4, 8, seed=123)
    np.testing.assert_array_equal(a.means, b.means)


def test_init_gmm_single_component():
    np.testing.assert_array_equal(init_gmm(1, 3, seed=0).weights, [1.0])


def test_log_density_standard_normal():
    params = GmmParams(np.array([1.0]), np.zeros((1, 1)), np.ones((1, 1)))
    assert abs(log_density(np.array([0.0]), params) - math.log(1 / math.sqrt(2 * math.pi))) < 1e-12


def test_log_density_duplicate_components_collapse():
    single = GmmParams(np.array([1.0]), np.array([[0.5, -0.2]]), np.array([[1.5, 0.7]]))
    double = GmmParams(
        np.array([0.5, 0.5]),
        np.array([[0.5, -0.2], [0.5, -0.2]]),
        np.array([[1.5, 0.7], [1.5, 0.7]]),
    )
    x = np.array([0.3, 1.1])
    assert abs(log_density(x, single) - log_density(x, double)) < 1e-12


def test_log_density_matches_direct_sum_oracle():
    rng = np.random.default_rng(5)
    params = GmmParams(
        np.array([0.3, 0.7]),
        rng.normal(size=(2, 3)),
        rng.uniform(0.5, 2.0, size=(2, 3)),
    )
    x = rng.normal(size=3)
    total = 0.0
    for c in range(2):
        dens = 1.0
        for j in range(3):
            var = params.variances[c, j]
            dens *= math.exp(-((x[j] - params.means[c, j]) ** 2) / (2 * var)) / math.sqrt(2 * math.pi * var)
        total += params.weights[c] * dens
    assert abs(log_density(x, params) - math.log(total)) < 1e-12


def test_em_step_single_component_closed_form():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(40, 3))
    params, _ = em_step(PatchFeatures("s", x), init_gmm(1, 3, seed=0))
    np.testing.assert_allclose(params.means[0], x.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(params.variances[0], np.maximum(x.var(axis=0), VAR_FLOOR), atol=1e-12)
    assert abs(params.weights[0] - 1.0) < 1e-12


def test_em_step_reaches_cluster_centroids_from_nearby_init():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(60, 2)) * 0.1 + np.array([5.0, 5.0])
    b = rng.normal(size=(60, 2)) * 0.1 + np.array([-5.0, -5.0])
    x = np.vstack([a, b])
    params = GmmParams(np.array([0.5, 0.5]), np.array([[4.0, 4.0], [-4.0, -4.0]]), np.ones((2, 2)))
    for _ in range(50):
        params, _ = em_step(PatchFeatures("s", x), params)
    centroids = np.array([a.mean(axis=0), b.mean(axis=0)])
    assert np.max(np.abs(np.sort(params.means, axis=0) - np.sort(centroids, axis=0))) < 1e-6


def test_em_step_monotone_log_likelihood():
    patches, _, _ = _cluster_slide(3)
    params = init_gmm(3, patches.patches.shape[1], seed=3)
    previous = None
    for _ in range(30):
        params, avg_ll = em_step(PatchFeatures("s", patches.patches), params)
        if previous is not None:
            assert avg_ll - previous >= -1e-8
        previous = avg_ll


def test_em_step_invariants():
    patches, _, _ = _cluster_slide(4)
    params = init_gmm(4, patches.patches.shape[1], seed=4)
    params, _ = em_step(patches, params)
    assert abs(params.weights.sum() - 1.0) < 1e-9
    assert np.all(params.variances >= VAR_FLOOR)
    resp = responsibilities(patches, params)
    np.testing.assert_allclose(resp.sum(axis=1), np.ones(len(resp)), atol=1e-9)


def test_fit_gmm_single_iteration():
    patches, _, _ = _cluster_slide(8)
    params_one, trace = fit_gmm(patches, 2, seed=0, max_iters=1)
    assert trace.iterations == 1 and not trace.converged
    step_params, _ = em_step(patches, init_gmm(2, patches.patches.shape[1], substream(0, "gmm")),
                             substream(0, "gmm"))
    np.testing.assert_allclose(params_one.means, step_params.means, atol=1e-12)


def test_fit_gmm_recovers_three_clusters():
    patches, labels, _ = _cluster_slide(0, d=16)
    params, trace = fit_gmm(patches, 3, substream(0, "gmm", 0))
    assert trace.converged
    hard = responsibilities(patches, params).argmax(axis=1)
    best = max(
        sum((hard[labels == t] == p).sum() for t, p in enumerate(perm))
        for perm in permutations(range(3))
    )
    assert best == len(labels)


def test_fit_gmm_deterministic():
    patches, _, _ = _cluster_slide(9)
    a_params, a_trace = fit_gmm(patches, 3, seed=11)
    b_params, b_trace = fit_gmm(patches, 3, seed=11)
    np.testing.assert_array_equal(a_params.means, b_params.means)
    assert a_trace.log_likelihoods == b_trace.log_likelihoods


def test_fit_gmm_patch_order_invariance():
    patches, _, _ = _cluster_slide(10)
    shuffled = PatchFeatures("s", patches.patches[::-1].copy())
    rep_a = slide_representation(fit_gmm(patches, 3, seed=2)[0])
    rep_b = slide_representation(fit_gmm(shuffled, 3, seed=2)[0])
    assert np.max(np.abs(rep_a - rep_b)) < 1e-9


def test_fit_gmm_single_component_one_step_exact():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(50, 4))
    params, _ = fit_gmm(PatchFeatures("s", x), 1, seed=0, max_iters=1)
    np.testing.assert_allclose(params.means[0], x.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(params.variances[0], x.var(axis=0), atol=1e-12)


def test_fit_gmm_warns_on_few_patches():
    rng = np.random.default_rng(13)
    with pytest.warns(UserWarning):
        fit_gmm(PatchFeatures("s", rng.normal(size=(3, 2))), 5, seed=0, max_iters=2)


def test_fit_gmm_identical_patches_resolved():
    x = np.ones((30, 4))
    params, trace = fit_gmm(PatchFeatures("s", x), 2, seed=0)
    assert np.all(np.isfinite(params.means))
    assert np.all(params.variances >= VAR_FLOOR)


def test_slide_representation_shape_and_order():
    params = GmmParams(
        np.array([0.3, 0.7]),
        np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]),
        np.array([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]),
    )
    rep = slide_representation(params)
    assert rep.shape == (2, 7)
    np.testing.assert_allclose(rep[0], [0.7, 4.0, 5.0, 6.0, 0.4, 0.5, 0.6])
    np.testing.assert_allclose(rep[1], [0.3, 1.0, 2.0, 3.0, 0.1, 0.2, 0.3])


def test_project_histo_bias_only_and_oracle():
    rep = np.arange(10.0).reshape(2, 5)
    bias = np.array([1.0, -2.0])
    out = project_histo(rep, np.zeros((5, 2)), bias)
    np.testing.assert_array_equal(out, np.tile(bias, (2, 1)))
    rng = np.random.default_rng(14)
    w, b = rng.normal(size=(5, 3)), rng.normal(size=3)
    expect = [[sum(rep[r, i] * w[i, j] for i in range(5)) + b[j] for j in range(3)] for r in range(2)]
    np.testing.assert_allclose(project_histo(rep, w, b), expect, atol=1e-12)
