import math

import numpy as np
import pytest

from probcaps import autodiff as ad
from probcaps.data import benchmark_model
from probcaps.inference import (
    Adam,
    AdamConfig,
    ElboError,
    FitDivergedError,
    VariationalState,
    draw_noise,
    elbo_and_grads,
    elbo_estimate,
    empty_state,
    fit_free_form,
    init_state,
    match_templates,
    per_image_noise,
    reconstruct,
    reconstruction_error,
)
from probcaps.model import LayerParams, ModelParams, image_log_likelihood, render_latents, sample_latents
from probcaps.poses import make_offsets
from probcaps.verify import elbo_bound_oracle, random_model


@pytest.fixture(scope="module")
def bench():
    return benchmark_model()


def _single_object(params, rng, n):
    """Scenes with one template on, placed at random poses."""
    C = params.n_templates
    t = np.zeros((n, C))
    t[np.arange(n), np.arange(n) % C] = 1.0
    poses = make_offsets(rng.uniform(-0.5, 0.5, (n, C)), rng.uniform(-0.5, 0.5, (n, C)), rng.uniform(-0.3, 0.3, (n, C)))
    return t, poses


def test_state_document_round_trip():
    rng = np.random.default_rng(0)
    q = VariationalState([rng.standard_normal((2, 3)), rng.standard_normal((2, 4))],
                         [rng.standard_normal((2, 3, 2, 3)), rng.standard_normal((2, 4, 2, 3))], mode="full")
    again = VariationalState.from_document(q.to_document())
    for k, v in q.arrays().items():
        np.testing.assert_array_equal(again.arrays()[k], v)
    assert again.mode == "full"


def test_full_mode_requires_positive_structure():
    with pytest.raises(ValueError):
        VariationalState([np.zeros((1, 1))], [np.zeros((1, 1, 2, 3))], mode="bogus")


def test_degenerate_model_elbo_is_blank_likelihood():
    params = ModelParams(
        layers=[LayerParams(np.full((1, 0), 0.1), np.zeros((1, 0)), np.zeros((1, 0, 2, 3)), np.full((1, 0), 10.0))],
        template_color=np.zeros((0, 3, 3)),
        template_alpha=np.zeros((0, 3, 3)),
        canvas_hw=(4, 4),
        frame_scale=1.5,
    )
    x = np.random.default_rng(1).random((1, 4, 4))
    q = VariationalState([np.zeros((1, 0)), np.zeros((1, 0))], [np.zeros((1, 0, 2, 3)), np.zeros((1, 0, 2, 3))])
    est = elbo_estimate(params, q, x, n_samples=3, rng=np.random.default_rng(2))
    assert est.value == pytest.approx(image_log_likelihood(x[0], np.zeros((4, 4)), params.sigma).item(), abs=1e-12)


def test_elbo_terms_sum_to_value():
    params = random_model(np.random.default_rng(3))
    lat = sample_latents(params, np.random.default_rng(4), 2)
    x = render_latents(params, lat)
    q = VariationalState.from_latents(lat, presence_logit=2.0)
    est = elbo_estimate(params, q, x, n_samples=4, rng=np.random.default_rng(5))
    assert sum(v.sum() for v in est.terms.values()) == pytest.approx(est.value, rel=1e-12)
    assert est.num_samples == 4


def test_elbo_bound_and_equality_on_toy():
    below, equal = elbo_bound_oracle(n_q=10, n_samples=1000, seed=1)
    assert below.passed, below
    assert equal.passed, equal


def test_discrete_presence_estimator_runs():
    params = random_model(np.random.default_rng(6))
    lat = sample_latents(params, np.random.default_rng(7), 1)
    q = VariationalState.from_latents(lat)
    est = elbo_estimate(params, q, render_latents(params, lat), n_samples=8, rng=np.random.default_rng(8), presence="discrete")
    assert np.isfinite(est.value)


def test_non_finite_elbo_names_term():
    params = random_model(np.random.default_rng(9))
    lat = sample_latents(params, np.random.default_rng(10), 1)
    x = render_latents(params, lat)
    x[0, 0, 0] = np.nan
    with pytest.raises(ElboError, match="likelihood"):
        elbo_estimate(params, VariationalState.from_latents(lat), x, rng=np.random.default_rng(0))


def test_gradients_match_finite_differences():
    params = random_model(np.random.default_rng(11))
    lat = sample_latents(params, np.random.default_rng(12), 1)
    x = render_latents(params, lat)
    q = VariationalState.from_latents(lat, presence_logit=1.0, mode="full")
    noise = draw_noise(q, 2, np.random.default_rng(13))
    _, grads = elbo_and_grads(params, q, x, noise)
    for key in ("pose1", "logits1", "log_scale0"):
        arrays = q.arrays()

        def f(v, key=key):
            return elbo_estimate(params, q, x, noise=noise, leaves={key: v}).objective

        err = ad.finite_difference_check(f, arrays[key], eps=1e-6)
        assert err < 1e-4, (key, err)
        assert grads[key].shape == arrays[key].shape


def test_per_image_noise_is_batch_independent():
    params = random_model(np.random.default_rng(14))
    q = empty_state(params, 3)
    full = per_image_noise(q, 2, [[0, i] for i in range(3)])
    part = per_image_noise(q.select(slice(1, 2)), 2, [[0, 1]])
    np.testing.assert_array_equal(full.uniform[1][:, 1], part.uniform[1][:, 0])


def test_adam_ascends_quadratic():
    x = {"a": np.array([3.0, -2.0])}
    opt = Adam(x, AdamConfig(lr=0.1))
    for _ in range(300):
        x = opt.step(x, {"a": -2.0 * x["a"]})
    np.testing.assert_allclose(x["a"], 0.0, atol=1e-2)


def test_stationary_start_is_non_decreasing(bench):
    # single template, pose-only fit started at the planted pose
    rng = np.random.default_rng(15)
    t, poses = _single_object(bench, rng, 1)
    lat = sample_latents(bench, rng, 1)
    lat.presences[1], lat.poses[1] = t, poses
    x = render_latents(bench, lat)
    q0 = VariationalState.from_latents(lat, presence_logit=6.0)
    q, trace = fit_free_form(bench, x, q0, 20, 1e-3, frozen_noise=True, rng=np.random.default_rng(0), trainable=("pose1",))
    e = trace.as_array()[:, 0]
    assert e[-1] >= e[0] - 1e-6
    assert np.all(np.diff(e) > -1e-3 * abs(e[0]))


def test_fit_improves_reconstruction(bench):
    rng = np.random.default_rng(16)
    lat = sample_latents(bench, rng, 4, top_presence=np.eye(4))
    clean = render_latents(bench, lat)
    x = np.clip(clean + 0.05 * rng.standard_normal(clean.shape), 0, 1)
    q0 = init_state(bench, x, np.random.default_rng(1))
    q, trace = fit_free_form(bench, x, q0, 60, 3e-2, noise_seeds=[[0, i] for i in range(4)])
    assert reconstruction_error(bench, q, clean).mean() < reconstruction_error(bench, q0, clean).mean()
    assert np.all(trace.as_array()[-5:].mean(axis=0) > trace.as_array()[:5].mean(axis=0))


def test_fit_is_independent_of_batching(bench):
    rng = np.random.default_rng(17)
    lat = sample_latents(bench, rng, 3, top_presence=np.eye(4)[:3])
    x = render_latents(bench, lat)
    q0 = init_state(bench, x, np.random.default_rng(2))
    seeds = [[5, i] for i in range(3)]
    q_all, _ = fit_free_form(bench, x, q0, 5, 1e-2, noise_seeds=seeds)
    q_one, _ = fit_free_form(bench, x[1:2], q0.select(slice(1, 2)), 5, 1e-2, noise_seeds=seeds[1:2])
    np.testing.assert_array_equal(q_all.pose_means[1][1], q_one.pose_means[1][0])


def test_fit_rejects_zero_steps(bench):
    with pytest.raises(ValueError):
        fit_free_form(bench, np.zeros((1, 24, 24)), empty_state(bench, 1), 0, rng=np.random.default_rng(0))


def test_divergence_raises_with_trace(bench):
    q = empty_state(bench, 1)
    with pytest.raises(FitDivergedError) as info:
        fit_free_form(bench, np.full((1, 24, 24), np.inf), q, 3, rng=np.random.default_rng(0))
    assert info.value.step == 0


def test_reconstruct_planted_latents(bench):
    rng = np.random.default_rng(18)
    lat = sample_latents(bench, rng, 2, top_presence=np.eye(4)[:2])
    q = VariationalState.from_latents(lat, presence_logit=40.0)
    np.testing.assert_allclose(reconstruct(bench, q).flatten().data, render_latents(bench, lat), atol=1e-12)


def test_reconstruct_all_off_is_blank(bench):
    q = empty_state(bench, 1)
    q.logits[-1][:] = -1e3
    assert reconstruct(bench, q).flatten().data.max() == 0.0


def test_template_matching_finds_planted_pose(bench):
    rng = np.random.default_rng(19)
    t, poses = _single_object(bench, rng, 6)
    lat = sample_latents(bench, rng, 6)
    lat.presences[1], lat.poses[1] = t, poses
    x = render_latents(bench, lat)
    found, score = match_templates(bench, x, angles=np.deg2rad(np.arange(-30, 31, 5)))
    px = bench.frame_scale
    for i in range(6):
        j = i % bench.n_templates
        assert np.abs(found[i, j, :, 2] - poses[i, j, :, 2]).max() * px < 1.0
        assert score[i, j] > 0.5
