import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probcaps import autodiff as ad
from probcaps.distributions import GaussianParams, bernoulli_log_prob, normal_log_prob
from probcaps.model import (
    LatentState,
    LayerParams,
    LayerTensors,
    ModelConfigError,
    ModelParams,
    child_conditional_log_prob,
    expected_attached_children,
    log_joint,
    log_joint_terms,
    render_latents,
    responsibilities,
    sample_latents,
    sample_scene,
)
from probcaps.poses import compose_offsets
from probcaps.verify import brute_force_layer_log_prob, marginalization_oracle, random_layer, random_model


def _direct(child_t, child_A, parent_A, M, gamma, c):
    mean = compose_offsets(parent_A, M).data
    pose = normal_log_prob(child_A, GaussianParams(mean, c)).data.sum()
    return bernoulli_log_prob(child_t, gamma).item() + child_t * pose


def test_concentrated_affinity_equals_direct_conditional():
    rng = np.random.default_rng(0)
    layer = random_layer(rng, 1, 1)
    layer.rho[0] = 1e-300
    layer.rho[1] = 1.0
    A_child, A_parent = 0.2 * rng.standard_normal((1, 1, 2, 3)), 0.2 * rng.standard_normal((1, 1, 2, 3))
    got = child_conditional_log_prob(np.ones((1, 1)), A_child, np.ones((1, 1)), A_parent, layer).item()
    want = _direct(1.0, A_child[0, 0], A_parent[0, 0], layer.M[1, 0], layer.gamma[1, 0], layer.c[1, 0])
    assert got == pytest.approx(want, abs=1e-9)


def test_identical_parents_equal_single_parent():
    rng = np.random.default_rng(1)
    layer = random_layer(rng, 2, 1)
    layer.rho[0] = 1e-300
    for name in ("rho", "gamma", "M", "c"):
        getattr(layer, name)[2] = getattr(layer, name)[1]
    A_child = 0.2 * rng.standard_normal((1, 1, 2, 3))
    A_parent = np.repeat(0.2 * rng.standard_normal((1, 1, 2, 3)), 2, axis=1)
    got = child_conditional_log_prob(np.ones((1, 1)), A_child, np.ones((1, 2)), A_parent, layer).item()
    want = _direct(1.0, A_child[0, 0], A_parent[0, 0], layer.M[1, 0], layer.gamma[1, 0], layer.c[1, 0])
    assert got == pytest.approx(want, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_marginalisation_matches_enumeration(P, C, seed):
    rng = np.random.default_rng(seed)
    layer = random_layer(rng, P, C)
    child_t = rng.random((1, C))
    child_A = 0.3 * rng.standard_normal((1, C, 2, 3))
    parent_t = rng.random((1, P))
    parent_A = 0.3 * rng.standard_normal((1, P, 2, 3))
    got = child_conditional_log_prob(child_t, child_A, parent_t, parent_A, layer).data.sum()
    want = brute_force_layer_log_prob(child_t[0], child_A[0], parent_t[0], parent_A[0], layer)
    assert got == pytest.approx(want, abs=1e-9)


def test_marginalisation_oracle_suite():
    result = marginalization_oracle(n_seeds=10)
    assert result.passed, result


def test_responsibilities_normalised_and_consistent():
    rng = np.random.default_rng(2)
    layer = random_layer(rng, 3, 2)
    args = (rng.random((2, 2)), 0.3 * rng.standard_normal((2, 2, 2, 3)), rng.random((2, 3)), 0.3 * rng.standard_normal((2, 3, 2, 3)))
    r = responsibilities(*args, layer)
    np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-12)


def test_symmetric_parents_share_responsibility():
    rng = np.random.default_rng(3)
    layer = random_layer(rng, 2, 1)
    for name in ("rho", "gamma", "M", "c"):
        getattr(layer, name)[2] = getattr(layer, name)[1]
    pA = np.repeat(0.2 * rng.standard_normal((1, 1, 2, 3)), 2, axis=1)
    r = responsibilities(np.ones((1, 1)), 0.2 * rng.standard_normal((1, 1, 2, 3)), np.ones((1, 2)), pA, layer)
    assert r[0, 1, 0] == pytest.approx(r[0, 2, 0], abs=1e-14)


def test_matching_parent_takes_responsibility():
    layer = LayerParams(np.ones((3, 1)), np.full((3, 1), 0.5), np.zeros((3, 1, 2, 3)), np.full((3, 1), 0.1))
    layer.c[0] = 10.0
    pA = np.zeros((1, 2, 2, 3))
    pA[0, 1, :, 2] = 1.0  # ten c away in both translation components
    r = responsibilities(np.ones((1, 1)), np.zeros((1, 1, 2, 3)), np.ones((1, 2)), pA, layer)
    assert r[0, 1, 0] > 0.99


def test_all_parents_off_goes_to_dummy():
    rng = np.random.default_rng(4)
    layer = random_layer(rng, 2, 3)
    r = responsibilities(rng.random((1, 3)), 0.2 * rng.standard_normal((1, 3, 2, 3)), np.zeros((1, 2)), np.zeros((1, 2, 2, 3)), layer)
    np.testing.assert_allclose(r[0, 0], 1.0)


@pytest.mark.parametrize(
    "resp,expected",
    [
        (np.full((2, 2), 0.5), [1.0, 1.0]),
        (np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]]), [3.0, 0.0]),
    ],
)
def test_expected_attached_children(resp, expected):
    np.testing.assert_allclose(expected_attached_children(resp), expected)


def test_expected_attached_children_column_sums():
    r = np.random.default_rng(5).dirichlet(np.ones(4), size=6).T  # (parents, children)
    np.testing.assert_allclose(expected_attached_children(r), [sum(row) for row in r.tolist()])


def test_missing_parent_count_is_an_error():
    layer = random_layer(np.random.default_rng(6), 2, 2)
    with pytest.raises(ModelConfigError):
        child_conditional_log_prob(np.ones((1, 2)), np.zeros((1, 2, 2, 3)), np.ones((1, 3)), np.zeros((1, 3, 2, 3)), layer)


def test_empty_scene_when_prior_is_zero():
    params = random_model(np.random.default_rng(7))
    params.p = 0.0
    params.layers[0].gamma[0] = 0.0  # clutter children are never present
    latents, image = sample_scene(params, np.random.default_rng(8), batch=3)
    assert latents.presences[0].sum() == 0
    assert render_latents(params, latents).max() == 0.0


def test_deterministic_limit_child_follows_parent():
    rng = np.random.default_rng(9)
    params = random_model(rng, n_parents=1, n_children=1)
    params.p = 1.0
    layer = params.layers[0]
    layer.rho[:] = [[1e-12], [1.0]]
    layer.gamma[1] = 1.0
    layer.c[1] = 0.1
    layer.M[1] = 0.0
    latents = sample_latents(params, rng, batch=200)
    diff = latents.poses[1] - latents.poses[0]
    assert np.abs(diff).mean() < 0.1


def test_sampling_is_seed_deterministic():
    params = random_model(np.random.default_rng(10))
    a = sample_scene(params, np.random.default_rng(11), batch=2)
    b = sample_scene(params, np.random.default_rng(11), batch=2)
    np.testing.assert_array_equal(a[1], b[1])
    for x, y in zip(a[0].poses, b[0].poses):
        np.testing.assert_array_equal(x, y)


def test_sampled_latents_have_finite_log_joint():
    params = random_model(np.random.default_rng(12))
    latents, image = sample_scene(params, np.random.default_rng(13), batch=4)
    assert np.all(np.isfinite(log_joint(params, latents, image).data))


def test_pixel_mismatch_lowers_log_joint():
    params = random_model(np.random.default_rng(14))
    latents, _ = sample_scene(params, np.random.default_rng(15), batch=1)
    clean = render_latents(params, latents)
    values = [log_joint(params, latents, clean + d).item() for d in (0.0, 0.1, 0.2)]
    assert values[0] > values[1] > values[2]


def test_tiny_model_evidence_by_enumeration():
    # 1 parent, 1 child, fixed poses: summing exp(log_joint) over (t0, t1)
    # recovers the evidence computed from the explicit factorisation.
    rng = np.random.default_rng(16)
    params = random_model(rng, n_parents=1, n_children=1)
    A0, A1 = 0.1 * rng.standard_normal((1, 1, 2, 3)), 0.1 * rng.standard_normal((1, 1, 2, 3))
    x = rng.random(params.canvas_hw)
    total = []
    for t0 in (0.0, 1.0):
        for t1 in (0.0, 1.0):
            lat = LatentState([np.full((1, 1), t0), np.full((1, 1), t1)], [A0, A1])
            terms = log_joint_terms(params, lat, x[None])
            total.append(sum(v.item() for v in terms.values()))
            lik = terms["likelihood"].item()
            top = terms["layer0"].item()
            cond = brute_force_layer_log_prob(np.array([t1]), A1[0], np.array([t0]), A0[0], params.layers[0])
            assert top + cond + lik == pytest.approx(total[-1], abs=1e-9)
    assert np.isfinite(np.logaddexp.reduce(total))


def test_serialisation_round_trip_is_lossless():
    params = random_model(np.random.default_rng(17))
    again = ModelParams.from_json(params.to_json())
    for a, b in zip(params.layers, again.layers):
        for name in ("rho", "gamma", "M", "c"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    np.testing.assert_array_equal(params.template_color, again.template_color)
    assert again.p == params.p and again.sigma == params.sigma


def test_invalid_params_rejected():
    params = random_model(np.random.default_rng(18))
    params.layers[0].c[1, 0] = 0.05
    with pytest.raises(ModelConfigError):
        params.validate()


@pytest.mark.parametrize("name", ["rho", "gamma", "M", "c"])
def test_child_conditional_gradients(name):
    rng = np.random.default_rng(19)
    layer = random_layer(rng, 2, 2)
    args = (rng.uniform(0.2, 0.8, (1, 2)), 0.2 * rng.standard_normal((1, 2, 2, 3)), rng.uniform(0.2, 0.8, (1, 2)), 0.2 * rng.standard_normal((1, 2, 2, 3)))

    def f(v):
        kw = {n: ad.as_tensor(getattr(layer, n)) for n in ("rho", "gamma", "M", "c")}
        kw[name] = v
        return ad.sum_(child_conditional_log_prob(*args, LayerTensors(**kw, lambda_off=layer.lambda_off)))

    assert ad.finite_difference_check(f, getattr(layer, name), eps=1e-6) < 1e-4
