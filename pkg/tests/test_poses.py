import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probcaps import autodiff as ad
from probcaps.poses import (
    PoseTransform,
    SingularPoseError,
    apply_to_points,
    compose,
    compose_offsets,
    invert,
    invert_offsets,
    make_offsets,
    make_pose,
    realized,
    rotation_angle,
)

small = st.floats(-0.5, 0.5)
poses = st.builds(make_pose, small, small, st.floats(-3, 3), st.floats(0.5, 2.0), st.floats(0.5, 2.0), st.floats(-0.3, 0.3))


def test_identity_is_zero_offset():
    np.testing.assert_array_equal(PoseTransform.identity().offset, np.zeros((2, 3)))


def test_compose_matches_matrix_product():
    a, b = make_pose(1.0, 2.0, 0.3, 1.2), make_pose(-0.5, 0.1, -1.0, 0.8, 1.1, 0.2)
    np.testing.assert_allclose(realized(compose(a, b).offset), realized(a.offset) @ realized(b.offset), atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(poses)
def test_inverse_round_trip(a):
    np.testing.assert_allclose(invert(invert(a)).offset, a.offset, atol=1e-9)
    np.testing.assert_allclose(compose(a, invert(a)).offset, 0.0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(poses, poses, poses)
def test_compose_associative(a, b, c):
    np.testing.assert_allclose(compose(compose(a, b), c).offset, compose(a, compose(b, c)).offset, atol=1e-9)


def test_singular_pose_rejected():
    with pytest.raises(SingularPoseError):
        invert(PoseTransform(np.array([[-1.0, 0, 0], [0, 0, 0]])))


def test_rotation_angle_round_trip():
    np.testing.assert_allclose(rotation_angle(make_offsets(0.0, 0.0, np.array([0.1, -2.0]), 1.7)), [0.1, -2.0])


def test_apply_to_points_translation():
    x, y = apply_to_points(make_offsets(2.0, -1.0), np.array([0.0]), np.array([0.0]))
    assert (x.data[0], y.data[0]) == (2.0, -1.0)


def test_make_offsets_agrees_with_make_pose():
    np.testing.assert_allclose(make_offsets(0.3, -0.2, 0.5, 1.1), make_pose(0.3, -0.2, 0.5, 1.1, 1.1).offset, atol=1e-15)


@pytest.mark.parametrize("which", [0, 1])
def test_compose_gradients(which):
    rng = np.random.default_rng(which)
    a, b = 0.2 * rng.standard_normal((2, 2, 3))
    if which == 0:
        f = lambda x: ad.sum_(compose_offsets(x, b) ** 2)
        x = a
    else:
        f = lambda x: ad.sum_(compose_offsets(a, x) ** 2)
        x = b
    assert ad.finite_difference_check(f, x) < 1e-6


def test_invert_gradient():
    a = 0.2 * np.random.default_rng(3).standard_normal((2, 3))
    assert ad.finite_difference_check(lambda x: ad.sum_(invert_offsets(x) ** 2), a) < 1e-6


def test_rotation_by_half_turn():
    p = make_pose(angle=math.pi)
    x, y = apply_to_points(p.offset, np.array([1.0]), np.array([0.0]))
    assert x.data[0] == pytest.approx(-1.0) and y.data[0] == pytest.approx(0.0, abs=1e-15)
