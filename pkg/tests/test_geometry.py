import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation as ScipyRotation

from rvcsim.geometry import (
    DegenerateGeometryError,
    InvalidRotationError,
    RigidTransform,
    align_axis,
    rotation_error,
    so3_exp,
    so3_log,
)

DEG_01 = math.radians(0.1)


def random_rotation(rng):
    w = rng.normal(size=3)
    w = w / np.linalg.norm(w) * rng.uniform(0.0, math.pi - 1e-3)
    return so3_exp(w)


def test_log_identity_is_zero():
    assert np.allclose(so3_log(np.eye(3)), 0.0, atol=1e-15)


def test_log_small_z_rotation():
    r = so3_exp(np.array([0.0, 0.0, DEG_01]))
    w = so3_log(r)
    assert w == pytest.approx([0.0, 0.0, 1.7453e-3], abs=1e-7)


def test_exp_zero_is_identity():
    assert np.allclose(so3_exp(np.zeros(3)), np.eye(3))


def test_exp_quarter_turn_maps_x_to_y():
    r = so3_exp(np.array([0.0, 0.0, math.pi / 2.0]))
    assert np.allclose(r @ np.array([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)


def test_exp_log_round_trip_1000():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        r = random_rotation(rng)
        assert np.linalg.norm(so3_exp(so3_log(r)) - r) <= 1e-9


def test_log_exp_round_trip_vectors():
    rng = np.random.default_rng(12)
    for _ in range(1000):
        w = rng.normal(size=3)
        w = w / np.linalg.norm(w) * rng.uniform(0.0, math.pi - 1e-3)
        assert np.linalg.norm(so3_log(so3_exp(w)) - w) <= 1e-9


def test_log_matches_scipy():
    rng = np.random.default_rng(13)
    for _ in range(500):
        r = random_rotation(rng)
        expected = ScipyRotation.from_matrix(r).as_rotvec()
        assert np.linalg.norm(so3_log(r) - expected) <= 1e-9


def test_log_rejects_non_orthonormal():
    with pytest.raises(InvalidRotationError):
        so3_log(np.eye(3) * 1.001)
    with pytest.raises(InvalidRotationError):
        so3_log(np.diag([1.0, 1.0, -1.0]))  # det -1


def test_log_pi_angle_deterministic():
    r = so3_exp(np.array([0.0, math.pi, 0.0]))
    w1 = so3_log(r)
    w2 = so3_log(r)
    assert np.array_equal(w1, w2)
    assert np.linalg.norm(so3_exp(w1) - r) <= 1e-9


def test_rotation_error_equal_frames_is_zero():
    rng = np.random.default_rng(14)
    r = random_rotation(rng)
    assert np.allclose(rotation_error(r, r), 0.0, atol=1e-12)


def test_rotation_error_small_angle_norm():
    rd = so3_exp(np.array([0.0, 0.0, DEG_01]))
    err = rotation_error(np.eye(3), rd)
    assert np.linalg.norm(err) == pytest.approx(1.7453e-3, abs=1e-7)


def test_rotation_error_norm_symmetric():
    rng = np.random.default_rng(15)
    for _ in range(1000):
        a = random_rotation(rng)
        b = random_rotation(rng)
        na = np.linalg.norm(rotation_error(a, b))
        nb = np.linalg.norm(rotation_error(b, a))
        assert na == pytest.approx(nb, abs=1e-9)


def test_rotation_error_zero_iff_equal():
    rng = np.random.default_rng(16)
    for _ in range(200):
        a = random_rotation(rng)
        b = random_rotation(rng)
        if np.linalg.norm(a - b) > 1e-6:
            assert np.linalg.norm(rotation_error(a, b)) > 1e-9


def test_align_axis_identity():
    x = np.array([1.0, 0.0, 0.0])
    assert np.allclose(align_axis(x, x), np.eye(3))


def test_align_axis_x_to_y():
    r = align_axis(np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    expected = so3_exp(np.array([0.0, 0.0, math.pi / 2.0]))
    assert np.allclose(r, expected, atol=1e-12)


def test_align_axis_application_oracle():
    rng = np.random.default_rng(17)
    for _ in range(1000):
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        b = rng.normal(size=3)
        b /= np.linalg.norm(b)
        r = align_axis(a, b)
        assert np.linalg.norm(r @ a - b) <= 1e-9


def test_align_axis_minimal_angle_against_roll_sweep():
    # any rotation mapping a->b factors as roll-about-b after align; the
    # aligned one must have the smallest geodesic angle in that family
    rng = np.random.default_rng(18)
    for _ in range(50):
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        b = rng.normal(size=3)
        b /= np.linalg.norm(b)
        r = align_axis(a, b)
        base_angle = np.linalg.norm(so3_log(r))
        for phi in np.linspace(-math.pi + 0.05, math.pi - 0.05, 37):
            if abs(phi) < 1e-9:
                continue
            candidate = so3_exp(phi * b) @ r
            assert np.linalg.norm(so3_log(candidate)) >= base_angle - 1e-9


def test_align_axis_antiparallel_deterministic():
    a = np.array([0.0, 0.0, 1.0])
    r1 = align_axis(a, -a)
    r2 = align_axis(a, -a)
    assert np.array_equal(r1, r2)
    assert np.allclose(r1 @ a, -a, atol=1e-12)
    assert np.linalg.norm(so3_log(r1)) == pytest.approx(math.pi, abs=1e-9)


def test_align_axis_rejects_non_unit():
    with pytest.raises(DegenerateGeometryError):
        align_axis(np.array([2.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))


def test_rigid_transform_apply():
    t = RigidTransform(rotation=so3_exp(np.array([0.0, 0.0, math.pi / 2.0])),
                       translation=np.array([1.0, 2.0, 3.0]))
    assert np.allclose(t.apply([1.0, 0.0, 0.0]), [1.0, 3.0, 3.0], atol=1e-12)


def test_rigid_transform_rejects_bad_rotation():
    with pytest.raises(InvalidRotationError):
        RigidTransform(rotation=np.ones((3, 3)), translation=np.zeros(3))
