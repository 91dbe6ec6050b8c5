"""Penalty kernels: hand oracles, backend parity, analytic gradients."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfmplan._kernels import BACKEND, penalty_eval, reference_eval
from cfmplan.scenario import (DT, KAPPA_MAX, KAPPA_SHARPNESS, R_EGO,
                              SHARPNESS, V_MAX)

from conftest import numeric_grad

NO_OBS = np.zeros((0, 5))
NO_SEG = np.zeros((0, 2))
NO_HW = np.zeros((0,))


def call(wp, obs=NO_OBS, seg_a=NO_SEG, seg_b=NO_SEG, seg_hw=NO_HW,
         want_grad=False, fn=penalty_eval):
    return fn(np.asarray(wp, dtype=np.float64), obs, seg_a, seg_b, seg_hw,
              DT, R_EGO, V_MAX, KAPPA_MAX, SHARPNESS, KAPPA_SHARPNESS,
              want_grad)


def softplus(z, sharp):
    return np.logaddexp(0.0, sharp * z) / sharp


def straight_wp(speed=8.0, t=8):
    xs = speed * DT * np.arange(1, t + 1)
    return np.column_stack([xs, np.zeros(t)])


def random_geometry(rng, t=5):
    wp = rng.normal(0.0, 6.0, (t, 2))
    n_obs = int(rng.integers(0, 3))
    obs = np.column_stack([rng.normal(0, 8, (n_obs, 2)),
                           rng.normal(0, 2, (n_obs, 2)),
                           rng.uniform(0.5, 2.0, n_obs)]) \
        if n_obs else NO_OBS
    n_seg = int(rng.integers(0, 4))
    if n_seg:
        seg_a = rng.normal(0, 10, (n_seg, 2))
        seg_b = seg_a + rng.normal(0, 8, (n_seg, 2))
        seg_hw = rng.uniform(2.0, 4.0, n_seg)
    else:
        seg_a, seg_b, seg_hw = NO_SEG, NO_SEG, NO_HW
    return wp, obs, seg_a, seg_b, seg_hw


class TestCollisionTerm:
    def test_far_waypoint_near_zero(self):
        obs = np.array([[100.0, 100.0, 0.0, 0.0, 1.0]])
        terms, _ = call(straight_wp(speed=2.0, t=2), obs)
        assert terms[0] < 1e-9

    def test_waypoint_on_center_hand_value(self):
        # one static obstacle, one waypoint sitting on its center:
        # z = (r_o + r_ego) - 0, softplus at sharpness 4
        obs = np.array([[1.0, 0.0, 0.0, 0.0, 1.5]])
        wp = np.array([[1.0, 0.0]])
        terms, _ = call(wp, obs)
        want = softplus(1.5 + R_EGO, SHARPNESS)
        assert terms[0] == pytest.approx(want, rel=1e-9)

    def test_moving_obstacle_uses_time_matched_position(self):
        # obstacle starts far left but arrives at the waypoint at t=dt
        start = -3.0
        obs = np.array([[start, 0.0, -start / DT, 0.0, 1.0]])
        wp = np.zeros((1, 2))
        terms, _ = call(wp, obs)
        want = softplus(1.0 + R_EGO, SHARPNESS)
        assert terms[0] == pytest.approx(want, rel=1e-9)

    def test_obstacles_sum(self):
        obs = np.array([[0.0, 0.0, 0.0, 0.0, 1.0],
                        [0.0, 0.0, 0.0, 0.0, 1.0]])
        wp = np.zeros((1, 2))
        terms, _ = call(wp, obs)
        one, _ = call(wp, obs[:1])
        assert terms[0] == pytest.approx(2 * one[0], rel=1e-12)


class TestRoadTerm:
    def test_on_centerline_zero(self):
        seg_a = np.array([[0.0, 0.0]])
        seg_b = np.array([[40.0, 0.0]])
        hw = np.array([3.0])
        terms, _ = call(straight_wp(speed=8.0), seg_a=seg_a, seg_b=seg_b,
                        seg_hw=hw)
        assert terms[1] < 1e-4

    def test_offset_hand_value(self):
        seg_a = np.array([[0.0, 0.0]])
        seg_b = np.array([[10.0, 0.0]])
        hw = np.array([2.0])
        wp = np.array([[5.0, 7.0]])  # 5m beyond the corridor edge
        terms, _ = call(wp, seg_a=seg_a, seg_b=seg_b, seg_hw=hw)
        assert terms[1] == pytest.approx(softplus(5.0, SHARPNESS), rel=1e-6)

    def test_nearest_corridor_wins(self):
        # two corridors; the wide one close by should absorb the point
        seg_a = np.array([[0.0, 0.0], [0.0, 50.0]])
        seg_b = np.array([[10.0, 0.0], [10.0, 50.0]])
        hw = np.array([3.0, 3.0])
        wp = np.array([[5.0, 1.0]])
        terms, _ = call(wp, seg_a=seg_a, seg_b=seg_b, seg_hw=hw)
        assert terms[1] < 1e-4

    def test_endpoint_clamp(self):
        # beyond the segment end the distance is to the endpoint
        seg_a = np.array([[0.0, 0.0]])
        seg_b = np.array([[10.0, 0.0]])
        hw = np.array([1.0])
        wp = np.array([[14.0, 0.0]])
        terms, _ = call(wp, seg_a=seg_a, seg_b=seg_b, seg_hw=hw)
        assert terms[1] == pytest.approx(softplus(3.0, SHARPNESS), rel=1e-6)


class TestKinematicTerm:
    def test_slow_straight_near_zero(self):
        terms, _ = call(straight_wp(speed=8.0))
        assert terms[2] < 1e-4

    def test_overspeed_hand_value(self):
        # single waypoint: one segment from origin, speed 30 > v_max 20
        wp = np.array([[30.0 * DT, 0.0]])
        terms, _ = call(wp)
        assert terms[2] == pytest.approx(softplus(10.0, SHARPNESS), rel=1e-6)

    def test_sharp_turn_penalized(self):
        # hairpin: out and straight back, curvature blows past kappa_max
        wp = np.array([[2.0, 0.0], [4.0, 0.0], [2.0, 0.1]])
        terms, _ = call(wp)
        assert terms[2] > 0.01

    def test_zero_trajectory_finite(self):
        terms, grad = call(np.zeros((4, 2)), want_grad=True)
        assert np.all(np.isfinite(terms))
        assert np.all(np.isfinite(grad))


class TestGradients:
    @pytest.mark.parametrize("seed", range(6))
    def test_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        wp, obs, seg_a, seg_b, seg_hw = random_geometry(rng)
        _, grad = call(wp, obs, seg_a, seg_b, seg_hw, want_grad=True)
        for k in range(3):
            def fk(w, k=k):
                terms, _ = call(w, obs, seg_a, seg_b, seg_hw)
                return terms[k]
            want = numeric_grad(fk, wp.copy(), h=1e-6)
            np.testing.assert_allclose(grad[k], want, rtol=2e-4, atol=1e-7)

    def test_grad_none_when_not_requested(self):
        _, grad = call(straight_wp())
        assert grad is None


class TestBackendParity:
    @pytest.mark.parametrize("seed", range(10))
    def test_terms_and_grads_match(self, seed):
        rng = np.random.default_rng(100 + seed)
        wp, obs, seg_a, seg_b, seg_hw = random_geometry(rng, t=8)
        t1, g1 = call(wp, obs, seg_a, seg_b, seg_hw, want_grad=True)
        t2, g2 = call(wp, obs, seg_a, seg_b, seg_hw, want_grad=True,
                      fn=reference_eval)
        np.testing.assert_allclose(t1, t2, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-14)

    def test_backend_label(self):
        assert BACKEND in ("compiled", "python")


@given(seed=st.integers(0, 2**31), t=st.integers(1, 8))
@settings(max_examples=30, deadline=None)
def test_terms_nonnegative_and_finite(seed, t):
    rng = np.random.default_rng(seed)
    wp, obs, seg_a, seg_b, seg_hw = random_geometry(rng, t=t)
    terms, _ = call(wp, obs, seg_a, seg_b, seg_hw)
    assert terms.shape == (3,)
    assert np.all(terms >= 0.0)
    assert np.all(np.isfinite(terms))
