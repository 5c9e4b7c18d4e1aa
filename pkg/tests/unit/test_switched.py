"""
Unit tests for the switched-linear (event-driven) backend
Tests cover: closed-form segments, event location, continuity, budgets, dispatch
"""

from dataclasses import replace

import numpy as np
import pytest

from lca_lab.dynamics import (
    ThresholdSchedule,
    default_output_times,
    simulate,
    simulate_fixed_step,
    simulate_switched,
)
from lca_lab.errors import DivergenceSuspectedError, InvalidArgumentError


class TestSwitchedScalar:
    """Test 5.1: Single node with a known crossing time"""

    def test_5_1_1_event_at_ln2(self, scalar_instance):
        """Test 5.1.1: The activation is located to the event tolerance"""
        # Act
        trajectory = simulate_switched(scalar_instance, t_max=5.0)

        # Assert
        assert len(trajectory.switch_events) == 1
        event = trajectory.switch_events[0]
        assert event.activated == (0,)
        assert abs(event.time - np.log(2)) <= 1e-10
        assert event.continuity_gap <= 1e-11

    def test_5_1_2_samples_follow_closed_form(self, scalar_instance):
        """Test 5.1.2: Samples match u(t) = 2 (1 - exp(-t)) on both sides of the switch"""
        trajectory = simulate_switched(scalar_instance, t_max=5.0)

        times = trajectory.times()
        assert np.allclose(trajectory.internal_states()[:, 0], 2 * (1 - np.exp(-times)),
                           atol=1e-11)

    def test_5_1_3_sample_count(self, scalar_instance):
        """Test 5.1.3: One sample per requested output time"""
        trajectory = simulate_switched(scalar_instance, t_max=5.0)

        assert len(trajectory.samples) == len(default_output_times(5.0))
        assert trajectory.samples[-1].t == pytest.approx(5.0)
        assert trajectory.final_state.t == pytest.approx(5.0)

    def test_5_1_4_convergence_reported(self, scalar_instance):
        """Test 5.1.4: A long run reports convergence to the fixed point"""
        trajectory = simulate_switched(scalar_instance, t_max=40.0)

        assert trajectory.converged
        assert np.allclose(trajectory.final_state.a, [1.0], atol=1e-12)

    def test_5_1_5_never_crossing(self, scalar_instance):
        """Test 5.1.5: With lambda above |y| no event ever fires"""
        instance = scalar_instance.with_threshold(ThresholdSchedule.constant(5.0))

        trajectory = simulate_switched(instance, t_max=10.0)

        assert trajectory.switch_events == ()
        assert trajectory.final_state.active_set == ()
        assert len(trajectory.segments) == 1


class TestSwitchedOrthonormal:
    """Test 5.2: Decoupled nodes"""

    def test_5_2_1_exact_state(self, orthonormal_instance):
        """Test 5.2.1: Final state equals y (1 - exp(-t_max)) to round-off"""
        # Act
        trajectory = simulate_switched(orthonormal_instance, t_max=15.0)

        # Assert
        expected = orthonormal_instance.measurement * (1 - np.exp(-15.0))
        assert np.allclose(trajectory.final_state.u, expected, atol=1e-12)

    def test_5_2_2_simultaneous_crossing_is_one_event(self, orthonormal_instance):
        """Test 5.2.2: Crossings within the event tolerance merge into one event"""
        trajectory = simulate_switched(orthonormal_instance, t_max=15.0)

        assert len(trajectory.switch_events) == 1
        event = trajectory.switch_events[0]
        assert event.activated == (0, 1)
        assert event.time == pytest.approx(np.log(1.25), abs=1e-10)
        assert [row[2] for row in event.rows()] == ['activate', 'activate']

    def test_5_2_3_segments_and_sign_checks(self, orthonormal_instance):
        """Test 5.2.3: Segments record sign patterns; every segment window is checked"""
        trajectory = simulate_switched(orthonormal_instance, t_max=15.0)

        assert trajectory.visited_sign_patterns() == [((), ()), ((0, 1), (1, -1))]
        assert trajectory.segments[0].end_time == pytest.approx(np.log(1.25), abs=1e-10)
        assert trajectory.sign_checks >= len(trajectory.segments)

    def test_5_2_4_time_constant(self, orthonormal_instance):
        """Test 5.2.4: tau stretches the event time"""
        slow = replace(orthonormal_instance, time_constant=2.0)
        trajectory = simulate_switched(slow, t_max=15.0)

        assert trajectory.switch_events[0].time == pytest.approx(2 * np.log(1.25), abs=1e-10)

    def test_5_2_5_deactivation(self, orthonormal_instance):
        """Test 5.2.5: A node started above threshold on the wrong side deactivates"""
        # Arrange: node 2 has y = 0, so it decays from 0.3 through the threshold
        u0 = np.array([0.0, 0.0, 0.3, 0.0])

        # Act
        trajectory = simulate_switched(orthonormal_instance, u0=u0, t_max=15.0)

        # Assert
        deactivations = [e for e in trajectory.switch_events if e.deactivated]
        assert len(deactivations) == 1
        assert deactivations[0].deactivated == (2,)
        assert deactivations[0].time == pytest.approx(np.log(3.0), abs=1e-10)
        assert trajectory.final_state.active_set == (0, 1)


class TestSwitchedValidation:
    """Test 5.3: Switched backend limits"""

    def test_5_3_1_decaying_threshold_rejected(self, orthonormal_instance):
        """Test 5.3.1: Only constant thresholds are supported"""
        instance = orthonormal_instance.with_threshold(
            ThresholdSchedule.exponential_decay(0.4, 0.1)
        )

        with pytest.raises(InvalidArgumentError) as exc_info:
            simulate_switched(instance)

        assert "constant threshold" in str(exc_info.value)

    def test_5_3_2_event_budget(self, orthonormal_instance):
        """Test 5.3.2: Exceeding the switch budget raises DivergenceSuspectedError"""
        with pytest.raises(DivergenceSuspectedError):
            simulate_switched(orthonormal_instance, t_max=5.0, max_switches=0)

    @pytest.mark.parametrize('kwargs', [{'t_max': 0.0}, {'event_tol': 0.0}])
    def test_5_3_3_invalid_arguments(self, scalar_instance, kwargs):
        """Test 5.3.3: Horizon and event tolerance must be positive"""
        with pytest.raises(InvalidArgumentError):
            simulate_switched(scalar_instance, **kwargs)


class TestBackendAgreement:
    """Test 5.4: Fixed-step and switched backends agree"""

    def test_5_4_1_scalar_agreement(self, scalar_instance):
        """Test 5.4.1: Both backends reach the same final state"""
        fixed = simulate_fixed_step(scalar_instance, t_max=10.0, dt=0.001)
        switched = simulate(scalar_instance, backend='switched', t_max=10.0)

        assert switched.backend == 'switched'
        assert np.allclose(fixed.final_state.u, switched.final_state.u, atol=1e-6)

    def test_5_4_2_small_random_instance(self, make_small_instance):
        """Test 5.4.2: Same visited final support on a coupled instance"""
        # Arrange
        instance = make_small_instance(seed=2, n=10, m=8, s=2, lam=0.1)

        # Act
        fixed = simulate_fixed_step(instance, t_max=10.0, dt=0.001)
        switched = simulate_switched(instance, t_max=10.0)

        # Assert
        assert fixed.final_state.active_set == switched.final_state.active_set
        assert np.linalg.norm(fixed.final_state.u - switched.final_state.u) <= 1e-5
