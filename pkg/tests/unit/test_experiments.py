"""
Unit tests for experiment recipes
Tests cover: trial plumbing, cell summaries, phase sweeps, decay study, rate curves,
theorem audit, run_experiment outputs
"""

import csv
import json
from unittest.mock import patch

import numpy as np
import pytest

from lca_lab.dynamics import ThresholdSchedule, simulate_switched
from lca_lab.errors import ConfigError, NumericFailureError
from lca_lab.experiments import (
    build_instance,
    compare_decay_runs,
    convergence_horizon,
    run_active_ratio_heatmap,
    run_experiment,
    run_rate_curves,
    run_support_containment,
    run_theorem_audit,
    run_threshold_decay,
    run_trial,
    simulate_instance,
    summarize_cell,
    sweep_point,
    time_to_fraction,
)
from lca_lab.records import TrialRecord, validate_record


def _read_csv(path):
    with path.open() as handle:
        return list(csv.reader(handle))


class TestTrialPlumbing:
    """Test 11.1: Instances, trials and timing"""

    def test_11_1_1_instance_depends_on_trial_only(self, make_config):
        """Test 11.1.1: Thresholds do not change the drawn matrix or signal"""
        # Arrange
        config = make_config()

        # Act
        first = build_instance(config, 2, ThresholdSchedule.constant(0.3), trial_index=4)
        second = build_instance(config, 2, ThresholdSchedule.constant(2.0), trial_index=4)
        other = build_instance(config, 2, ThresholdSchedule.constant(0.3), trial_index=5)

        # Assert
        assert np.array_equal(first.matrix.entries, second.matrix.entries)
        assert np.array_equal(first.signal.values, second.signal.values)
        assert not np.array_equal(first.matrix.entries, other.matrix.entries)
        assert first.matrix.seed == config.seed + 4

    def test_11_1_2_time_to_one_percent(self, scalar_instance):
        """Test 11.1.2: Error 2 exp(-t) first drops below 1% at the 4.7 sample"""
        trajectory = simulate_switched(scalar_instance, t_max=10.0)

        assert time_to_fraction(trajectory, np.array([2.0])) == pytest.approx(4.7)

    def test_11_1_3_time_to_fraction_never_reached(self, scalar_instance):
        """Test 11.1.3: None when the error never drops far enough"""
        trajectory = simulate_switched(scalar_instance, t_max=1.0)

        assert time_to_fraction(trajectory, np.array([2.0])) is None

    def test_11_1_4_run_trial_without_activation(self, make_config):
        """Test 11.1.4: lambda above ||y|| never activates a node"""
        record = run_trial(make_config(), s=2, lam=2.0, trial_index=0)

        assert record.ok
        assert record.q_obs == 0
        assert record.contained
        assert record.lam == 2.0

    @patch('lca_lab.experiments.simulate_instance')
    def test_11_1_5_numeric_failure_becomes_failed_record(self, mock_simulate, make_config, caplog):
        """Test 11.1.5: Numeric failures are recorded, not raised"""
        # Arrange
        mock_simulate.side_effect = NumericFailureError('Non-finite state', t=1.0)

        # Act
        with caplog.at_level('WARNING'):
            record = run_trial(make_config(), s=1, lam=0.3, trial_index=2)

        # Assert
        assert record.status == 'failed'
        assert 'NumericFailureError' in record.error
        assert record.seed == 2
        assert "Trial 2" in caplog.text


class TestCellSummary:
    """Test 11.2: Aggregation of one (S, lambda) cell"""

    def _records(self, ok, failed, contained=True):
        records = [TrialRecord(trial_index=k, s=2, lam=0.1, q_obs=2 if contained else 3,
                               contained=contained) for k in range(ok)]
        records += [TrialRecord.failed(ok + k, 2, 0.1, ArithmeticError('x')) for k in range(failed)]
        return records

    def test_11_2_1_all_contained(self):
        """Test 11.2.1: Fractions and ratios over successful trials"""
        cell = summarize_cell(2, 0.1, self._records(4, 0))

        assert cell.contained_fraction == 1.0
        assert cell.mean_ratio == 1.0
        assert not cell.degraded

    def test_11_2_2_few_failures_excluded(self):
        """Test 11.2.2: Under 5% failures are left out of the denominator"""
        cell = summarize_cell(2, 0.1, self._records(39, 1))

        assert cell.failures == 1
        assert cell.contained_fraction == 1.0
        assert not cell.degraded

    def test_11_2_3_many_failures_degrade(self, caplog):
        """Test 11.2.3: 5% or more failures count as not contained"""
        with caplog.at_level('WARNING'):
            cell = summarize_cell(2, 0.1, self._records(3, 1))

        assert cell.degraded
        assert cell.contained_fraction == pytest.approx(0.75)
        assert "1/4 trials failed" in caplog.text

    def test_11_2_4_not_contained(self):
        """Test 11.2.4: Ratio above one when more than S nodes activate"""
        cell = summarize_cell(2, 0.1, self._records(2, 0, contained=False))

        assert cell.contained_fraction == 0.0
        assert cell.max_ratio == 1.5


class TestPhaseSweeps:
    """Test 11.3: Support containment and active-set ratio"""

    def test_11_3_1_containment_grid(self, make_config):
        """Test 11.3.1: One cell per (S, lambda), large lambda never activates"""
        # Act
        grid = run_support_containment(make_config())

        # Assert
        assert grid.s_values == (1, 2)
        assert grid.lambda_values == (0.3, 2.0)
        assert len(grid.cells) == 4
        assert len(grid.records) == 12
        assert grid.cell(2, 2.0).contained_fraction == 1.0
        assert grid.cell(2, 2.0).mean_q_obs == 0.0
        assert grid.matrix('contained_fraction').shape == (2, 2)

    def test_11_3_2_noise_rejected(self, make_config):
        """Test 11.3.2: Containment sweeps run noiseless"""
        with pytest.raises(ConfigError):
            run_support_containment(make_config(sigma=0.01))

    def test_11_3_3_phase_outputs(self, make_config, tmp_path):
        """Test 11.3.3: Wide containment matrix and long ratio table"""
        # Arrange
        config = make_config(experiment='active-ratio-heatmap')

        # Act
        run_experiment(config)

        # Assert
        directory = tmp_path / 'results' / 'active-ratio-heatmap'
        fig1 = _read_csv(directory / 'fig1_support_containment.csv')
        assert fig1[0] == ['s', 'lambda=0.3', 'lambda=2.0']
        assert [row[0] for row in fig1[1:]] == ['1', '2']
        fig2 = _read_csv(directory / 'fig2_active_ratio.csv')
        assert len(fig2) == 5
        assert fig2[0][:3] == ['s', 'lambda', 'trials']

    def test_11_3_4_trials_file_is_hashed(self, make_config, tmp_path):
        """Test 11.3.4: Every persisted trial record validates"""
        run_experiment(make_config())

        path = tmp_path / 'results' / 'support-containment' / 'trials.jsonl'
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(records) == 12
        assert all(validate_record(record) for record in records)

    def test_11_3_5_heatmap_matches_containment(self, make_config):
        """Test 11.3.5: Both sweeps draw the same trials"""
        first = run_support_containment(make_config())
        second = run_active_ratio_heatmap(make_config())

        assert np.array_equal(first.matrix('mean_ratio'), second.matrix('mean_ratio'))


class TestThresholdDecay:
    """Test 11.4: Decreasing threshold study"""

    def test_11_4_1_three_runs(self, make_config):
        """Test 11.4.1: Fixed-high, fixed-low and decaying runs share one instance"""
        # Arrange
        config = make_config(experiment='threshold-decay', s_grid=[2], lambda_grid=[0.08],
                             trials=2, t_max=20.0)

        # Act
        study = run_threshold_decay(config)

        # Assert
        assert set(study.runs) == {'fixed-high', 'fixed-low', 'decay'}
        assert len(study.records) == 6
        assert len(study.solution_gaps) == 2
        assert 0.0 <= study.faster_fraction <= 1.0
        assert study.runs['decay'].trajectory.backend == 'fixed'
        assert study.runs['fixed-low'].record.label == 'fixed-low'

    def test_11_4_2_decay_outputs(self, make_config, tmp_path):
        """Test 11.4.2: Active counts per time and final solutions per node"""
        config = make_config(experiment='threshold-decay', s_grid=[2], lambda_grid=[0.08],
                             trials=1, t_max=2.0)

        run_experiment(config)

        directory = tmp_path / 'results' / 'threshold-decay'
        counts = _read_csv(directory / 'fig3_active_counts.csv')
        assert counts[0] == ['t', 'fixed-high', 'fixed-low', 'decay']
        assert len(counts) == 22
        finals = _read_csv(directory / 'fig3_final_solutions.csv')
        assert len(finals) == 21

    def test_11_4_3_comparison_fractions(self):
        """Test 11.4.3: Failed trials count as losses in every fraction"""
        # Arrange
        def trial(index, decay, low):
            return [
                TrialRecord(trial_index=index, s=5, lam=0.08, q_obs=decay[2], contained=False,
                            time_to_1pct=decay[0], settle_time=decay[1], label='decay'),
                TrialRecord(trial_index=index, s=5, lam=0.08, q_obs=low[2], contained=False,
                            time_to_1pct=low[0], settle_time=low[1], label='fixed-low'),
            ]

        outcomes = [
            trial(0, (1.5, 2.0, 5), (3.0, 4.0, 12)),
            trial(1, (4.0, 5.0, 6), (3.0, 4.0, 6)),
            [TrialRecord.failed(2, 5, 0.08, ValueError('boom'), label='decay'),
             TrialRecord(trial_index=2, s=5, lam=0.08, q_obs=7, contained=False,
                         time_to_1pct=3.0, settle_time=4.0, label='fixed-low')],
            trial(3, (None, 1.0, 3), (3.0, 2.0, 9)),
        ]

        # Act
        comparison = compare_decay_runs(outcomes)

        # Assert
        assert comparison.trials == 4
        assert comparison.faster == 0.25
        assert comparison.settled_first == 0.5
        assert comparison.smaller_peak == 0.75

    def test_11_4_4_common_reference(self, make_config):
        """Test 11.4.4: Decay and fixed-low errors are measured against the fixed-low fixed point"""
        # Arrange
        config = make_config(experiment='threshold-decay', s_grid=[2], lambda_grid=[0.08],
                             trials=1, t_max=10.0)

        # Act
        study = run_threshold_decay(config)

        # Assert
        runs = study.runs
        reference = runs['fixed-low'].trajectory.final_state.u
        for label in ('decay', 'fixed-low'):
            assert runs[label].record.time_to_1pct == time_to_fraction(runs[label].trajectory,
                                                                       reference)
        high = runs['fixed-high']
        assert high.record.time_to_1pct == time_to_fraction(high.trajectory,
                                                            high.trajectory.final_state.u)
        assert all(run.record.settle_time is not None for run in runs.values())
        summary = study.summary()
        for key in ('faster_fraction', 'settled_first_fraction', 'smaller_peak_fraction',
                    'max_solution_gap', 'settle_time_trial0'):
            assert key in summary

    @patch('lca_lab.experiments.simulate')
    def test_11_4_5_runs_to_convergence_horizon(self, mock_simulate, make_config,
                                                orthonormal_instance):
        """Test 11.4.5: The horizon extends the run while samples stay on [0, t_max]"""
        # Arrange
        config = make_config(t_max=5.0, converge_t_max=60.0)

        # Act
        simulate_instance(orthonormal_instance, config, horizon=convergence_horizon(config))

        # Assert
        kwargs = mock_simulate.call_args.kwargs
        assert kwargs['t_max'] == 60.0
        assert kwargs['output_times'][-1] == pytest.approx(5.0)


class TestRateCurves:
    """Test 11.5: Convergence-rate curves"""

    def test_11_5_1_sweep_point(self, make_config):
        """Test 11.5.1: The swept parameter replaces its default"""
        config = make_config(experiment='rate-curves', sweep_parameter='m', sweep_values=[10.0])

        assert sweep_point(config, 10.0) == {'n': 20, 'm': 10, 's': 1, 'lambda': 0.3}

    def test_11_5_2_curves_per_value(self, make_config, caplog):
        """Test 11.5.2: One curve per sweep value with estimate overlays"""
        # Arrange
        config = make_config(experiment='rate-curves', s_grid=[2], lambda_grid=[0.1],
                             sweep_values=[0.3, 0.1], trials=2, t_max=10.0)

        # Act
        with caplog.at_level('WARNING'):
            study = run_rate_curves(config)

        # Assert
        assert [curve.value for curve in study.curves] == [0.1, 0.3]
        for curve in study.curves:
            assert curve.trials_used + curve.excluded == 2
            assert curve.delta_s == pytest.approx(np.sqrt(2 * np.log(10) / 15))
            assert curve.overlay_s[0] == 1.0
            # Order 5S is not below 1 for this size
            assert curve.overlay_5s is None
            if curve.mean_error is not None:
                assert curve.mean_error[0] == pytest.approx(1.0)
        assert "not below 1" in caplog.text

    def test_11_5_3_rate_outputs(self, make_config, tmp_path):
        """Test 11.5.3: Long curve table and per-value summary"""
        config = make_config(experiment='rate-curves', s_grid=[2], lambda_grid=[0.1],
                             sweep_values=[0.2], trials=1, t_max=1.0)

        run_experiment(config)

        directory = tmp_path / 'results' / 'rate-curves'
        curves = _read_csv(directory / 'fig4_rate_curves.csv')
        assert len(curves) == 12
        summary = _read_csv(directory / 'fig4_rate_summary.csv')
        assert summary[1][:2] == ['lambda', '0.2']
        assert summary[0][-2:] == ['mean_d', 'theoretical_rate']
        assert curves[0][-1] == 'overlay_measured_d'

    def test_11_5_4_small_lambda_converges(self, make_config):
        """Test 11.5.4: Every trial converges within the horizon, so no curve is empty"""
        # Arrange
        config = make_config(experiment='rate-curves', n=50, m=25, s_grid=[3],
                             lambda_grid=[0.1], sweep_values=[0.1, 0.3], trials=3,
                             t_max=10.0, converge_t_max=400.0)

        # Act
        study = run_rate_curves(config)

        # Assert
        for curve in study.curves:
            assert curve.excluded == 0
            assert curve.mean_error is not None
            assert curve.mean_d is not None
            assert curve.overlay_d is None or curve.overlay_d[0] == 1.0
        assert all(0.0 <= record.d_constant for record in study.records)
        summary = study.summary()
        assert set(summary['theoretical_rate']) == {'0.1', '0.3'}


class TestTheoremAudit:
    """Test 11.6: Theorem audit"""

    def test_11_6_1_audit_rows(self, make_config):
        """Test 11.6.1: One thm2 row and one thm3 row per q for every trial and lambda"""
        # Arrange
        config = make_config(experiment='theorem-audit', s_grid=[1], lambda_grid=[0.3, 2.0],
                             trials=1, q_grid=[2], backend='switched', t_max=10.0)

        # Act
        result = run_theorem_audit(config)

        # Assert
        assert len(result.rows) == 4
        assert {row.theorem for row in result.rows} == {'thm2', 'thm3'}
        summary = result.summary()
        assert summary['rows'] == 4
        assert summary['lemma1_passed'] <= summary['lemma1_checked']
        assert summary['lower_bound_rows'] == 0
        assert all(row.delta_method == 'bruteforce' for row in result.rows
                   if row.delta is not None)

    def test_11_6_3_capped_orders_report_sampled_bounds(self, make_config, caplog):
        """Test 11.6.3: Orders above the cap carry a sampled lower bound"""
        # Arrange
        config = make_config(experiment='theorem-audit', s_grid=[2], lambda_grid=[0.3],
                             trials=1, q_grid=[4], backend='switched', t_max=5.0,
                             rip_cap=200, rip_samples=50)

        # Act
        with caplog.at_level('WARNING'):
            result = run_theorem_audit(config)

        # Assert
        bounded = [row for row in result.rows if row.status == 'lower-bound']
        assert bounded
        for row in bounded:
            assert row.delta_method == 'sampled'
            assert not row.applicable
            assert 0.0 <= row.delta
        assert result.summary()['lower_bound_rows'] == len(bounded)
        assert "sampling a lower bound" in caplog.text

    def test_11_6_2_audit_outputs(self, make_config, tmp_path):
        """Test 11.6.2: Audit table and disagreement file are written"""
        config = make_config(experiment='theorem-audit', s_grid=[1], lambda_grid=[2.0],
                             trials=1, q_grid=[2], backend='switched', t_max=5.0)

        run_experiment(config)

        directory = tmp_path / 'results' / 'theorem-audit'
        table = _read_csv(directory / 'theorem_audit.csv')
        assert table[0][:4] == ['s', 'lambda', 'trial_index', 'theorem']
        assert len(table) == 3
        assert (directory / 'theorem_audit_disagreements.jsonl').exists()


class TestRunExperiment:
    """Test 11.7: Experiment entry point"""

    def test_11_7_1_config_echo_and_manifest(self, make_config, tmp_path):
        """Test 11.7.1: config.json echoes the run and manifest.json lists the files"""
        # Act
        run_experiment(make_config(seed=7))

        # Assert
        directory = tmp_path / 'results' / 'support-containment'
        echoed = json.loads((directory / 'config.json').read_text())
        manifest = json.loads((directory / 'manifest.json').read_text())
        assert echoed['seed'] == 7
        assert manifest['seed'] == 7
        assert manifest['experiment'] == 'support-containment'
        assert 'trials.jsonl' in manifest['files']
        assert manifest['summary']['cells'] == 4

    def test_11_7_2_reruns_are_identical(self, make_config, tmp_path):
        """Test 11.7.2: Same seed and config give byte-identical summaries"""
        config = make_config()
        run_experiment(config, output_dir=tmp_path / 'first')
        run_experiment(config, output_dir=tmp_path / 'second')

        for name in ('fig1_support_containment.csv', 'fig2_active_ratio.csv', 'trials.jsonl'):
            first = (tmp_path / 'first' / 'support-containment' / name).read_bytes()
            second = (tmp_path / 'second' / 'support-containment' / name).read_bytes()
            assert first == second

    def test_11_7_3_invalid_config(self, make_config):
        """Test 11.7.3: Configs are validated before anything runs"""
        config = make_config()
        config.trials = 0

        with pytest.raises(ConfigError):
            run_experiment(config)
