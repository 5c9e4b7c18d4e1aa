"""
Unit tests for experiment configuration
Tests cover: defaults, config files, overrides, precedence, validation
"""

import json

import pytest

from lca_lab.config import (
    CONFIG_ENV_VAR,
    EXPERIMENTS,
    PHASE_LAMBDAS,
    ExperimentConfig,
    coerce_value,
    load_config,
    parse_comma_separated,
    parse_override,
)
from lca_lab.errors import ConfigError


class TestDefaults:
    """Test 2.1: Experiment defaults"""

    def test_2_1_1_phase_grid_defaults(self):
        """Test 2.1.1: Phase sweeps default to 60 sparsities and 25 thresholds"""
        # Act
        config = load_config('support-containment', environ={})

        # Assert
        assert config.s_grid == list(range(1, 61))
        assert len(config.lambda_grid) == 25
        assert config.lambda_grid[0] == pytest.approx(0.02)
        assert config.lambda_grid[-1] == pytest.approx(0.5)
        assert config.n == 400 and config.m == 200
        assert config.trials == 100

    def test_2_1_2_audit_defaults(self):
        """Test 2.1.2: The theorem audit runs small instances on the switched backend"""
        config = load_config('theorem-audit', environ={})

        assert (config.n, config.m) == (20, 15)
        assert config.backend == 'switched'
        assert config.lambda_grid == [0.3, 0.6, 1.0]

    def test_2_1_6_decay_defaults(self):
        """Test 2.1.6: The decay study draws Gaussian amplitudes with noise over 100 trials"""
        config = load_config('threshold-decay', environ={})

        assert config.signal_mode == 'gaussian-amplitudes'
        assert config.trials == 100
        assert config.sigma == 0.025
        assert (config.decay_start, config.decay_end) == (0.3, 0.08)
        assert config.converge_t_max == 60.0

    def test_2_1_3_defaults_are_copied(self):
        """Test 2.1.3: Editing a loaded config leaves the defaults intact"""
        config = load_config('active-ratio-heatmap', environ={})
        config.lambda_grid.append(9.0)

        assert len(load_config('active-ratio-heatmap', environ={}).lambda_grid) == 25
        assert len(PHASE_LAMBDAS) == 25

    @pytest.mark.parametrize('experiment', EXPERIMENTS)
    def test_2_1_4_every_experiment_validates(self, experiment):
        """Test 2.1.4: Every experiment's defaults pass validation"""
        assert load_config(experiment, environ={}).experiment == experiment

    def test_2_1_5_unknown_experiment(self):
        """Test 2.1.5: Unknown experiment tags list the available ones"""
        with pytest.raises(ConfigError) as exc_info:
            load_config('phase-diagram', environ={})

        assert "Available experiments" in str(exc_info.value)


class TestParsing:
    """Test 2.2: Value parsing"""

    def test_2_2_1_comma_separated(self):
        """Test 2.2.1: Items are stripped"""
        assert parse_comma_separated(" 1, 2 ,3", 's_grid') == ['1', '2', '3']

    @pytest.mark.parametrize('text', ['', '1,,2', '0.1,'])
    def test_2_2_2_empty_items_rejected(self, text):
        """Test 2.2.2: Empty items are configuration errors"""
        with pytest.raises(ConfigError):
            parse_comma_separated(text, 'lambda_grid')

    def test_2_2_3_coerce_lists_and_scalars(self):
        """Test 2.2.3: Values take the type of their field"""
        assert coerce_value('lambda_grid', '0.1,0.2') == [0.1, 0.2]
        assert coerce_value('s_grid', [1, 2.0]) == [1, 2]
        assert coerce_value('trials', '7') == 7
        assert coerce_value('sigma', 0) == 0.0
        assert coerce_value('backend', 'switched') == 'switched'

    @pytest.mark.parametrize('name, raw', [
        ('trials', 'many'),
        ('trials', 2.5),
        ('trials', True),
        ('s_grid', 5),
        ('backend', 3),
    ])
    def test_2_2_4_bad_values(self, name, raw):
        """Test 2.2.4: Values of the wrong type are rejected with the key name"""
        with pytest.raises(ConfigError) as exc_info:
            coerce_value(name, raw)

        assert name in str(exc_info.value)

    def test_2_2_5_unknown_key_lists_accepted(self):
        """Test 2.2.5: Unknown keys name the accepted ones"""
        with pytest.raises(ConfigError) as exc_info:
            coerce_value('lambdas', '0.1')

        assert "Accepted keys" in str(exc_info.value)
        assert "lambda_grid" in str(exc_info.value)

    def test_2_2_6_parse_override(self):
        """Test 2.2.6: Overrides split on the first '='"""
        assert parse_override('sigma = 0.01') == ('sigma', '0.01')
        with pytest.raises(ConfigError):
            parse_override('sigma')


class TestPrecedence:
    """Test 2.3: Defaults, file, overrides and flags"""

    def test_2_3_1_file_values(self, tmp_path):
        """Test 2.3.1: File values replace defaults"""
        # Arrange
        path = tmp_path / 'config.json'
        path.write_text(json.dumps({'n': 50, 'm': 30, 's_grid': [2, 3], 'trials': 4}))

        # Act
        config = load_config('rate-curves', path=path, environ={})

        # Assert
        assert (config.n, config.m, config.s_grid, config.trials) == (50, 30, [2, 3], 4)

    def test_2_3_2_override_beats_file_and_flag_beats_override(self, tmp_path):
        """Test 2.3.2: Precedence is defaults < file < override < flag"""
        # Arrange
        path = tmp_path / 'config.json'
        path.write_text(json.dumps({'trials': 4, 'seed': 1, 'sigma': 0.01}))

        # Act
        config = load_config(
            'rate-curves',
            path=path,
            overrides=['trials=5', 'seed=2'],
            flags={'trials': 6, 'seed': None},
            environ={},
        )

        # Assert
        assert config.trials == 6
        assert config.seed == 2
        assert config.sigma == 0.01

    def test_2_3_3_environment_config_file(self, tmp_path, caplog):
        """Test 2.3.3: LCA_LAB_CONFIG is used when no path is given"""
        # Arrange
        path = tmp_path / 'env.json'
        path.write_text(json.dumps({'trials': 9}))

        # Act
        with caplog.at_level('INFO'):
            config = load_config('rate-curves', environ={CONFIG_ENV_VAR: str(path)})

        # Assert
        assert config.trials == 9
        assert CONFIG_ENV_VAR in caplog.text

    def test_2_3_4_file_for_other_experiment(self, tmp_path):
        """Test 2.3.4: A file naming another experiment is rejected"""
        path = tmp_path / 'config.json'
        path.write_text(json.dumps({'experiment': 'theorem-audit'}))

        with pytest.raises(ConfigError) as exc_info:
            load_config('rate-curves', path=path, environ={})

        assert "theorem-audit" in str(exc_info.value)

    def test_2_3_5_missing_and_malformed_files(self, tmp_path):
        """Test 2.3.5: Missing or malformed files are configuration errors"""
        broken = tmp_path / 'broken.json'
        broken.write_text('[1, 2')
        listing = tmp_path / 'list.json'
        listing.write_text('[1, 2]')

        with pytest.raises(ConfigError):
            load_config('rate-curves', path=tmp_path / 'absent.json', environ={})
        with pytest.raises(ConfigError):
            load_config('rate-curves', path=broken, environ={})
        with pytest.raises(ConfigError):
            load_config('rate-curves', path=listing, environ={})


class TestValidation:
    """Test 2.4: Range checks"""

    @pytest.mark.parametrize('field_name, value', [
        ('s_grid', [0]),
        ('s_grid', [401]),
        ('lambda_grid', [0.0]),
        ('lambda_grid', []),
        ('trials', 0),
        ('seed', -1),
        ('sigma', -0.1),
        ('dt', 0.0),
        ('backend', 'euler'),
        ('ensemble', 'explicit'),
        ('sweep_parameter', 'tau'),
        ('decay_end', 0.5),
        ('workers', 0),
        ('converge_t_max', 0.0),
        ('rip_samples', 0),
    ])
    def test_2_4_1_out_of_range(self, field_name, value):
        """Test 2.4.1: Out-of-range fields raise ConfigError"""
        config = ExperimentConfig(experiment='rate-curves', **{field_name: value})

        with pytest.raises(ConfigError):
            config.validate()

    def test_2_4_2_config_dict(self):
        """Test 2.4.2: to_dict lists every field"""
        data = ExperimentConfig(experiment='rate-curves').to_dict()

        assert data['experiment'] == 'rate-curves'
        assert data['q_grid'] == [2, 4, 6]
        assert 'rip_cap' in data
