import csv
import logging
import os
import re

import allure
import pytest
import yaml

from runners import cli
from runners.run_manager import MANIFEST_FILENAME, load_manifest, sha256_file

logger = logging.getLogger("TestCli")

TINY_RUN = {
    'data': {'mixture': 'default9', 'n': 64, 'seed': 1},
    'model': {'kind': 'edm', 'architecture': {'depth': 1, 'hidden_width': 8, 'embedding_dim': 3,
                                              'fourier_frequencies': 2}},
    'privacy': {'clip': 1.0, 'sigma_dp': 1.0},
    'optimizer': {'learning_rate': 1.0e-3, 'ema_decay': 0.9},
    'sampler': {'n': 50, 'steps': 10},
    'run': {'seed': 2, 'steps': 4, 'batch_size': 8, 'K': 2, 'log_every': 0},
}


def _write_config(tmp_path, raw, name='tiny.yml'):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def _rows(path):
    with open(path, newline='') as f:
        return list(csv.reader(f))


def _epsilon(text):
    return float(re.search(r"epsilon=([0-9.eE+-]+)", text).group(1))


@pytest.fixture
def trained(tmp_path, output_root):
    config = _write_config(tmp_path, TINY_RUN)
    assert cli.main(['--output-root', str(output_root), 'train', config, '--output-dir', 'a']) == cli.EXIT_OK
    return output_root / 'a'


@allure.feature("CLI")
class TestAccounting:
    def test_account_mnist_example(self, capsys):
        code = cli.main(['account', '--sigma', '2.48779', '--q', '0.068266', '--epochs', '300', '--n', '60000'])
        assert code == cli.EXIT_OK
        out = capsys.readouterr().out
        logger.info(out)
        assert 'T=4500' in out
        assert _epsilon(out) == pytest.approx(10.0, rel=0.15)

    def test_zero_epochs_costs_nothing(self, capsys):
        assert cli.main(['account', '--sigma', '1.0', '--q', '0.01', '--epochs', '0']) == cli.EXIT_OK
        assert _epsilon(capsys.readouterr().out) == 0.0

    def test_account_writes_curve(self, tmp_path):
        path = tmp_path / 'curve.csv'
        assert cli.main(['account', '--sigma', '1.0', '--q', '0.01', '--steps', '100', '--csv', str(path)]) == 0
        rows = _rows(path)
        assert rows[0] == cli.RDP_COLUMNS
        assert rows[1][0] == '2'

    def test_calibrate_round_trip(self, capsys):
        args = ['--q', '0.01', '--steps', '2000', '--conversion', 'classic']
        assert cli.main(['calibrate', '--target-eps', '3.0', *args]) == cli.EXIT_OK
        sigma = re.search(r"sigma_dp=([0-9.eE+-]+)", capsys.readouterr().out).group(1)
        assert cli.main(['account', '--sigma', sigma, *args]) == cli.EXIT_OK
        assert _epsilon(capsys.readouterr().out) == pytest.approx(3.0, rel=1e-2)

    def test_unreachable_target_is_runtime_error(self):
        assert cli.main(['calibrate', '--target-eps', '1e-6', '--q', '0.5', '--steps', '10000']) == cli.EXIT_RUNTIME

    def test_bad_rate_is_validation_error(self):
        assert cli.main(['account', '--sigma', '1.0', '--q', '1.5', '--steps', '10']) == cli.EXIT_VALIDATION


@allure.feature("CLI")
class TestTrain:
    def test_tiny_run_artifacts(self, trained):
        manifest = load_manifest(str(trained / MANIFEST_FILENAME))
        assert manifest['steps'] == 4
        assert manifest['privacy']['sigma_dp'] == 1.0
        for name in ('checkpoint.bin', cli.TRAIN_LOG, cli.RDP_CURVE):
            assert manifest['hashes'][name] == sha256_file(str(trained / name))
        assert len(_rows(str(trained / cli.TRAIN_LOG))) == 5

    def test_post_train_sampling_uses_config_section(self, tmp_path, output_root):
        config = _write_config(tmp_path, TINY_RUN)
        assert cli.main(['--output-root', str(output_root), 'train', config, '--output-dir', 's', '--sample']) == 0
        run_dir = output_root / 's'
        rows = _rows(str(run_dir / cli.SAMPLES_CSV))
        assert len(rows) == TINY_RUN['sampler']['n'] + 1
        manifest = load_manifest(str(run_dir / MANIFEST_FILENAME))
        assert manifest['hashes'][cli.SAMPLES_CSV] == sha256_file(str(run_dir / cli.SAMPLES_CSV))
        assert manifest['config']['sampler']['schedule']['steps_M'] == 10

    def test_custom_mixture_travels_with_checkpoint(self, tmp_path, output_root):
        means = [[2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]]
        raw = dict(TINY_RUN, data={'mixture': {'means': means, 'component_std': 0.1}, 'n': 64, 'seed': 1})
        config = _write_config(tmp_path, raw, 'three.yml')
        assert cli.main(['--output-root', str(output_root), 'train', config, '--output-dir', 'c']) == 0
        ckpt = str(output_root / 'c' / 'checkpoint.bin')
        out = tmp_path / 's.csv'
        assert cli.main(['sample', '--checkpoint', ckpt, '--n', '40', '--steps', '6', '--out', str(out)]) == 0
        assert {int(r[2]) for r in _rows(str(out))[1:]} <= {0, 1, 2}
        assert cli.main(['sample', '--checkpoint', ckpt, '--n', '5', '--steps', '6', '--label', '2',
                         '--out', str(out)]) == 0
        assert cli.main(['sample', '--checkpoint', ckpt, '--n', '5', '--steps', '6', '--label', '3',
                         '--out', str(out)]) == cli.EXIT_VALIDATION
        assert cli.main(['eval', '--checkpoint', ckpt, '--metric', 'vicinity', '--data', '--n', '2000',
                         '--out', str(tmp_path / 'eval')]) == 0
        coverage = {int(r[0]): float(r[1]) for r in _rows(str(tmp_path / 'eval' / 'vicinity.csv'))[1:]}
        assert coverage[3] == pytest.approx(0.989, abs=0.02)

    def test_same_config_same_hashes(self, trained, tmp_path, output_root):
        config = _write_config(tmp_path, TINY_RUN, 'again.yml')
        assert cli.main(['--output-root', str(output_root), 'train', config, '--output-dir', 'b']) == 0
        first = load_manifest(str(trained / MANIFEST_FILENAME))['hashes']
        second = load_manifest(str(output_root / 'b' / MANIFEST_FILENAME))['hashes']
        assert first == second

    def test_account_only_mnist(self, output_root, capsys):
        assert cli.main(['--output-root', str(output_root), 'train', 'mnist_accounting.yml', '--account-only']) == 0
        assert 'eps=' in capsys.readouterr().out
        run_dir = output_root / 'mnist_accounting'
        manifest = load_manifest(str(run_dir / MANIFEST_FILENAME))
        assert 0.85 <= manifest['privacy']['epsilon'] <= 1.15
        assert manifest['checkpoint'] is None
        assert not (run_dir / 'checkpoint.bin').exists()

    def test_malformed_config_writes_nothing(self, tmp_path, output_root):
        raw = dict(TINY_RUN, run={**TINY_RUN['run'], 'lr': 0.1})
        config = _write_config(tmp_path, raw)
        assert cli.main(['--output-root', str(output_root), 'train', config]) == cli.EXIT_VALIDATION
        assert not output_root.exists()

    def test_missing_config(self, output_root):
        assert cli.main(['--output-root', str(output_root), 'train', 'nowhere.yml']) == cli.EXIT_VALIDATION

    def test_infeasible_budget_writes_nothing(self, tmp_path, output_root):
        raw = dict(TINY_RUN, privacy={'target_epsilon': 1e-6})
        config = _write_config(tmp_path, raw)
        assert cli.main(['--output-root', str(output_root), 'train', config]) == cli.EXIT_RUNTIME
        assert not output_root.exists()


@allure.feature("CLI")
class TestSample:
    ORACLE = ['sample', '--oracle', '--n', '50', '--steps', '10', '--seed', '3']

    @pytest.mark.parametrize("extra", [[], ['--sampler', 'churn', '--s-churn', '5'], ['--sampler', 'ddim-stoch']])
    def test_oracle_samples_are_reproducible(self, tmp_path, extra):
        a, b = tmp_path / 'a.csv', tmp_path / 'b.csv'
        assert cli.main([*self.ORACLE, *extra, '--out', str(a)]) == 0
        assert cli.main([*self.ORACLE, *extra, '--out', str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        rows = _rows(str(a))
        assert rows[0] == cli.SAMPLE_COLUMNS and len(rows) == 51

    def test_conditional_with_guidance(self, tmp_path):
        out = tmp_path / 's.csv'
        assert cli.main([*self.ORACLE, '--label', '4', '--guidance-w', '2.0', '--out', str(out)]) == 0
        assert {r[2] for r in _rows(str(out))[1:]} == {'4'}

    def test_scatter_svg(self, tmp_path):
        svg = tmp_path / 'plots' / 'samples.svg'
        assert cli.main([*self.ORACLE, '--out', str(tmp_path / 's.csv'), '--svg', str(svg)]) == 0
        assert svg.read_text().lstrip().startswith('<?xml')

    def test_label_out_of_range(self, tmp_path):
        assert cli.main([*self.ORACLE, '--label', '12', '--out', str(tmp_path / 's.csv')]) == cli.EXIT_VALIDATION

    def test_from_checkpoint(self, trained, tmp_path):
        out = tmp_path / 'net.csv'
        ckpt = str(trained / 'checkpoint.bin')
        assert cli.main(['sample', '--checkpoint', ckpt, '--n', '20', '--steps', '8', '--out', str(out)]) == 0
        assert len(_rows(str(out))) == 21
        raw = tmp_path / 'raw.csv'
        assert cli.main(['sample', '--checkpoint', ckpt, '--raw-weights', '--n', '20', '--steps', '8',
                         '--out', str(raw)]) == 0
        assert raw.read_bytes() != out.read_bytes()

    @pytest.mark.parametrize("kind,steps", [('ddim-det', 50), ('ddim-stoch', 1000), ('churn', 1000)])
    def test_schedule_length_defaults_by_sampler(self, kind, steps):
        args = cli.build_parser().parse_args(['sample', '--oracle', '--sampler', kind])
        assert cli.resolve_sampler_settings(args).schedule.steps_M == steps
        args = cli.build_parser().parse_args(['sample', '--oracle', '--sampler', kind, '--steps', '12'])
        assert cli.resolve_sampler_settings(args).schedule.steps_M == 12

    def test_config_sampler_section_drives_sampling(self, tmp_path):
        raw = dict(TINY_RUN, sampler={'kind': 'churn', 'n': 30, 'steps': 12, 'churn': {'s_churn': 5.0},
                                      'guidance': {'scale': 2.0, 'label': 1}})
        config = _write_config(tmp_path, raw)
        from_config = tmp_path / 'config.csv'
        assert cli.main(['sample', '--oracle', '--config', config, '--out', str(from_config)]) == 0
        explicit = tmp_path / 'explicit.csv'
        assert cli.main(['sample', '--oracle', '--sampler', 'churn', '--n', '30', '--steps', '12', '--s-churn', '5',
                         '--label', '1', '--guidance-w', '2', '--out', str(explicit)]) == 0
        assert from_config.read_bytes() == explicit.read_bytes()
        rows = _rows(str(from_config))
        assert len(rows) == 31 and {r[2] for r in rows[1:]} == {'1'}
        overridden = tmp_path / 'n5.csv'
        assert cli.main(['sample', '--oracle', '--config', config, '--n', '5', '--out', str(overridden)]) == 0
        assert len(_rows(str(overridden))) == 6

    def test_missing_checkpoint(self, tmp_path):
        assert cli.main(['sample', '--checkpoint', str(tmp_path / 'x.bin')]) == cli.EXIT_RUNTIME

    def test_corrupt_checkpoint(self, tmp_path):
        bad = tmp_path / 'bad.bin'
        bad.write_bytes(b'garbage!' * 4)
        assert cli.main(['sample', '--checkpoint', str(bad)]) == cli.EXIT_RUNTIME


@allure.feature("CLI")
class TestEval:
    def test_vicinity_of_data(self, tmp_path, capsys):
        assert cli.main(['eval', '--oracle', '--metric', 'vicinity', '--data', '--n', '20000',
                         '--out', str(tmp_path)]) == 0
        rows = _rows(str(tmp_path / 'vicinity.csv'))
        assert rows[0] == ['h', 'coverage']
        coverage = {int(r[0]): float(r[1]) for r in rows[1:]}
        assert coverage[1] == pytest.approx(0.394, abs=0.015)
        assert coverage[3] == pytest.approx(0.989, abs=0.005)
        assert 'h=6' in capsys.readouterr().out

    def test_complexity_csv(self, tmp_path):
        assert cli.main(['eval', '--oracle', '--metric', 'complexity', '--sigmas', '0.1,1.0', '--n-mc', '32',
                         '--n-mc-endtoend', '16', '--steps', '10', '--out', str(tmp_path)]) == 0
        rows = _rows(str(tmp_path / 'complexity.csv'))
        assert rows[0] == ['kind', 'sigma', 'jf_estimate', 'stderr']
        assert len(rows) == 4

    def test_weighting_csv(self, tmp_path):
        assert cli.main(['eval', '--oracle', '--metric', 'weighting', '--sigmas', '0.1,1.0',
                         '--out', str(tmp_path)]) == 0
        rows = _rows(str(tmp_path / 'weighting.csv'))
        assert rows[0] == ['kind', 'sigma', 'density', 'loss_weight', 'relative_weight']
        assert len(rows) == 9

    def test_variance_from_checkpoint(self, trained, tmp_path):
        assert cli.main(['eval', '--checkpoint', str(trained / 'checkpoint.bin'), '--metric', 'variance',
                         '--K', '1,4', '--reseeds', '200', '--gradients', '--grad-reseeds', '100',
                         '--out', str(tmp_path)]) == 0
        assert _rows(str(tmp_path / 'variance.csv'))[0] == ['K', 'loss_variance']
        assert len(_rows(str(tmp_path / 'gradient_variance.csv'))) == 3
        assert os.path.exists(tmp_path / 'gradient_variance_histogram.csv')

    def test_variance_plot(self, tmp_path):
        svg = tmp_path / 'variance.svg'
        assert cli.main(['eval', '--oracle', '--metric', 'variance', '--K', '1,2', '--reseeds', '50',
                         '--out', str(tmp_path), '--svg', str(svg)]) == 0
        assert svg.exists()

    def test_churn_grid(self, tmp_path):
        assert cli.main(['eval', '--oracle', '--metric', 'churn-grid', '--s-churn-grid', '0,5', '--n', '100',
                         '--steps', '10', '--out', str(tmp_path)]) == 0
        rows = _rows(str(tmp_path / 'churn_grid.csv'))
        assert rows[0] == ['guidance_w', 's_churn', 'coverage_h3']
        assert [r[1] for r in rows[1:]] == ['0', '5']

    def test_guidance_grid_needs_label(self, tmp_path):
        assert cli.main(['eval', '--oracle', '--metric', 'churn-grid', '--guidance-grid', '1,2',
                         '--out', str(tmp_path)]) == cli.EXIT_VALIDATION


@allure.feature("CLI")
class TestOracleInfo:
    def test_describes_mixture(self, capsys):
        assert cli.main(['oracle-info']) == 0
        out = capsys.readouterr().out
        assert 'components: 9' in out
        assert out.count('weight=') == 9
        assert 'h=3: expected coverage 98.89%' in out

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as e:
            cli.main(['fly'])
        assert e.value.code == cli.EXIT_VALIDATION
