import json

import pytest
from click.testing import CliRunner

from nowcast.cli import cli
from nowcast.config import ENV_VARS
from nowcast.core.patches import read_dataset
from nowcast.core.storm_sim import read_mosaics
from nowcast.utils import read_csv

SMALL_RUN = [
    '--no-progress',
    '--set', 'sim.grid_hw=130,130',
    '--set', 'sim.site_spacing_px=130',
    '--set', 'sim.frame_count=16',
    '--set', 'sim.cell_count=8',
    '--set', 'pipeline.train_samples=16',
    '--set', 'pipeline.test_samples=8',
    '--set', 'pipeline.centers_per_window=4',
    '--set', 'pipeline.val_fraction=0.5',
    '--set', 'train.epochs=1',
    '--set', 'train.warmup_epochs=0',
    '--set', 'train.batch_size=4',
    '--set', 'train.eta=0.001',
]


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for var in ENV_VARS:
        monkeypatch.setenv(var, 'unset')
        monkeypatch.delenv(var)


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(cli, [str(a) for a in args], catch_exceptions=False)


@pytest.fixture(scope='module')
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp('data')
    result = CliRunner().invoke(cli, ['gen-data', '--out', str(out), '--seed', '4', *SMALL_RUN])
    assert result.exit_code == 0, result.output
    return out / 'gen-data-001'


@pytest.fixture(scope='module')
def model_dir(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp('model')
    result = CliRunner().invoke(cli, ['train', '--data', str(data_dir), '--out', str(out), '--seed', '4', *SMALL_RUN])
    assert result.exit_code == 0, result.output
    return out / 'train-001'


class TestInformation:

    def test_help_lists_commands(self, runner):
        result = invoke(runner, '--help')
        assert result.exit_code == 0
        for command in ('gen-data', 'train', 'eval', 'bench-scaling', 'bench-batch', 'infer', 'match-hist', 'keys'):
            assert command in result.output

    def test_keys(self, runner):
        result = invoke(runner, 'keys')
        assert result.exit_code == 0
        assert 'train.eta' in result.output and '0.0002' in result.output

    def test_info(self, runner):
        result = invoke(runner, 'info')
        assert result.exit_code == 0
        assert 'Version' in result.output and 'Cores available' in result.output


class TestGenData:

    def test_outputs(self, data_dir):
        names = {p.name for p in data_dir.iterdir()}
        assert {'train.nwc', 'test.nwc', 'train_mosaics.vil', 'test_mosaics.vil', 'config.resolved',
                'manifest.json'} <= names
        assert len(read_dataset(data_dir / 'train.nwc')) == 16
        assert len(read_dataset(data_dir / 'test.nwc')) == 8
        manifest = json.loads((data_dir / 'manifest.json').read_text())
        assert manifest['command'] == 'gen-data' and manifest['seed'] == 4
        assert 'train.nwc' in manifest['files']
        assert 'seed = 4' in (data_dir / 'config.resolved').read_text()

    def test_repeat_is_byte_identical(self, runner, tmp_path, data_dir):
        result = invoke(runner, 'gen-data', '--out', tmp_path, '--seed', 4, *SMALL_RUN)
        assert result.exit_code == 0
        for name in ('train.nwc', 'test.nwc', 'train_mosaics.vil'):
            assert (tmp_path / 'gen-data-001' / name).read_bytes() == (data_dir / name).read_bytes()

    def test_zero_samples_is_config_error(self, runner, tmp_path):
        result = invoke(runner, 'gen-data', '--out', tmp_path, *SMALL_RUN, '--set', 'pipeline.train_samples=0')
        assert result.exit_code == 2
        assert not list(tmp_path.iterdir())

    def test_unknown_key(self, runner, tmp_path):
        result = invoke(runner, 'gen-data', '--out', tmp_path, '--set', 'train.epoch=3')
        assert result.exit_code == 2
        assert "unknown key" in result.output

    def test_config_file_line_number(self, runner, tmp_path):
        config = tmp_path / 'bad.cfg'
        config.write_text("seed = 1\ntrain.eta = fast\n")
        result = invoke(runner, 'gen-data', '--config', config, '--out', tmp_path)
        assert result.exit_code == 2
        assert 'line 2' in result.output


class TestTrain:

    def test_outputs(self, model_dir):
        for name in ('metrics.csv', 'summary.json', 'weights.nww', 'norm.json', 'trainer.ckpt', 'manifest.json'):
            assert (model_dir / name).is_file(), name
        rows = read_csv(model_dir / 'metrics.csv')
        assert list(rows[0]) == ['epoch', 'rank', 'phase', 'loss', 'lr', 'wall_seconds']
        assert {r['phase'] for r in rows} == {'train', 'val'}

    def test_repeat_gives_same_weights(self, runner, tmp_path, data_dir, model_dir):
        result = invoke(runner, 'train', '--data', data_dir, '--out', tmp_path, '--seed', 4, *SMALL_RUN)
        assert result.exit_code == 0
        assert (tmp_path / 'train-001' / 'weights.nww').read_bytes() == (model_dir / 'weights.nww').read_bytes()

    def test_two_workers(self, runner, tmp_path, data_dir):
        result = invoke(runner, 'train', '--data', data_dir, '--out', tmp_path, '--workers', 2, *SMALL_RUN)
        assert result.exit_code == 0
        summary = json.loads((tmp_path / 'train-001' / 'summary.json').read_text())
        assert summary['config']['workers'] == 2
        assert summary['steps'] == 2

    def test_missing_data_marks_run_failed(self, runner, tmp_path):
        empty = tmp_path / 'empty'
        empty.mkdir()
        result = invoke(runner, 'train', '--data', empty, '--out', tmp_path / 'runs', *SMALL_RUN)
        assert result.exit_code == 3
        failed = tmp_path / 'runs' / 'train-001' / 'FAILED'
        assert failed.is_file()
        assert 'DataError' in failed.read_text()

    def test_seed_flag_beats_environment(self, runner, tmp_path, data_dir, monkeypatch):
        monkeypatch.setenv('NOWCAST_SEED', '11')
        result = invoke(runner, 'train', '--data', data_dir, '--out', tmp_path, *SMALL_RUN)
        assert result.exit_code == 0
        assert 'seed = 11' in (tmp_path / 'train-001' / 'config.resolved').read_text()
        result = invoke(runner, 'train', '--data', data_dir, '--out', tmp_path, '--seed', 12, *SMALL_RUN)
        assert 'seed = 12' in (tmp_path / 'train-002' / 'config.resolved').read_text()


class TestEvaluationCommands:

    def test_eval(self, runner, tmp_path, data_dir, model_dir):
        result = invoke(runner, 'eval', '--model', model_dir, '--data', data_dir, '--out', tmp_path, *SMALL_RUN)
        assert result.exit_code == 0
        rows = read_csv(tmp_path / 'eval-001' / 'lead_time_mse.csv')
        assert len(rows) == 12
        assert {r['method'] for r in rows} == {'model', 'persistence'}
        assert sorted({int(r['lead_minutes']) for r in rows}) == [10, 20, 30, 40, 50, 60]

    def test_bench_scaling(self, runner, tmp_path, data_dir):
        result = invoke(runner, 'bench-scaling', '--data', data_dir, '--out', tmp_path, *SMALL_RUN,
                        '--set', 'eval.worker_counts=1,2')
        assert result.exit_code == 0
        rows = read_csv(tmp_path / 'bench-scaling-001' / 'scaling.csv')
        assert [r['N'] for r in rows] == ['1', '2']
        assert float(rows[0]['S']) == 1.0

    def test_bench_batch(self, runner, tmp_path, data_dir):
        result = invoke(runner, 'bench-batch', '--data', data_dir, '--out', tmp_path, *SMALL_RUN,
                        '--set', 'eval.batch_sizes=2,4,64')
        assert result.exit_code == 0
        rows = read_csv(tmp_path / 'bench-batch-001' / 'batch_sweep.csv')
        assert [r['batch'] for r in rows] == ['2', '4']

    def test_infer_and_match(self, runner, tmp_path, data_dir, model_dir):
        result = invoke(runner, 'infer', '--model', model_dir, '--mosaics', data_dir / 'test_mosaics.vil',
                        '--out', tmp_path, *SMALL_RUN)
        assert result.exit_code == 0
        forecast = read_mosaics(tmp_path / 'infer-001' / 'forecast.vil')
        assert len(forecast) == 6
        assert forecast.hw == (120, 120)
        assert forecast.timestamps.tolist() == [160, 170, 180, 190, 200, 210]

        result = invoke(runner, 'match-hist', '--forecast', tmp_path / 'infer-001' / 'forecast.vil',
                        '--reference', data_dir / 'test_mosaics.vil', '--out', tmp_path, *SMALL_RUN)
        assert result.exit_code == 0
        matched = read_mosaics(tmp_path / 'match-hist-001' / 'matched.vil')
        assert matched.hw == forecast.hw
        assert matched.timestamps.tolist() == forecast.timestamps.tolist()

    def test_infer_needs_history(self, runner, tmp_path, data_dir, model_dir):
        result = invoke(runner, 'infer', '--model', model_dir, '--mosaics', data_dir / 'test_mosaics.vil',
                        '--at', 3, '--out', tmp_path, *SMALL_RUN)
        assert result.exit_code == 3
        assert (tmp_path / 'infer-001' / 'FAILED').is_file()
