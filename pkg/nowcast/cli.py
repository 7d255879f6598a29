#!/usr/bin/env python3
"""
nowcast CLI - Main entry point for data generation, training, evaluation and benchmarks
"""

import functools
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import click
import numpy as np
from colorama import Fore, Style, init
from tabulate import tabulate

from nowcast import __version__
from nowcast.config import RunConfig, describe_keys
from nowcast.core.bench import SPEEDUP_HEADER, SWEEP_HEADER, batch_size_sweep, benchmark_scaling
from nowcast.core.errors import DataError, NowcastError
from nowcast.core.evaluation import (evaluate_forecasts, format_lead_time, infer_grid, lead_time_rows,
                                     match_forecast_sequence, write_forecast)
from nowcast.core.net import NowcastModel, build_model, load_weights, save_weights
from nowcast.core.patches import INPUT_FRAMES, NormStats, generate_datasets, read_dataset, write_dataset
from nowcast.core.storm_sim import MosaicSequence, digital_vil_quantize, read_mosaics, write_mosaics
from nowcast.core.tensor import center_crop
from nowcast.core.trainer import Trainer
from nowcast.utils import (atomic_write_text, create_run_dir, physical_cores, read_json, write_csv, write_json,
                           write_manifest)

logger = logging.getLogger(__name__)

# Initialize colorama
init()

RUN_DIR_KEY = 'nowcast.run_dir'
LEAD_TIME_HEADER = ('lead_minutes', 'method', 'mse')


def header(title: str):
    print(f"\n{Fore.MAGENTA}{'='*60}{Style.RESET_ALL}")
    print(f"{Fore.CYAN}{title}{Style.RESET_ALL}")
    print(f"{Fore.MAGENTA}{'='*60}{Style.RESET_ALL}\n")


class Run:
    """Run directory, resolved configuration and manifest for one command"""

    def __init__(self, command: str, config: RunConfig, run_dir: Path, progress: bool):
        self.command = command
        self.config = config
        self.run_dir = run_dir
        self.progress = progress
        self.files: List[str] = []

    @classmethod
    def start(cls, command: str, options: Dict) -> 'Run':
        config = RunConfig.load(options['config_file'], options['overrides'], seed=options['seed'],
                                workers=options['workers'], out_dir=options['out_dir'])
        run_dir = create_run_dir(config.out_dir, command)
        click.get_current_context().meta[RUN_DIR_KEY] = run_dir
        run = cls(command, config, run_dir, progress=not options['no_progress'])
        config.to_file(run.path('config.resolved'))
        logger.info(f"Starting {command} in {run_dir} (seed {config.seed}, {config.workers} worker(s))")
        return run

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.run_dir / name

    def finish(self):
        write_manifest(self.run_dir, self.command, self.config.seed, self.config.digest(),
                       self.files + ['manifest.json'])
        print(f"\n{Fore.GREEN}✅ Outputs written to {self.run_dir}{Style.RESET_ALL}")


def run_options(f):
    """Options shared by every command that produces a run directory"""
    options = [
        click.option('--config', 'config_file', type=click.Path(dir_okay=False), help='Flat section.key = value file'),
        click.option('--seed', type=click.IntRange(min=0), help='Master seed'),
        click.option('--out', 'out_dir', type=click.Path(file_okay=False), help='Parent directory for run outputs'),
        click.option('--workers', type=click.IntRange(min=1), help='Data-parallel workers / threads'),
        click.option('--set', 'overrides', multiple=True, metavar='SECTION.KEY=VALUE',
                     help='Override one config key (repeatable)'),
        click.option('--no-progress', is_flag=True, help='Hide progress bars'),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def reports_errors(f):
    """Turn nowcast errors into exit codes and a FAILED marker in the run directory"""

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except NowcastError as e:
            logger.error(f"{type(e).__name__}: {e}")
            _fail(e, e.exit_code)
        except Exception as e:
            logger.exception(f"Unexpected error: {e}")
            _fail(e, 1)

    return wrapper


def _fail(error: BaseException, code: int):
    ctx = click.get_current_context()
    run_dir = ctx.meta.get(RUN_DIR_KEY)
    if run_dir is not None:
        atomic_write_text(run_dir / 'FAILED', f"{type(error).__name__}: {error}\n")
    print(f"{Fore.RED}❌ {error}{Style.RESET_ALL}", file=sys.stderr)
    ctx.exit(code)


def _datasets(data_dir: str):
    root = Path(data_dir)
    missing = [name for name in ('train.nwc', 'test.nwc') if not (root / name).is_file()]
    if missing:
        raise DataError(f"{root} has no {', '.join(missing)}; is it a gen-data run directory?")
    return read_dataset(root / 'train.nwc'), read_dataset(root / 'test.nwc')


def _trained_model(run: Run, model_dir: str):
    """Model and normalization statistics from a train run directory"""
    root = Path(model_dir)
    model_config = run.config.model_config()
    model = NowcastModel(model_config, load_weights(root / 'weights.nww', model_config))
    norm_file = root / 'norm.json'
    if not norm_file.is_file():
        raise DataError(f"{norm_file} not found; is {root} a train run directory?")
    stats = read_json(norm_file)
    return model, NormStats(stats['mean'], stats['std'])


@click.group(epilog="Run 'nowcast keys' to list every configuration key with its default.")
@click.version_option(version=__version__)
@click.option('--verbose', '-v', 'verbosity', flag_value='verbose', help='Debug logging')
@click.option('--quiet', '-q', 'verbosity', flag_value='quiet', help='Warnings and errors only')
def cli(verbosity: Optional[str]):
    """nowcast - Precipitation nowcasting with data-parallel CNN training

    Every command reads defaults < --config file < NOWCAST_* environment < flags,
    and writes its outputs into a fresh run directory under --out.
    """
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    if verbosity == 'verbose':
        logging.getLogger().setLevel(logging.DEBUG)
    elif verbosity == 'quiet':
        logging.getLogger().setLevel(logging.WARNING)


@cli.command('gen-data')
@run_options
@reports_errors
def gen_data(**options):
    """Simulate mosaics and cut normalized train/test patch datasets"""

    header("🌧️  Generating datasets")
    run = Run.start('gen-data', options)
    config = run.config

    bundle = generate_datasets(config.sim_config(), config.pipeline_config(), workers=config.workers,
                               progress=run.progress)
    write_mosaics(run.path('train_mosaics.vil'), bundle.train_sequence)
    write_mosaics(run.path('test_mosaics.vil'), bundle.test_sequence)
    write_dataset(run.path('train.nwc'), bundle.train)
    write_dataset(run.path('test.nwc'), bundle.test)

    print(tabulate([
        ['Train samples', len(bundle.train)],
        ['Test samples', len(bundle.test)],
        ['Patch', f"{bundle.train.patch_px} px"],
        ['Mean', f"{bundle.train.norm.mean:.6f}"],
        ['Std', f"{bundle.train.norm.std:.6f}"],
        ['Coverage', f"{bundle.mask.mean():.1%}"],
    ], tablefmt='simple'))
    run.finish()


@cli.command()
@run_options
@click.option('--data', 'data_dir', required=True, type=click.Path(exists=True, file_okay=False),
              help='gen-data run directory')
@click.option('--resume', type=click.Path(exists=True, dir_okay=False), help='Checkpoint to continue from')
@reports_errors
def train(data_dir, resume, **options):
    """Train the network with synchronous data-parallel SGD"""

    header("🏋️  Training")
    run = Run.start('train', options)
    config = run.config
    train_set, test_set = _datasets(data_dir)
    model = build_model(config.model_config(), config.seed)
    train_config = config.train_config()

    if resume:
        trainer = Trainer.restore(resume, model, train_config, train_set, test_set, progress=run.progress)
    else:
        trainer = Trainer(model, train_config, train_set, test_set, progress=run.progress)
    report = trainer.run()

    report.write_metrics_csv(run.path('metrics.csv'))
    report.write_summary(run.path('summary.json'))
    save_weights(report.params, run.path('weights.nww'), model.config)
    write_json(run.path('norm.json'), {'mean': train_set.norm.mean, 'std': train_set.norm.std})
    trainer.checkpoint(run.path('trainer.ckpt'))

    train_means, val_means = report.epoch_means('train'), report.epoch_means('val')
    rows = [[epoch, train_means.get(epoch), val_means.get(epoch)] for epoch in sorted(val_means)]
    if rows:
        print(tabulate(rows, headers=['Epoch', 'Train loss', 'Val loss'], floatfmt='.6f'))
    print(f"\nSteps: {Fore.GREEN}{report.steps}{Style.RESET_ALL}  "
          f"Wall: {Fore.GREEN}{report.total_wall_seconds:.2f}s{Style.RESET_ALL}  "
          f"Throughput: {Fore.GREEN}{report.throughput:.1f} samples/s{Style.RESET_ALL}")
    if report.min_val_loss is not None:
        print(f"Min val loss: {Fore.GREEN}{report.min_val_loss:.6f}{Style.RESET_ALL} (epoch {report.best_epoch})")
    run.finish()


@cli.command('eval')
@run_options
@click.option('--model', 'model_dir', required=True, type=click.Path(exists=True, file_okay=False),
              help='train run directory')
@click.option('--data', 'data_dir', required=True, type=click.Path(exists=True, file_okay=False),
              help='gen-data run directory')
@reports_errors
def evaluate(model_dir, data_dir, **options):
    """Per-lead MSE of the model and of persistence on the held-out set"""

    header("📊 Evaluating forecasts")
    run = Run.start('eval', options)
    model, _ = _trained_model(run, model_dir)
    _, test_set = _datasets(data_dir)

    results = evaluate_forecasts(model, test_set, batch_size=run.config.eval.batch_size,
                                 crop=run.config.model.loss_crop_km)
    ordered = [results['model'], results['persistence']]
    write_csv(run.path('lead_time_mse.csv'), LEAD_TIME_HEADER, lead_time_rows(ordered))
    print(format_lead_time(ordered))
    run.finish()


@cli.command('bench-scaling')
@run_options
@click.option('--data', 'data_dir', required=True, type=click.Path(exists=True, file_okay=False),
              help='gen-data run directory')
@reports_errors
def bench_scaling(data_dir, **options):
    """Strong-scaling benchmark over eval.worker_counts"""

    header("⏱️  Scaling benchmark")
    run = Run.start('bench-scaling', options)
    config = run.config
    counts = list(config.eval.worker_counts)
    cores = physical_cores()
    if max(counts, default=1) > cores:
        logger.warning(f"Benchmarking up to {max(counts)} workers on {cores} available core(s)")

    train_set, test_set = _datasets(data_dir)
    result = benchmark_scaling(config.model_config(), config.train_config(), train_set, test_set, counts,
                               seed=config.seed, progress=run.progress)
    write_csv(run.path('scaling.csv'), SPEEDUP_HEADER, result.table.csv_rows())
    write_json(run.path('scaling_losses.json'), {str(n): loss for n, loss in result.min_val_losses().items()})
    print(result.table.format())
    run.finish()


@cli.command('bench-batch')
@run_options
@click.option('--data', 'data_dir', required=True, type=click.Path(exists=True, file_okay=False),
              help='gen-data run directory')
@reports_errors
def bench_batch(data_dir, **options):
    """Per-worker batch-size sweep over eval.batch_sizes"""

    header("⏱️  Batch-size sweep")
    run = Run.start('bench-batch', options)
    config = run.config
    train_set, test_set = _datasets(data_dir)
    result = batch_size_sweep(config.model_config(), config.train_config(), train_set, test_set,
                              config.eval.batch_sizes, seed=config.seed, progress=run.progress)
    write_csv(run.path('batch_sweep.csv'), SWEEP_HEADER, result.csv_rows())
    print(result.format())
    if result.skipped:
        print(f"{Fore.YELLOW}⚠️ Skipped batch sizes: {', '.join(map(str, result.skipped))}{Style.RESET_ALL}")
    run.finish()


@cli.command()
@run_options
@click.option('--model', 'model_dir', required=True, type=click.Path(exists=True, file_okay=False),
              help='train run directory')
@click.option('--mosaics', required=True, type=click.Path(exists=True, dir_okay=False),
              help='VIL1 mosaic sequence')
@click.option('--at', 'at_index', type=int, default=-1, show_default=True,
              help='Index of the newest input frame t0')
@reports_errors
def infer(model_dir, mosaics, at_index, **options):
    """Forecast six frames for a whole mosaic grid"""

    header("🛰️  Grid inference")
    run = Run.start('infer', options)
    model, norm = _trained_model(run, model_dir)
    sequence = read_mosaics(mosaics)
    if not -len(sequence) <= at_index < len(sequence):
        raise DataError(f"frame {at_index} is outside {mosaics} ({len(sequence)} frames)")
    t0 = at_index % len(sequence)
    if t0 < INPUT_FRAMES - 1:
        raise DataError(f"frame {at_index} has fewer than {INPUT_FRAMES - 1} predecessors in {mosaics}")

    frames = sequence.grids[t0 - INPUT_FRAMES + 1:t0 + 1]
    forecast = infer_grid(model, frames, norm, workers=run.config.workers, tile_px=run.config.eval.infer_tile_px)
    write_forecast(run.path('forecast.vil'), forecast, int(sequence.timestamps[t0]))

    print(f"Input: {Fore.GREEN}{sequence.hw[0]}x{sequence.hw[1]}{Style.RESET_ALL}  "
          f"Output: {Fore.GREEN}{forecast.frames.shape[0]}x{forecast.frames.shape[1]}{Style.RESET_ALL} "
          f"at offset {forecast.offset}  Tiles: {forecast.tiles}  Wall: {forecast.wall_seconds:.2f}s")
    run.finish()


@cli.command('match-hist')
@run_options
@click.option('--forecast', 'forecast_file', required=True, type=click.Path(exists=True, dir_okay=False),
              help='VIL1 forecast sequence')
@click.option('--reference', required=True, type=click.Path(exists=True, dir_okay=False),
              help='VIL1 sequence holding the initial-condition frame')
@click.option('--frame', 'frame_index', type=int, default=-1, show_default=True,
              help='Index of the reference frame')
@reports_errors
def match_hist(forecast_file, reference, frame_index, **options):
    """Match each forecast frame's local histograms to an observed frame"""

    header("🎚️  Histogram matching")
    run = Run.start('match-hist', options)
    forecast = read_mosaics(forecast_file)
    observed = read_mosaics(reference)
    if not len(forecast) or not len(observed):
        raise DataError("forecast and reference sequences must hold at least one frame")

    initial = observed.grids[frame_index].astype(np.float64)
    if initial.shape != forecast.hw:
        initial = center_crop(initial[None, ..., None], forecast.hw)[0, ..., 0]
    stack = np.moveaxis(forecast.grids, 0, -1).astype(np.float64)
    matched = match_forecast_sequence(stack, initial, run.config.hist_config())
    grids = np.moveaxis(digital_vil_quantize(matched, vmax=255.0), -1, 0)
    write_mosaics(run.path('matched.vil'), MosaicSequence(grids, forecast.timestamps.tolist()))

    rows = [[int(t), f"{before.mean():.3f}", f"{after.mean():.3f}"]
            for t, before, after in zip(forecast.timestamps, forecast.grids, grids)]
    print(tabulate(rows, headers=['Minutes', 'Mean before', 'Mean after']))
    run.finish()


@cli.command()
def keys():
    """List every configuration key with its default"""

    header("Configuration keys")
    print(tabulate(describe_keys(), headers=['Key', 'Default', 'Description']))


@cli.command()
def info():
    """Show nowcast system information"""

    header("nowcast System Information")
    print(f"Version: {__version__}")
    print(f"Python: {sys.version.split()[0]}")
    print(f"NumPy: {np.__version__}")
    print(f"Cores available: {physical_cores()}")
    print(f"BLAS: {_blas_name()}")

    print(f"\n{Fore.YELLOW}Dependencies:{Style.RESET_ALL}")
    deps = {
        'numpy': 'Numerics',
        'click': 'CLI',
        'colorama': 'Colored output',
        'tqdm': 'Progress bars',
        'tabulate': 'Tables',
        'pydantic': 'Config validation',
        'dotenv': 'Environment files',
    }
    for module, description in deps.items():
        try:
            __import__(module)
            print(f"  ✅ {description} ({module})")
        except ImportError:
            print(f"  ❌ {description} ({module})")


def _blas_name() -> str:
    try:
        config = np.show_config(mode='dicts')
        return config['Build Dependencies']['blas']['name']
    except (TypeError, KeyError):
        return 'unknown'


if __name__ == '__main__':
    cli()
