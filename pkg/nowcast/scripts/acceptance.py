#!/usr/bin/env python3
"""
Long-running reproductions
Checks that a trained tiny model beats persistence and that training scales across cores
"""

import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import click
from colorama import Fore, Style, init

# Add repository root to path
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from nowcast.config import RunConfig
from nowcast.core.bench import ScalingResult, benchmark_scaling
from nowcast.core.evaluation import LeadTimeMSE, evaluate_forecasts, format_lead_time
from nowcast.core.net import build_model
from nowcast.core.patches import generate_datasets
from nowcast.core.trainer import train
from nowcast.utils import physical_cores

# Initialize colorama
init()

logger = logging.getLogger(__name__)

PERSISTENCE_SETTINGS = [
    'train.epochs=40',
    'train.warmup_epochs=0',
    'train.eta=0.001',
    'train.momentum=0.9',
    'train.lr_policy=none',
]

SCALING_SETTINGS = [
    'pipeline.train_samples=512',
    'pipeline.test_samples=64',
    'train.epochs=2',
    'train.warmup_epochs=0',
    'train.batch_size=8',
]


@dataclass
class PersistenceCheck:
    model: LeadTimeMSE
    persistence: LeadTimeMSE

    @property
    def gaps(self) -> List[float]:
        return [p - m for m, p in zip(self.model.mse, self.persistence.mse)]

    @property
    def passed(self) -> bool:
        gaps = self.gaps
        return all(g > 0 for g in gaps) and gaps[-1] > gaps[0]


@dataclass
class ScalingCheck:
    result: ScalingResult
    thresholds: Dict[int, float] = field(default_factory=lambda: {2: 1.5, 4: 2.5})

    @property
    def passed(self) -> bool:
        measured = {row.workers: row.speedup for row in self.result.table.rows}
        return all(measured.get(n, 0.0) >= s for n, s in self.thresholds.items() if n in measured)


def beats_persistence(config: RunConfig, progress: bool = False) -> PersistenceCheck:
    """Train the configured model and compare per-lead MSE with persistence on held-out patches"""
    bundle = generate_datasets(config.sim_config(), config.pipeline_config(), workers=config.workers,
                               progress=progress)
    model = build_model(config.model_config(), config.seed)
    report = train(config.train_config(), bundle.train, bundle.test, model, progress=progress)
    logger.info(f"Trained {report.steps} steps in {report.total_wall_seconds:.1f}s, "
                f"min val loss {report.min_val_loss}")
    results = evaluate_forecasts(model.with_params(report.params), bundle.test, batch_size=config.eval.batch_size,
                                 crop=config.model.loss_crop_km)
    return PersistenceCheck(results['model'], results['persistence'])


def scaling_check(config: RunConfig, worker_counts: Sequence[int], progress: bool = False) -> ScalingCheck:
    """Strong scaling with the total work per epoch held fixed"""
    bundle = generate_datasets(config.sim_config(), config.pipeline_config(), workers=config.workers,
                               progress=progress)
    result = benchmark_scaling(config.model_config(), config.train_config(), bundle.train, bundle.test,
                               worker_counts, seed=config.seed, progress=progress)
    return ScalingCheck(result)


def _verdict(passed: bool):
    if passed:
        print(f"\n{Fore.GREEN}✅ PASSED{Style.RESET_ALL}")
    else:
        print(f"\n{Fore.RED}❌ FAILED{Style.RESET_ALL}")
        sys.exit(1)


@click.group()
def main():
    """Minutes-long acceptance reproductions"""
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')


@main.command('beats-persistence')
@click.option('--seed', type=int, default=0, help='Master seed')
@click.option('--workers', type=int, default=min(4, physical_cores()), help='Data-parallel workers')
@click.option('--set', 'overrides', multiple=True, metavar='SECTION.KEY=VALUE', help='Extra config overrides')
def persistence_command(seed, workers, overrides):
    """Tiny model vs persistence at every lead time"""

    print(f"\n{Fore.MAGENTA}{'='*60}{Style.RESET_ALL}")
    print(f"{Fore.CYAN}🌧️  Model vs persistence{Style.RESET_ALL}")
    print(f"{Fore.MAGENTA}{'='*60}{Style.RESET_ALL}\n")

    config = RunConfig.load(overrides=PERSISTENCE_SETTINGS + list(overrides), seed=seed, workers=workers)
    check = beats_persistence(config, progress=True)
    print(format_lead_time([check.model, check.persistence]))
    print(f"\nGap at 10 min: {check.gaps[0]:.6f}   Gap at 60 min: {check.gaps[-1]:.6f}")
    _verdict(check.passed)


@main.command('scaling')
@click.option('--seed', type=int, default=0, help='Master seed')
@click.option('--counts', default='1,2,4', show_default=True, help='Comma-separated worker counts')
@click.option('--set', 'overrides', multiple=True, metavar='SECTION.KEY=VALUE', help='Extra config overrides')
def scaling_command(seed, counts, overrides):
    """Strong-scaling speedups of the tiny model"""

    print(f"\n{Fore.MAGENTA}{'='*60}{Style.RESET_ALL}")
    print(f"{Fore.CYAN}⏱️  Strong scaling{Style.RESET_ALL}")
    print(f"{Fore.MAGENTA}{'='*60}{Style.RESET_ALL}\n")

    worker_counts = [int(c) for c in counts.split(',') if c.strip()]
    cores = physical_cores()
    if max(worker_counts) > cores:
        print(f"{Fore.YELLOW}⚠️ Only {cores} core(s) available; speedups will be limited{Style.RESET_ALL}")

    config = RunConfig.load(overrides=SCALING_SETTINGS + list(overrides), seed=seed)
    check = scaling_check(config, worker_counts, progress=True)
    print(check.result.table.format())
    _verdict(check.passed)


if __name__ == '__main__':
    main()
