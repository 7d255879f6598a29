"""
Scaling and batch-size benchmarks

Runs the trainer repeatedly with one setting varied and tabulates wall time,
speedups and the best validation loss of each run. Runs execute one after
another so they do not compete for cores.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from tabulate import tabulate
from tqdm import tqdm

from .errors import ConfigError
from .net import ModelConfig, build_model
from .patches import PatchDataset, shard
from .trainer import TrainConfig, TrainingReport, train

logger = logging.getLogger(__name__)

SPEEDUP_HEADER = ('N', 'T_seconds', 'S', 'R', 'E', 'samples_per_s')
SWEEP_HEADER = ('batch', 'T_seconds', 'min_val_loss')
DEFAULT_BATCH_SIZES = (8, 16, 32, 64, 128)


@dataclass(frozen=True)
class SpeedupRow:
    workers: int
    seconds: float
    speedup: float
    relative: Optional[float]
    efficiency: float
    throughput: Optional[float] = None

    def as_row(self) -> Tuple:
        return (self.workers, self.seconds, self.speedup, self.relative, self.efficiency, self.throughput)


@dataclass
class SpeedupTable:
    """S(N) = T(1)/T(N); R(N) = T(previous N)/T(N); E(N) = S(N)/N"""

    rows: List[SpeedupRow]

    def __getitem__(self, workers: int) -> SpeedupRow:
        for row in self.rows:
            if row.workers == workers:
                return row
        raise KeyError(workers)

    def csv_rows(self) -> List[Tuple]:
        return [row.as_row() for row in self.rows]

    def format(self, tablefmt: str = 'simple') -> str:
        table = [[r.workers, f"{r.seconds:.3f}", f"{r.speedup:.3f}",
                  '-' if r.relative is None else f"{r.relative:.3f}", f"{r.efficiency:.1%}",
                  '-' if r.throughput is None else f"{r.throughput:.1f}"] for r in self.rows]
        return tabulate(table, headers=['Workers', 'Time (s)', 'Speedup', 'Relative', 'Efficiency', 'Samples/s'],
                        tablefmt=tablefmt)


def speedup_table(times: Sequence[Tuple[int, float]],
                  throughputs: Optional[Dict[int, float]] = None) -> SpeedupTable:
    """
    Build a speedup table from (workers, wall seconds) measurements

    Args:
        times: measurements with strictly increasing worker counts, starting at 1
        throughputs: optional samples/s per worker count

    Returns:
        SpeedupTable with one row per measurement
    """
    if not times or times[0][0] != 1:
        raise ConfigError("speedup table needs a single-worker measurement first")
    counts = [n for n, _ in times]
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise ConfigError(f"worker counts must be strictly increasing, got {counts}")
    if any(t <= 0 for _, t in times):
        raise ConfigError("wall times must be positive")

    base = times[0][1]
    rows = []
    previous = None
    for workers, seconds in times:
        speedup = base / seconds
        rows.append(SpeedupRow(workers, seconds, speedup, None if previous is None else previous / seconds,
                               speedup / workers, (throughputs or {}).get(workers)))
        previous = seconds
    return SpeedupTable(rows)


@dataclass
class ScalingResult:
    table: SpeedupTable
    reports: Dict[int, TrainingReport] = field(default_factory=dict)

    def min_val_losses(self) -> Dict[int, Optional[float]]:
        return {workers: report.min_val_loss for workers, report in self.reports.items()}


def benchmark_scaling(model_config: ModelConfig, config: TrainConfig, train_set: PatchDataset,
                      test_set: PatchDataset, worker_counts: Sequence[int], seed: int = 0,
                      progress: bool = False) -> ScalingResult:
    """Train once per worker count, everything else identical, and tabulate the speedups"""
    counts = sorted(set(worker_counts))
    if 1 not in counts:
        raise ConfigError("worker_counts must include 1")

    reports = {}
    for workers in tqdm(counts, desc="Scaling runs", disable=not progress):
        model = build_model(model_config, seed)
        report = train(replace(config, workers=workers), train_set, test_set, model)
        reports[workers] = report
        logger.info(f"{workers} worker(s): {report.total_wall_seconds:.2f}s, "
                    f"{report.throughput:.1f} samples/s, min val loss {report.min_val_loss}")

    table = speedup_table([(n, reports[n].total_wall_seconds) for n in counts],
                          {n: reports[n].throughput for n in counts})
    return ScalingResult(table, reports)


@dataclass(frozen=True)
class SweepRow:
    batch_size: int
    seconds: float
    min_val_loss: Optional[float]


@dataclass
class SweepResult:
    rows: List[SweepRow]
    skipped: List[int] = field(default_factory=list)

    def csv_rows(self) -> List[Tuple]:
        return [(r.batch_size, r.seconds, r.min_val_loss) for r in self.rows]

    def format(self, tablefmt: str = 'simple') -> str:
        table = [[r.batch_size, f"{r.seconds:.3f}", '-' if r.min_val_loss is None else f"{r.min_val_loss:.6f}"]
                 for r in self.rows]
        return tabulate(table, headers=['Batch', 'Time (s)', 'Min val loss'], tablefmt=tablefmt)


def batch_size_sweep(model_config: ModelConfig, config: TrainConfig, train_set: PatchDataset,
                     test_set: PatchDataset, sizes: Sequence[int] = DEFAULT_BATCH_SIZES, seed: int = 0,
                     progress: bool = False) -> SweepResult:
    """Train once per per-worker batch size; sizes larger than a shard are skipped"""
    smallest = min(len(shard(len(train_set), config.workers, rank)) for rank in range(config.workers))
    result = SweepResult([])
    for size in tqdm(sorted(set(sizes)), desc="Batch sweep", disable=not progress):
        if size > smallest:
            logger.warning(f"Skipping batch size {size}: the smallest shard holds {smallest} samples")
            result.skipped.append(size)
            continue
        model = build_model(model_config, seed)
        report = train(replace(config, batch_size=size), train_set, test_set, model)
        result.rows.append(SweepRow(size, report.total_wall_seconds, report.min_val_loss))
        logger.info(f"Batch {size}: {report.total_wall_seconds:.2f}s, min val loss {report.min_val_loss}")
    return result
