"""
Synchronous data-parallel training

N worker threads each own a replica of the weights, a contiguous shard of
the training set and a Workspace. Every optimizer step they meet at one
barrier whose action averages the gradient sums in rank order; each worker
then applies the same update to its own replica, so replicas stay
bit-identical.
"""

import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .container import ContainerReader, ContainerWriter
from .errors import (ConfigError, ConfigHashMismatch, DataError, DivergenceError, NonFiniteGradient, NowcastError,
                     PayloadMismatch, ShapeError)
from .net import ModelConfig, NowcastModel, weights_from_bytes, weights_to_bytes
from .patches import PatchDataset, shard, validation_subsample
from .tensor import GradientSet, ParameterSet, Workspace

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'NWC-CKPT1'
CHECKPOINT_VERSION = 1

METRICS_HEADER = ('epoch', 'rank', 'phase', 'loss', 'lr', 'wall_seconds')


class LrPolicy(str, Enum):
    SCALE_UP = 'scale_up'
    SCALE_DOWN = 'scale_down'
    NONE = 'none'


@dataclass(frozen=True)
class TrainConfig:
    """Training settings; `workers` is N and `batch_size` the per-worker n"""

    workers: int = 1
    batch_size: int = 8
    eta: float = 0.0002
    warmup_epochs: int = 5
    epochs: int = 10
    lr_policy: LrPolicy = LrPolicy.SCALE_UP
    seed: int = 0
    shuffle: bool = True
    momentum: float = 0.0
    max_steps: Optional[int] = None
    precision: int = 64
    audit_replicas: bool = False
    val_fraction: float = 0.3

    def __post_init__(self):
        try:
            object.__setattr__(self, 'lr_policy', LrPolicy(self.lr_policy))
        except ValueError:
            choices = ', '.join(p.value for p in LrPolicy)
            raise ConfigError(f"lr_policy must be one of {choices}, got {self.lr_policy!r}")
        if self.workers < 1 or self.batch_size < 1:
            raise ConfigError("workers and batch_size must be at least 1")
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs and warmup_epochs must be non-negative")
        if self.epochs > 0 and self.warmup_epochs > self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) exceeds epochs ({self.epochs})")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be non-negative")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if not 0 < self.val_fraction <= 1:
            raise ConfigError(f"val_fraction must be in (0, 1], got {self.val_fraction}")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32


def lr_at(epoch: int, config: TrainConfig) -> float:
    """
    Learning rate for an epoch

    Warmup interpolates linearly from eta at epoch 0 to the policy target at
    `warmup_epochs`; the target holds from then on.
    """
    workers = config.workers
    if config.lr_policy is LrPolicy.SCALE_UP:
        target = config.eta * workers
    elif config.lr_policy is LrPolicy.SCALE_DOWN:
        target = config.eta / workers
    else:
        target = config.eta
    if epoch < config.warmup_epochs:
        return config.eta + (epoch / config.warmup_epochs) * (target - config.eta)
    return target


def allreduce_average(grad_sums: Sequence[GradientSet], n: int, N: int,
                      batch_sizes: Optional[Sequence[int]] = None) -> GradientSet:
    """
    Average per-worker gradient sums: (sum over ranks) / (n * N)

    Summation runs in rank order 0..N-1 whatever order the workers arrived
    in, so the result is reproducible bit for bit.
    """
    if len(grad_sums) != N:
        raise ShapeError('allreduce', f"expected {N} gradient sets, got {len(grad_sums)}")
    if batch_sizes is not None:
        for rank, size in enumerate(batch_sizes):
            if size != n:
                raise ShapeError('allreduce', f"rank {rank} reduced a batch of {size} samples, expected {n}")
    reference = grad_sums[0].structure()
    for rank, grads in enumerate(grad_sums[1:], 1):
        if grads.structure() != reference:
            raise ShapeError('allreduce', f"gradient structure of rank {rank} differs from rank 0")

    items = []
    for name, first in grad_sums[0]:
        total = np.array(first, copy=True)
        for grads in grad_sums[1:]:
            total += grads[name]
        total /= n * N
        items.append((name, total))
    return GradientSet(items)


def sgd_step(params: ParameterSet, grads: GradientSet, lr: float, velocity: Optional[ParameterSet] = None,
             momentum: float = 0.0) -> ParameterSet:
    """
    One SGD update, returning new weights

    With momentum the velocity buffers are updated in place
    (v = momentum * v + g) and the step uses v instead of g.
    """
    if params.structure() != grads.structure():
        raise ShapeError('sgd', "gradient structure does not match the parameters")
    for name, g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)

    items = []
    for name, w in params:
        step = grads[name]
        if velocity is not None and momentum > 0:
            v = velocity[name]
            v *= momentum
            v += step
            step = v
        items.append((name, (w - lr * step).astype(w.dtype, copy=False)))
    return ParameterSet(items)


# =============================================================================
# Metrics and reports
# =============================================================================

@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    rank: int
    phase: str
    loss: float
    lr: float
    wall_seconds: float

    def row(self) -> Tuple:
        return (self.epoch, self.rank, self.phase, repr(self.loss), repr(self.lr), f"{self.wall_seconds:.6f}")


@dataclass
class TrainingReport:
    config: TrainConfig
    records: List[MetricsRecord]
    total_wall_seconds: float
    steps: int
    samples_trained: int
    params: ParameterSet
    replica_digests: List[str] = field(default_factory=list)

    def phase(self, phase: str) -> List[MetricsRecord]:
        return [r for r in self.records if r.phase == phase]

    def epoch_means(self, phase: str) -> Dict[int, float]:
        """Mean loss per epoch across workers"""
        grouped: Dict[int, List[float]] = {}
        for record in self.phase(phase):
            grouped.setdefault(record.epoch, []).append(record.loss)
        return {epoch: float(np.mean(losses)) for epoch, losses in sorted(grouped.items())}

    @property
    def min_val_loss(self) -> Optional[float]:
        means = self.epoch_means('val')
        return min(means.values()) if means else None

    @property
    def best_epoch(self) -> Optional[int]:
        means = self.epoch_means('val')
        return min(means, key=means.get) if means else None

    @property
    def throughput(self) -> float:
        """Training samples per wall-clock second"""
        if self.total_wall_seconds <= 0:
            return 0.0
        return self.samples_trained / self.total_wall_seconds

    def write_metrics_csv(self, path: Union[str, Path]):
        from nowcast.utils import write_csv

        write_csv(path, METRICS_HEADER, (r.row() for r in self.records))

    def summary(self) -> Dict:
        train_means = self.epoch_means('train')
        val_means = self.epoch_means('val')
        return {
            'config': asdict(self.config),
            'steps': self.steps,
            'samples_trained': self.samples_trained,
            'total_wall_seconds': self.total_wall_seconds,
            'throughput_samples_per_s': self.throughput,
            'min_val_loss': self.min_val_loss,
            'best_epoch': self.best_epoch,
            'weights_md5': self.params.digest(),
            'epochs': [{'epoch': e, 'train_loss': train_means.get(e), 'val_loss': val_means.get(e)}
                       for e in sorted(set(train_means) | set(val_means))],
        }

    def write_summary(self, path: Union[str, Path]):
        from nowcast.utils import write_json

        write_json(path, self.summary())


# =============================================================================
# Trainer state and checkpoints
# =============================================================================

@dataclass
class TrainerState:
    """Everything needed to continue a run at the start of `epoch`"""

    epoch: int
    iteration: int
    params: ParameterSet
    velocity: Optional[ParameterSet]
    rng_states: List[Dict]

    @property
    def workers(self) -> int:
        return len(self.rng_states)


def _generator(state: Dict) -> np.random.Generator:
    bit_generator = np.random.PCG64()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


def checkpoint_to_bytes(state: TrainerState, model_config: ModelConfig, batch_size: int) -> bytes:
    from nowcast.utils import config_digest

    writer = ContainerWriter(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    writer.u64(config_digest(model_config)).u32(state.workers).u32(batch_size)
    writer.u32(state.epoch).u64(state.iteration)
    writer.blob(json.dumps(state.rng_states, sort_keys=True).encode('utf-8'))
    writer.blob(weights_to_bytes(state.params, model_config))
    writer.u8(0 if state.velocity is None else 1)
    if state.velocity is not None:
        writer.blob(weights_to_bytes(state.velocity, model_config))
    return writer.getvalue()


def checkpoint_from_bytes(data: bytes, model_config: ModelConfig, config: TrainConfig,
                          source: str = '<bytes>') -> TrainerState:
    from nowcast.utils import config_digest

    reader = ContainerReader(data, CHECKPOINT_MAGIC, (CHECKPOINT_VERSION,), source)
    stored_hash = reader.u64()
    if stored_hash != config_digest(model_config):
        raise ConfigHashMismatch(f"{source}: checkpoint belongs to model config {stored_hash:016x}")
    workers, batch_size = reader.u32(), reader.u32()
    if workers != config.workers or batch_size != config.batch_size:
        raise ConfigHashMismatch(f"{source}: checkpoint was written with N={workers}, n={batch_size}; "
                                 f"config has N={config.workers}, n={config.batch_size}")
    epoch, iteration = reader.u32(), reader.u64()
    try:
        rng_states = json.loads(reader.blob().decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise PayloadMismatch(f"{source}: unreadable generator states ({e})")
    if not isinstance(rng_states, list) or len(rng_states) != workers:
        raise PayloadMismatch(f"{source}: expected {workers} generator states")
    params = weights_from_bytes(reader.blob(), model_config, source)
    velocity = weights_from_bytes(reader.blob(), model_config, source) if reader.u8() else None
    reader.expect_end()
    return TrainerState(epoch, iteration, params, velocity, rng_states)


def save_checkpoint(state: TrainerState, path: Union[str, Path], model_config: ModelConfig, batch_size: int):
    from nowcast.utils import atomic_write_bytes

    atomic_write_bytes(path, checkpoint_to_bytes(state, model_config, batch_size))
    logger.info(f"Checkpoint for epoch {state.epoch} written to {path}")


def load_checkpoint(path: Union[str, Path], model_config: ModelConfig, config: TrainConfig) -> TrainerState:
    with open(path, 'rb') as f:
        return checkpoint_from_bytes(f.read(), model_config, config, str(path))


# =============================================================================
# Trainer
# =============================================================================

class Trainer:
    """
    Runs the synchronous data-parallel epoch loop

    Args:
        model: supplies the config, the initial weights and the cached graph
        config: training settings
        train: normalized training patches, sharded contiguously over workers
        test: patches for per-epoch validation
        state: resume point from a checkpoint; a fresh state otherwise
        progress: show a tqdm bar over epochs
    """

    def __init__(self, model: NowcastModel, config: TrainConfig, train: PatchDataset, test: PatchDataset,
                 state: Optional[TrainerState] = None, progress: bool = False):
        self.model = model
        self.config = config
        self.train_set = train
        self.test_set = test
        self.progress = progress

        if train.patch_px != test.patch_px:
            raise DataError(f"train patches are {train.patch_px} px, test patches {test.patch_px} px")
        workers, n = config.workers, config.batch_size
        self.shards = [shard(len(train), workers, rank) for rank in range(workers)]
        smallest = min(len(s) for s in self.shards)
        self.steps_per_epoch = smallest // n
        if self.steps_per_epoch == 0:
            raise DataError(f"batch size {n} exceeds the smallest shard ({smallest} samples) "
                            f"for {workers} workers")
        self.val_indices = [validation_subsample(len(test), config.val_fraction, config.seed, rank)
                            for rank in range(workers)]
        model.graph((train.patch_px, train.patch_px))

        self.state = state if state is not None else self.initial_state()
        if self.state.workers != workers:
            raise ConfigHashMismatch(f"state holds {self.state.workers} workers, config has {workers}")

    def initial_state(self) -> TrainerState:
        dtype = self.config.dtype
        params = ParameterSet((name, np.array(a, dtype=dtype, copy=True)) for name, a in self.model.params)
        velocity = None
        if self.config.momentum > 0:
            velocity = ParameterSet((name, np.zeros_like(a)) for name, a in params)
        rng_states = [np.random.default_rng([self.config.seed, rank]).bit_generator.state
                      for rank in range(self.config.workers)]
        return TrainerState(0, 0, params, velocity, rng_states)

    @classmethod
    def restore(cls, path: Union[str, Path], model: NowcastModel, config: TrainConfig, train: PatchDataset,
                test: PatchDataset, progress: bool = False) -> 'Trainer':
        state = load_checkpoint(path, model.config, config)
        if state.params.dtype != np.dtype(config.dtype):
            raise ConfigHashMismatch(f"{path}: checkpoint holds {state.params.dtype} weights, "
                                     f"config asks for {config.precision}-bit")
        logger.info(f"Restored checkpoint {path} at epoch {state.epoch}, step {state.iteration}")
        return cls(model, config, train, test, state=state, progress=progress)

    def checkpoint(self, path: Union[str, Path]):
        save_checkpoint(self.state, path, self.model.config, self.config.batch_size)

    def run(self, until_epoch: Optional[int] = None) -> TrainingReport:
        """Train from the current state up to `until_epoch` (default: all epochs)"""
        config = self.config
        workers = config.workers
        end = config.epochs if until_epoch is None else min(until_epoch, config.epochs)
        first = self.state.epoch

        self._replicas = [self.state.params.copy() for _ in range(workers)]
        self._velocities = [self.state.velocity.copy() if self.state.velocity is not None else None
                            for _ in range(workers)]
        self._rngs = [_generator(s) for s in self.state.rng_states]
        self._slots: List[Optional[Tuple[float, GradientSet, int]]] = [None] * workers
        self._digests: List[Optional[str]] = [None] * workers
        self._audit: List[str] = []
        self._reduced: Optional[GradientSet] = None
        self._step = self.state.iteration
        self._records: List[MetricsRecord] = []
        self._records_lock = threading.Lock()
        self._barrier = threading.Barrier(workers, action=self._reduce)
        self._start = time.monotonic()

        logger.info(f"Training epochs {first}..{end - 1} on {workers} worker(s), "
                    f"batch {config.batch_size}, {self.steps_per_epoch} steps/epoch")
        finished: Dict[int, Tuple[int, int]] = {}
        errors: List[BaseException] = []
        with tqdm(total=max(end - first, 0), desc="Training", unit="epoch", disable=not self.progress) as bar:
            with ThreadPoolExecutor(max_workers=workers, thread_name_prefix='nowcast-worker') as executor:
                futures = {executor.submit(self._worker, rank, first, end, bar): rank for rank in range(workers)}
                for future in as_completed(futures):
                    try:
                        finished[futures[future]] = future.result()
                    except threading.BrokenBarrierError:
                        pass
                    except BaseException as e:
                        errors.append(e)
        if errors:
            raise errors[0]
        if len(finished) != workers:
            raise NowcastError("a training worker stopped without reporting an error")

        if config.audit_replicas:
            self._check_replicas()
        wall = time.monotonic() - self._start
        epoch, iteration = finished[0]
        steps = iteration - self.state.iteration
        self.state = TrainerState(epoch, iteration, self._replicas[0], self._velocities[0],
                                  [r.bit_generator.state for r in self._rngs])

        records = sorted(self._records, key=lambda r: (r.epoch, r.phase, r.rank))
        report = TrainingReport(config, records, wall, steps, steps * config.batch_size * workers,
                                self.state.params, self._audit)
        logger.info(f"Training finished: {steps} steps in {wall:.2f}s "
                    f"({report.throughput:.1f} samples/s), min val loss {report.min_val_loss}")
        return report

    # -------------------------------------------------------------------------
    # worker side
    # -------------------------------------------------------------------------

    def _worker(self, rank: int, first: int, end: int, bar) -> Tuple[int, int]:
        try:
            return self._work(rank, first, end, bar)
        except BaseException:
            self._barrier.abort()
            raise

    def _work(self, rank: int, first: int, end: int, bar) -> Tuple[int, int]:
        config = self.config
        n = config.batch_size
        patch = self.train_set.patch_px
        workspace = Workspace(self.model.graph((patch, patch)))
        rows = self.shards[rank]
        rng = self._rngs[rank]
        iteration = self.state.iteration

        epoch = first
        while epoch < end:
            if config.max_steps is not None and iteration >= config.max_steps:
                break
            lr = lr_at(epoch, config)
            order = rng.permutation(len(rows)) if config.shuffle else np.arange(len(rows))
            steps = self.steps_per_epoch
            if config.max_steps is not None:
                steps = min(steps, config.max_steps - iteration)

            losses = []
            for step in range(steps):
                index = rows.start + order[step * n:(step + 1) * n]
                loss, grads = self.model.loss_and_gradients(self.train_set.X[index], self.train_set.Y[index],
                                                            params=self._replicas[rank], workspace=workspace)
                # sum of per-sample gradients = n * gradient of the batch-mean loss
                self._slots[rank] = (loss, GradientSet((name, g * n) for name, g in grads), len(index))
                self._barrier.wait()
                self._replicas[rank] = sgd_step(self._replicas[rank], self._reduced, lr,
                                                self._velocities[rank], config.momentum)
                if config.audit_replicas:
                    self._digests[rank] = self._replicas[rank].digest()
                losses.append(loss)
                iteration += 1

            train_loss = float(np.mean(losses)) if losses else None
            if train_loss is not None:
                self._record(epoch, rank, 'train', train_loss, lr)
            val_loss = self._validate(rank, workspace)
            self._record(epoch, rank, 'val', val_loss, lr)
            if rank == 0:
                shown = "n/a" if train_loss is None else f"{train_loss:.6f}"
                logger.info(f"Epoch {epoch + 1}/{config.epochs}: train loss {shown}, "
                            f"val loss {val_loss:.6f}, lr {lr:.6g}")
                bar.update(1)
            epoch += 1
        return epoch, iteration

    def _validate(self, rank: int, workspace: Workspace) -> float:
        indices = self.val_indices[rank]
        size = self.config.batch_size
        total = 0.0
        for start in range(0, len(indices), size):
            chunk = indices[start:start + size]
            total += self.model.loss(self.test_set.X[chunk], self.test_set.Y[chunk],
                                     params=self._replicas[rank], workspace=workspace) * len(chunk)
        loss = total / len(indices)
        if not math.isfinite(loss):
            raise DivergenceError(f"validation loss is {loss} on worker {rank}")
        return loss

    def _record(self, epoch: int, rank: int, phase: str, loss: float, lr: float):
        record = MetricsRecord(epoch, rank, phase, float(loss), float(lr), time.monotonic() - self._start)
        with self._records_lock:
            self._records.append(record)

    # -------------------------------------------------------------------------
    # barrier action: runs on exactly one thread while all workers wait
    # -------------------------------------------------------------------------

    def _reduce(self):
        for rank, (loss, _, _) in enumerate(self._slots):
            if not math.isfinite(loss):
                raise DivergenceError(f"training loss is {loss} on worker {rank} at step {self._step}")
        if self.config.audit_replicas:
            self._check_replicas()
        self._reduced = allreduce_average([slot[1] for slot in self._slots], self.config.batch_size,
                                          self.config.workers, batch_sizes=[slot[2] for slot in self._slots])
        self._step += 1

    def _check_replicas(self):
        digests = self._digests
        if digests[0] is None:
            return
        if len(set(digests)) != 1:
            raise DivergenceError(f"replicas diverged after step {len(self._audit) + self.state.iteration}: "
                                  f"{digests}")
        self._audit.append(digests[0])
        self._digests = [None] * len(digests)


def train(config: TrainConfig, train_dataset: PatchDataset, test_dataset: PatchDataset, model: NowcastModel,
          progress: bool = False) -> TrainingReport:
    """Run a full training from freshly initialised state"""
    return Trainer(model, config, train_dataset, test_dataset, progress=progress).run()
