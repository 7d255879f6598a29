"""
Encoder/decoder nowcasting network

Fully convolutional, unpadded U-shaped network: encoder stages of valid 3x3
convolutions with stride-2 downsampling, a bottleneck, and a decoder that
upsamples, center-crops the matching skip and concatenates. Output heads at
2, 4 and 8 km chain coarse-to-fine; at 1 km the final convolutions act as the
head. Every head predicts 6 lead times.
"""

import logging
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .container import ContainerReader, ContainerWriter, float_code, float_dtype
from .errors import ConfigError, ConfigHashMismatch, NegativeExtent, OddCrop, PayloadMismatch, ShapeError
from .tensor import (Graph, GradientSet, ParameterSet, ParamSpec, Workspace, avgpool, center_crop,
                     mse_cropped)

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b'NWW1'
WEIGHTS_VERSION = 1

LOSS_NODE = 'loss'


# =============================================================================
# Configuration
# =============================================================================

@dataclass(frozen=True)
class EncoderStage:
    conv_count: int
    channels: int
    kernel: int = 3


@dataclass(frozen=True)
class ModelConfig:
    """
    Network layout

    `decoder_channels` lists one width per encoder stage, coarse to fine.
    Heads exist at every resolution level below `head_levels` (level 0 is
    1 km); the bottleneck carries one only when its level qualifies.
    """

    encoder: Tuple[EncoderStage, ...]
    bottleneck_channels: int
    decoder_channels: Tuple[int, ...]
    final_channels: Tuple[int, ...]
    head_levels: int
    input_frames: int = 7
    output_frames: int = 6
    kernel: int = 3
    down_kernel: int = 2
    down_stride: int = 2
    head_kernel: int = 1
    loss_crop_km: int = 48

    def __post_init__(self):
        levels = len(self.encoder)
        if levels < 1:
            raise ConfigError("model needs at least one encoder stage (two resolution levels)")
        if len(self.decoder_channels) != levels:
            raise ConfigError(f"decoder_channels needs {levels} entries, got {len(self.decoder_channels)}")
        if not self.final_channels or self.final_channels[-1] != self.output_frames:
            raise ConfigError(f"last final conv must produce {self.output_frames} channels")
        if not 1 <= self.head_levels <= levels + 1:
            raise ConfigError(f"head_levels must be in [1, {levels + 1}], got {self.head_levels}")
        if self.down_stride != 2:
            raise ConfigError("only stride-2 downsampling is supported")
        if self.loss_crop_km % (2 ** (self.head_levels - 1)):
            raise ConfigError(f"loss crop {self.loss_crop_km} km does not divide into the coarsest head")
        widths = [s.channels for s in self.encoder] + [self.bottleneck_channels]
        widths += list(self.decoder_channels) + list(self.final_channels)
        if any(w < 1 for w in widths) or any(s.conv_count < 1 for s in self.encoder):
            raise ConfigError("channel widths and conv counts must be positive")

    @property
    def levels(self) -> int:
        """Resolution levels including the bottleneck"""
        return len(self.encoder) + 1

    @property
    def alignment(self) -> int:
        """Input offset granularity that keeps every downsampling grid aligned"""
        return self.down_stride ** len(self.encoder)

    def head_resolutions(self) -> List[int]:
        return [level for level in range(self.levels) if level < self.head_levels]


def canonical_config() -> ModelConfig:
    return ModelConfig(
        encoder=(EncoderStage(2, 32), EncoderStage(1, 64), EncoderStage(1, 128), EncoderStage(1, 192)),
        bottleneck_channels=256,
        decoder_channels=(128, 96, 64, 48),
        final_channels=(32, 32, 6),
        head_levels=4,
    )


def tiny_config() -> ModelConfig:
    return ModelConfig(
        encoder=(EncoderStage(1, 8),),
        bottleneck_channels=16,
        decoder_channels=(8,),
        final_channels=(6,),
        head_levels=2,
    )


MODEL_PRESETS = {
    'canonical': canonical_config,
    'tiny': tiny_config,
}


def model_preset(name: str) -> ModelConfig:
    if name not in MODEL_PRESETS:
        raise ConfigError(f"unknown model preset '{name}' (choose from {', '.join(MODEL_PRESETS)})")
    return MODEL_PRESETS[name]()


# =============================================================================
# Shape planning and graph assembly
# =============================================================================

@dataclass
class ShapePlan:
    input_hw: Tuple[int, int]
    layers: List[Tuple[str, Tuple[int, int, int]]] = field(default_factory=list)
    heads: Dict[int, Tuple[int, int]] = field(default_factory=dict)
    loss_crops: Dict[int, int] = field(default_factory=dict)

    @property
    def output_hw(self) -> Tuple[int, int]:
        return self.heads[0]

    def extent(self, layer: str) -> Tuple[int, int, int]:
        for name, shape in self.layers:
            if name == layer:
                return shape
        raise KeyError(layer)


def head_name(level: int) -> str:
    return f"head_{2 ** level}km"


class _Assembler:
    """Walks a ModelConfig, emitting graph nodes and recording the shape plan"""

    def __init__(self, config: ModelConfig, hw: Tuple[int, int]):
        self.config = config
        self.graph = Graph(f"nowcast-{hw[0]}x{hw[1]}")
        self.plan = ShapePlan(tuple(hw))

    def conv(self, x: int, layer: str, kernel: int, channels: int, stride: int = 1, relu: bool = True) -> int:
        g = self.graph
        if stride > 1:
            for extent in g.shape(x)[:2]:
                if extent >= kernel and (extent - kernel) % stride:
                    raise OddCrop(layer, f"extent {extent} is not aligned to stride {stride}")
        y = g.bias(g.conv2d(x, layer, kernel, channels, stride), layer)
        if relu:
            y = g.relu(y, f"{layer}/relu")
        self.plan.layers.append((layer, g.shape(y)))
        return y

    def check_crop(self, x: int, target: Tuple[int, int], name: str):
        for have, want in zip(self.graph.shape(x)[:2], target):
            if have < want:
                raise NegativeExtent(name, f"cannot crop {have} down to {want}")
            if (have - want) % 2:
                raise OddCrop(name, f"crop {have} -> {want} is asymmetric")

    def crop_to(self, x: int, target: Tuple[int, int], name: str) -> int:
        g = self.graph
        source = g.shape(x)[:2]
        self.check_crop(x, target, name)
        if tuple(source) == tuple(target):
            return x
        return g.center_crop(x, name, target[0], target[1])

    def head(self, level: int, features: int, previous: Optional[int]) -> int:
        g = self.graph
        layer = f"head{level}"
        parts = [features]
        if previous is not None:
            up = g.upsample(previous, f"{layer}/up")
            parts.append(self.crop_to(up, g.shape(features)[:2], f"{layer}/crop"))
        source = parts[0] if len(parts) == 1 else g.concat(parts, f"{layer}/concat")
        out = self.conv(source, layer, self.config.head_kernel, self.config.output_frames, relu=False)
        self.register_head(level, out)
        return out

    def register_head(self, level: int, node: int):
        self.graph.mark_output(head_name(level), node)
        self.plan.heads[level] = self.graph.shape(node)[:2]

    def build(self) -> Tuple[Graph, ShapePlan]:
        cfg, g = self.config, self.graph
        h, w = self.plan.input_hw
        if h < 1 or w < 1:
            raise NegativeExtent('input', f"input extent {h}x{w}")
        t = g.input('x', h, w, cfg.input_frames)

        skips = []
        for i, stage in enumerate(cfg.encoder):
            for j in range(stage.conv_count):
                t = self.conv(t, f"enc{i}.conv{j}", stage.kernel, stage.channels)
            skips.append(t)
            t = self.conv(t, f"enc{i}.down", cfg.down_kernel, stage.channels, cfg.down_stride)

        bottom = len(cfg.encoder)
        t = self.conv(t, 'bottleneck', cfg.kernel, cfg.bottleneck_channels)
        previous = self.head(bottom, t, None) if bottom < cfg.head_levels else None

        for level in reversed(range(bottom)):
            up = g.upsample(t, f"dec{level}/up")
            skip = self.crop_to(skips[level], g.shape(up)[:2], f"dec{level}/skip_crop")
            cat = g.concat([up, skip], f"dec{level}/concat")
            t = self.conv(cat, f"dec{level}.conv", cfg.kernel, cfg.decoder_channels[bottom - 1 - level])
            if level == 0:
                break
            previous = self.head(level, t, previous) if level < cfg.head_levels else None

        # 1 km: the final convolutions are the head
        if previous is not None:
            up = g.upsample(previous, 'final/up')
            t = g.concat([t, self.crop_to(up, g.shape(t)[:2], 'final/crop')], 'final/concat')
        last = len(cfg.final_channels) - 1
        for j, channels in enumerate(cfg.final_channels):
            t = self.conv(t, f"final{j}", cfg.kernel, channels, relu=j != last)
        self.register_head(0, t)

        self._add_loss()
        return g.freeze(), self.plan

    def _add_loss(self):
        cfg, g = self.config, self.graph
        h, w = self.plan.input_hw
        crop = cfg.loss_crop_km
        y = g.input('y', h, w, cfg.output_frames)
        truth_window = self.crop_to(y, (crop, crop), 'loss/window')
        terms = []
        for level in sorted(self.plan.heads):
            factor = 2 ** level
            size = crop // factor
            truth = truth_window if factor == 1 else g.avgpool(truth_window, f"loss/truth{level}", factor)
            head = g.node(head_name(level)).id
            self.check_crop(head, (size, size), f"{head_name(level)}/loss_crop")
            terms.append(g.mse_cropped(head, truth, f"loss/mse{level}", size, size))
            self.plan.loss_crops[level] = size
        g.sum_scalar(terms, LOSS_NODE)


def assemble(config: ModelConfig, input_hw: Tuple[int, int]) -> Tuple[Graph, ShapePlan]:
    return _Assembler(config, input_hw).build()


def infer_shapes(config: ModelConfig, input_hw: Tuple[int, int]) -> ShapePlan:
    """
    Full per-layer extent table for one input size

    Raises:
        OddCrop: a skip, head or loss crop would be asymmetric
        NegativeExtent: some layer would shrink below one pixel
    """
    return assemble(config, input_hw)[1]


@lru_cache(maxsize=32)
def min_input_extent(config: ModelConfig, limit: int = 4096) -> int:
    """Smallest square input the config accepts"""
    for n in range(1, limit + 1):
        try:
            infer_shapes(config, (n, n))
            return n
        except ShapeError:
            continue
    raise ShapeError('input', f"no valid input extent up to {limit}")


@lru_cache(maxsize=32)
def parameter_specs(config: ModelConfig) -> Tuple[ParamSpec, ...]:
    n = min_input_extent(config)
    graph, _ = assemble(config, (n, n))
    return tuple(graph.params)


def valid_extents_near(config: ModelConfig, extent: int, count: int = 2) -> List[int]:
    """Nearest accepted extents on each side of `extent`"""
    below, above = [], []
    n = extent - 1
    while n >= 1 and len(below) < count:
        if _accepts(config, n):
            below.append(n)
        n -= 1
    n = extent + 1
    while len(above) < count and n <= extent + 64 * config.alignment:
        if _accepts(config, n):
            above.append(n)
        n += 1
    return sorted(below) + above


def _accepts(config: ModelConfig, extent: int) -> bool:
    try:
        infer_shapes(config, (extent, extent))
        return True
    except ShapeError:
        return False


# =============================================================================
# Parameters and model
# =============================================================================

def init_parameters(config: ModelConfig, seed: int, dtype=np.float64) -> ParameterSet:
    """Fan-in uniform weights with bound sqrt(6 / fan_in), zero biases"""
    rng = np.random.Generator(np.random.PCG64(seed))
    items = []
    for spec in parameter_specs(config):
        if spec.name.endswith('.bias'):
            value = np.zeros(spec.shape)
        else:
            bound = np.sqrt(6.0 / spec.fan_in)
            value = rng.uniform(-bound, bound, size=spec.shape)
        items.append((spec.name, value.astype(dtype)))
    return ParameterSet(items)


@dataclass
class MultiScaleOutput:
    """Forecast tensors keyed by resolution level (0 = 1 km)"""

    heads: Dict[int, np.ndarray]

    def __getitem__(self, level: int) -> np.ndarray:
        return self.heads[level]

    @property
    def levels(self) -> List[int]:
        return sorted(self.heads)

    @property
    def finest(self) -> np.ndarray:
        return self.heads[0]

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.heads.values())


class NowcastModel:
    """
    Model configuration plus weights

    Graphs are specialised per input size and cached; a cached graph is
    immutable and may be evaluated from several threads, each with its own
    Workspace.
    """

    def __init__(self, config: ModelConfig, params: ParameterSet):
        expected = [(s.name, s.shape) for s in parameter_specs(config)]
        if params.structure() != expected:
            raise ShapeError('parameters', "parameter names/shapes do not match the model config")
        self.config = config
        self.params = params
        self._graphs: Dict[Tuple[int, int], Tuple[Graph, ShapePlan]] = {}
        self._lock = threading.Lock()

    def _entry(self, hw: Tuple[int, int]) -> Tuple[Graph, ShapePlan]:
        hw = (int(hw[0]), int(hw[1]))
        with self._lock:
            if hw not in self._graphs:
                self._graphs[hw] = assemble(self.config, hw)
                logger.debug(f"Built graph for input {hw[0]}x{hw[1]}")
            return self._graphs[hw]

    def graph(self, hw: Tuple[int, int]) -> Graph:
        return self._entry(hw)[0]

    def plan(self, hw: Tuple[int, int]) -> ShapePlan:
        return self._entry(hw)[1]

    @property
    def dtype(self):
        return self.params.dtype

    def parameter_count(self) -> int:
        return self.params.count()

    def forward(self, X: np.ndarray, params: Optional[ParameterSet] = None,
                workspace: Optional[Workspace] = None) -> MultiScaleOutput:
        X = np.asarray(X)
        if X.ndim != 4 or X.shape[-1] != self.config.input_frames:
            raise ShapeError('x', f"expected [B,H,W,{self.config.input_frames}], got {X.shape}")
        graph = self.graph(X.shape[1:3])
        ws = workspace if workspace is not None and workspace.graph is graph else Workspace(graph)
        levels = sorted(self.plan(X.shape[1:3]).heads)
        values = ws.forward(params or self.params, {'x': X}, [head_name(level) for level in levels])
        return MultiScaleOutput({level: values[head_name(level)] for level in levels})

    def loss_and_gradients(self, X: np.ndarray, Y: np.ndarray, params: Optional[ParameterSet] = None,
                           workspace: Optional[Workspace] = None) -> Tuple[float, GradientSet]:
        """Batch-mean multiscale loss and its gradient"""
        params = params or self.params
        graph = self.graph(X.shape[1:3])
        ws = workspace if workspace is not None and workspace.graph is graph else Workspace(graph)
        value = ws.forward(params, {'x': X, 'y': Y}, [LOSS_NODE])[LOSS_NODE]
        return float(value), ws.backward(params, LOSS_NODE)

    def loss(self, X: np.ndarray, Y: np.ndarray, params: Optional[ParameterSet] = None,
             workspace: Optional[Workspace] = None) -> float:
        graph = self.graph(X.shape[1:3])
        ws = workspace if workspace is not None and workspace.graph is graph else Workspace(graph)
        return float(ws.forward(params or self.params, {'x': X, 'y': Y}, [LOSS_NODE])[LOSS_NODE])

    def with_params(self, params: ParameterSet) -> 'NowcastModel':
        clone = NowcastModel(self.config, params)
        clone._graphs = self._graphs
        clone._lock = self._lock
        return clone


def build_model(config: ModelConfig, seed: int, input_hw: Optional[Tuple[int, int]] = None,
                dtype=np.float64) -> NowcastModel:
    """
    Create a model with freshly initialised weights

    When `input_hw` is given the graph for that size is built (and validated)
    up front.
    """
    model = NowcastModel(config, init_parameters(config, seed, dtype))
    if input_hw is not None:
        model.graph(input_hw)
    logger.info(f"Built model with {model.parameter_count():,} parameters (seed {seed})")
    return model


def model_forward(model: NowcastModel, X: np.ndarray) -> MultiScaleOutput:
    return model.forward(X)


def multiscale_loss(outputs: MultiScaleOutput, Y: np.ndarray, loss_crop_km: int = 48) -> float:
    """
    Sum over heads of the MSE on the concentric loss window

    Truth for level l is Y cropped to the window, then average-pooled by 2^l.
    """
    window = center_crop(Y, (loss_crop_km, loss_crop_km))
    total = 0.0
    for level in outputs.levels:
        factor = 2 ** level
        size = loss_crop_km // factor
        truth = window if factor == 1 else avgpool(window, factor)
        total += mse_cropped(outputs[level], truth, (size, size))
    return total


# =============================================================================
# NWW1 weights container
# =============================================================================

def weights_to_bytes(params: ParameterSet, config: ModelConfig) -> bytes:
    from nowcast.utils import config_digest

    code, dtype = float_code(params.dtype)
    writer = ContainerWriter(WEIGHTS_MAGIC, WEIGHTS_VERSION)
    writer.u64(config_digest(config)).u32(len(params)).u8(code)
    for name, value in params:
        writer.string(name).u8(value.ndim)
        for extent in value.shape:
            writer.u32(extent)
        writer.array(value, dtype)
    return writer.getvalue()


def weights_from_bytes(data: bytes, config: ModelConfig, source: str = '<bytes>') -> ParameterSet:
    from nowcast.utils import config_digest

    reader = ContainerReader(data, WEIGHTS_MAGIC, (WEIGHTS_VERSION,), source)
    stored_hash = reader.u64()
    if stored_hash != config_digest(config):
        raise ConfigHashMismatch(f"{source}: weights were saved for config {stored_hash:016x}, "
                                 f"not {config_digest(config):016x}")
    count = reader.u32()
    dtype = float_dtype(reader.u8())
    items = []
    for _ in range(count):
        name = reader.string()
        shape = tuple(reader.u32() for _ in range(reader.u8()))
        items.append((name, reader.array(shape, dtype).astype(np.dtype(dtype).type)))
    reader.expect_end()

    params = ParameterSet(items)
    expected = [(s.name, s.shape) for s in parameter_specs(config)]
    if params.structure() != expected:
        raise PayloadMismatch(f"{source}: tensor list does not match the model config")
    return params


def save_weights(params: ParameterSet, path: Union[str, Path], config: ModelConfig):
    from nowcast.utils import atomic_write_bytes

    atomic_write_bytes(path, weights_to_bytes(params, config))
    logger.info(f"Saved {len(params)} weight tensors to {path}")


def load_weights(path: Union[str, Path], config: ModelConfig) -> ParameterSet:
    with open(path, 'rb') as f:
        data = f.read()
    return weights_from_bytes(data, config, str(path))
