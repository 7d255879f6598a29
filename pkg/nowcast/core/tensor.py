"""
Dense tensor engine with reverse-mode differentiation

Tensors are numpy arrays in [batch, height, width, channels] layout (channels
fastest); scalars are rank-0 arrays. A Graph is a static, acyclic list of
Nodes specialised to one input extent. It is immutable once frozen and can be
shared read-only between threads; every thread evaluates it through its own
Workspace.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import NegativeExtent, NowcastError, ShapeError

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


# =============================================================================
# Functional kernels
# =============================================================================

def conv_output_extent(length: int, kernel: int, stride: int, layer: str = 'conv') -> int:
    """Extent after a valid (unpadded) convolution: floor((in - k) / s) + 1"""
    if kernel < 1 or stride < 1:
        raise ShapeError(layer, f"kernel {kernel} and stride {stride} must be >= 1")
    if length < kernel:
        raise NegativeExtent(layer, f"input extent {length} is smaller than kernel {kernel}")
    return (length - kernel) // stride + 1


def _window(start: int, extent: int, stride: int) -> slice:
    return slice(start, start + stride * (extent - 1) + 1, stride)


def conv2d_reference(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None, stride: int = 1) -> np.ndarray:
    """Loop kernel accumulating strictly in (di, dj, ci) ascending order"""
    batch, height, width, cin = x.shape
    k, _, _, cout = w.shape
    ho = conv_output_extent(height, k, stride)
    wo = conv_output_extent(width, k, stride)
    out = np.zeros((batch, ho, wo, cout), dtype=np.result_type(x, w))
    for di in range(k):
        for dj in range(k):
            patch = x[:, _window(di, ho, stride), _window(dj, wo, stride), :]
            for ci in range(cin):
                out += patch[..., ci:ci + 1] * w[di, dj, ci]
    if b is not None:
        out += b
    return out


def conv2d_valid(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None, stride: int = 1) -> np.ndarray:
    """
    Valid 2-D convolution, NHWC input and [k, k, Cin, Cout] kernel

    Kernel offsets are accumulated in (di, dj) ascending order; the channel
    contraction of each offset is a single GEMM.
    """
    batch, height, width, cin = x.shape
    k, k2, wcin, cout = w.shape
    if k != k2 or wcin != cin:
        raise ShapeError('conv2d_valid', f"kernel {w.shape} does not fit input channels {cin}")
    ho = conv_output_extent(height, k, stride)
    wo = conv_output_extent(width, k, stride)
    out = np.zeros((batch, ho, wo, cout), dtype=np.result_type(x, w))
    for di in range(k):
        for dj in range(k):
            patch = x[:, _window(di, ho, stride), _window(dj, wo, stride), :]
            out += np.tensordot(patch, w[di, dj], axes=([3], [0]))
    if b is not None:
        out += b
    return out


def _conv2d_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray, stride: int, need_dx: bool):
    k = w.shape[0]
    ho, wo = g.shape[1], g.shape[2]
    dw = np.empty_like(w)
    dx = np.zeros_like(x) if need_dx else None
    for di in range(k):
        for dj in range(k):
            rows, cols = _window(di, ho, stride), _window(dj, wo, stride)
            dw[di, dj] = np.tensordot(x[:, rows, cols, :], g, axes=([0, 1, 2], [0, 1, 2]))
            if need_dx:
                dx[:, rows, cols, :] += np.tensordot(g, w[di, dj], axes=([3], [1]))
    return dx, dw


def upsample_nearest(x: np.ndarray, factor: int = 2) -> np.ndarray:
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def avgpool(x: np.ndarray, factor: int) -> np.ndarray:
    batch, height, width, channels = x.shape
    if height % factor or width % factor:
        raise ShapeError('avgpool', f"extent {height}x{width} not divisible by {factor}")
    if factor == 1:
        return x.copy()
    blocks = x.reshape(batch, height // factor, factor, width // factor, factor, channels)
    return blocks.mean(axis=(2, 4))


def crop_offsets(extent: int, target: int) -> Tuple[int, int]:
    """Rows removed (top, bottom): floor of the difference on top, ceil at the bottom"""
    if target > extent:
        raise ShapeError('center_crop', f"target {target} larger than extent {extent}")
    top = (extent - target) // 2
    return top, extent - target - top


def center_crop(x: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    h, w = target
    top, _ = crop_offsets(x.shape[1], h)
    left, _ = crop_offsets(x.shape[2], w)
    return x[:, top:top + h, left:left + w, :]


def mse_cropped(pred: np.ndarray, truth: np.ndarray, crop: Tuple[int, int]) -> float:
    """Mean squared error over the central crop of both tensors"""
    if pred.shape[0] != truth.shape[0] or pred.shape[-1] != truth.shape[-1]:
        raise ShapeError('mse_cropped', f"batch/channels differ: {pred.shape} vs {truth.shape}")
    d = center_crop(pred, crop) - center_crop(truth, crop)
    return float(np.mean(d * d))


# =============================================================================
# Graph
# =============================================================================

class NodeKind(str, Enum):
    INPUT = 'input'
    CONV2D_VALID = 'conv2d_valid'
    UPSAMPLE_NEAREST = 'upsample_nearest'
    CENTER_CROP = 'center_crop'
    CONCAT_CHANNELS = 'concat_channels'
    RELU = 'relu'
    LINEAR_BIAS = 'linear_bias'
    MSE_CROPPED = 'mse_cropped'
    SUM_SCALAR = 'sum_scalar'
    AVGPOOL = 'avgpool'


@dataclass(frozen=True)
class Node:
    id: int
    name: str
    kind: NodeKind
    inputs: Tuple[int, ...] = ()
    attrs: Dict[str, int] = field(default_factory=dict)
    param: Optional[str] = None


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: Shape
    fan_in: int


class _Op:
    """Shape rule, forward and backward for one node kind"""

    def infer(self, node: Node, shapes: List[Shape], pshape: Optional[Shape]) -> Shape:
        raise NotImplementedError

    def forward(self, node: Node, xs: List[np.ndarray], p: Optional[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def backward(self, node: Node, g: np.ndarray, xs: List[np.ndarray], y: np.ndarray,
                 p: Optional[np.ndarray], need: List[bool]):
        """Returns (gradient per input or None, gradient of the parameter or None)"""
        raise NotImplementedError


class _Conv(_Op):
    def infer(self, node, shapes, pshape):
        (h, w, c), = shapes
        k, s = node.attrs['kernel'], node.attrs['stride']
        if c != pshape[2]:
            raise ShapeError(node.name, f"expects {pshape[2]} input channels, got {c}")
        return (conv_output_extent(h, k, s, node.name), conv_output_extent(w, k, s, node.name), pshape[3])

    def forward(self, node, xs, p):
        return conv2d_valid(xs[0], p, None, node.attrs['stride'])

    def backward(self, node, g, xs, y, p, need):
        dx, dw = _conv2d_backward(xs[0], p, g, node.attrs['stride'], need[0])
        return [dx], dw


class _Upsample(_Op):
    def infer(self, node, shapes, pshape):
        (h, w, c), = shapes
        f = node.attrs['factor']
        return (h * f, w * f, c)

    def forward(self, node, xs, p):
        return upsample_nearest(xs[0], node.attrs['factor'])

    def backward(self, node, g, xs, y, p, need):
        f = node.attrs['factor']
        b, h, w, c = xs[0].shape
        return [g.reshape(b, h, f, w, f, c).sum(axis=(2, 4))], None


class _CenterCrop(_Op):
    def infer(self, node, shapes, pshape):
        (h, w, c), = shapes
        th, tw = node.attrs['height'], node.attrs['width']
        if th > h or tw > w:
            raise ShapeError(node.name, f"crop target {th}x{tw} larger than input {h}x{w}")
        return (th, tw, c)

    def forward(self, node, xs, p):
        return center_crop(xs[0], (node.attrs['height'], node.attrs['width']))

    def backward(self, node, g, xs, y, p, need):
        x = xs[0]
        top, _ = crop_offsets(x.shape[1], node.attrs['height'])
        left, _ = crop_offsets(x.shape[2], node.attrs['width'])
        dx = np.zeros_like(x)
        dx[:, top:top + g.shape[1], left:left + g.shape[2], :] = g
        return [dx], None


class _Concat(_Op):
    def infer(self, node, shapes, pshape):
        h, w = shapes[0][:2]
        for s in shapes[1:]:
            if s[:2] != (h, w):
                raise ShapeError(node.name, f"cannot concatenate {shapes[0]} with {s}")
        return (h, w, sum(s[2] for s in shapes))

    def forward(self, node, xs, p):
        return np.concatenate(xs, axis=-1)

    def backward(self, node, g, xs, y, p, need):
        bounds = np.cumsum([x.shape[-1] for x in xs])[:-1]
        return list(np.split(g, bounds, axis=-1)), None


class _Relu(_Op):
    def infer(self, node, shapes, pshape):
        return shapes[0]

    def forward(self, node, xs, p):
        return np.maximum(xs[0], 0)

    def backward(self, node, g, xs, y, p, need):
        # derivative at exactly 0 is taken as 0
        return [g * (xs[0] > 0)], None


class _LinearBias(_Op):
    def infer(self, node, shapes, pshape):
        (h, w, c), = shapes
        if pshape != (c,):
            raise ShapeError(node.name, f"bias shape {pshape} does not match {c} channels")
        return (h, w, c)

    def forward(self, node, xs, p):
        return xs[0] + p

    def backward(self, node, g, xs, y, p, need):
        return [g], g.sum(axis=(0, 1, 2))


class _MseCropped(_Op):
    def infer(self, node, shapes, pshape):
        (ph, pw, pc), (th, tw, tc) = shapes
        ch, cw = node.attrs['height'], node.attrs['width']
        if pc != tc:
            raise ShapeError(node.name, f"prediction has {pc} channels, truth {tc}")
        if ch > min(ph, th) or cw > min(pw, tw):
            raise ShapeError(node.name, f"crop {ch}x{cw} exceeds {ph}x{pw} / {th}x{tw}")
        return ()

    def forward(self, node, xs, p):
        crop = (node.attrs['height'], node.attrs['width'])
        d = center_crop(xs[0], crop) - center_crop(xs[1], crop)
        return np.asarray(np.mean(d * d), dtype=d.dtype)

    def backward(self, node, g, xs, y, p, need):
        crop = (node.attrs['height'], node.attrs['width'])
        d = center_crop(xs[0], crop) - center_crop(xs[1], crop)
        gd = (2.0 * g / d.size) * d
        grads = []
        for x, sign, wanted in zip(xs, (1.0, -1.0), need):
            if not wanted:
                grads.append(None)
                continue
            top, _ = crop_offsets(x.shape[1], crop[0])
            left, _ = crop_offsets(x.shape[2], crop[1])
            gx = np.zeros_like(x)
            gx[:, top:top + crop[0], left:left + crop[1], :] = sign * gd
            grads.append(gx)
        return grads, None


class _SumScalar(_Op):
    def infer(self, node, shapes, pshape):
        return ()

    def forward(self, node, xs, p):
        total = np.asarray(0.0, dtype=np.result_type(*xs))
        for x in xs:
            total = total + np.sum(x)
        return np.asarray(total)

    def backward(self, node, g, xs, y, p, need):
        return [np.full_like(x, g) if wanted else None for x, wanted in zip(xs, need)], None


class _AvgPool(_Op):
    def infer(self, node, shapes, pshape):
        (h, w, c), = shapes
        f = node.attrs['factor']
        if h % f or w % f:
            raise ShapeError(node.name, f"extent {h}x{w} not divisible by pool factor {f}")
        return (h // f, w // f, c)

    def forward(self, node, xs, p):
        return avgpool(xs[0], node.attrs['factor'])

    def backward(self, node, g, xs, y, p, need):
        f = node.attrs['factor']
        return [upsample_nearest(g, f) / (f * f)], None


_OPS: Dict[NodeKind, _Op] = {
    NodeKind.CONV2D_VALID: _Conv(),
    NodeKind.UPSAMPLE_NEAREST: _Upsample(),
    NodeKind.CENTER_CROP: _CenterCrop(),
    NodeKind.CONCAT_CHANNELS: _Concat(),
    NodeKind.RELU: _Relu(),
    NodeKind.LINEAR_BIAS: _LinearBias(),
    NodeKind.MSE_CROPPED: _MseCropped(),
    NodeKind.SUM_SCALAR: _SumScalar(),
    NodeKind.AVGPOOL: _AvgPool(),
}


class Graph:
    """
    Static computation graph

    Shapes are inferred as nodes are added, so a bad layer fails at build
    time with its own name. Spatial shapes exclude the batch extent.
    """

    def __init__(self, name: str = 'graph'):
        self.name = name
        self.nodes: List[Node] = []
        self.params: List[ParamSpec] = []
        self.outputs: Dict[str, int] = {}
        self._shapes: Dict[int, Shape] = {}
        self._ids: Dict[str, int] = {}
        self._param_shapes: Dict[str, Shape] = {}
        self._requires_grad: List[bool] = []
        self._frozen = False

    # -- construction ---------------------------------------------------------

    def _add(self, kind: NodeKind, name: str, inputs: Sequence[int] = (),
             attrs: Optional[Dict[str, int]] = None, param: Optional[ParamSpec] = None) -> int:
        if self._frozen:
            raise NowcastError(f"graph '{self.name}' is frozen")
        if name in self._ids:
            raise ShapeError(name, "duplicate node name")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ShapeError(name, f"unknown input node {i}")
        node = Node(len(self.nodes), name, kind, tuple(inputs), dict(attrs or {}),
                    param.name if param else None)
        if kind is NodeKind.INPUT:
            shape = (node.attrs['height'], node.attrs['width'], node.attrs['channels'])
        else:
            shape = _OPS[kind].infer(node, [self._shapes[i] for i in inputs],
                                     param.shape if param else None)
        if any(e < 1 for e in shape):
            raise NegativeExtent(name, f"inferred shape {shape}")
        if param is not None:
            if param.name in self._param_shapes:
                raise ShapeError(name, f"parameter '{param.name}' already defined")
            self.params.append(param)
            self._param_shapes[param.name] = param.shape
        self.nodes.append(node)
        self._shapes[node.id] = shape
        self._ids[name] = node.id
        self._requires_grad.append(param is not None or any(self._requires_grad[i] for i in inputs))
        return node.id

    def input(self, name: str, height: int, width: int, channels: int) -> int:
        return self._add(NodeKind.INPUT, name, (), {'height': height, 'width': width, 'channels': channels})

    def conv2d(self, x: int, name: str, kernel: int, out_channels: int, stride: int = 1) -> int:
        cin = self._shapes[x][2]
        spec = ParamSpec(f"{name}.weight", (kernel, kernel, cin, out_channels), kernel * kernel * cin)
        return self._add(NodeKind.CONV2D_VALID, name, (x,), {'kernel': kernel, 'stride': stride}, spec)

    def bias(self, x: int, layer: str) -> int:
        """Per-channel bias; the parameter is `<layer>.bias`"""
        c = self._shapes[x][2]
        return self._add(NodeKind.LINEAR_BIAS, f"{layer}/bias", (x,), {}, ParamSpec(f"{layer}.bias", (c,), c))

    def relu(self, x: int, name: str) -> int:
        return self._add(NodeKind.RELU, name, (x,))

    def upsample(self, x: int, name: str, factor: int = 2) -> int:
        if factor != 2:
            raise ShapeError(name, f"only factor 2 is supported, got {factor}")
        return self._add(NodeKind.UPSAMPLE_NEAREST, name, (x,), {'factor': factor})

    def center_crop(self, x: int, name: str, height: int, width: int) -> int:
        return self._add(NodeKind.CENTER_CROP, name, (x,), {'height': height, 'width': width})

    def concat(self, xs: Sequence[int], name: str) -> int:
        return self._add(NodeKind.CONCAT_CHANNELS, name, tuple(xs))

    def avgpool(self, x: int, name: str, factor: int) -> int:
        return self._add(NodeKind.AVGPOOL, name, (x,), {'factor': factor})

    def mse_cropped(self, pred: int, truth: int, name: str, height: int, width: int) -> int:
        return self._add(NodeKind.MSE_CROPPED, name, (pred, truth), {'height': height, 'width': width})

    def sum_scalar(self, xs: Sequence[int], name: str) -> int:
        return self._add(NodeKind.SUM_SCALAR, name, tuple(xs))

    def mark_output(self, name: str, node: int):
        self.outputs[name] = node

    def freeze(self) -> 'Graph':
        self._frozen = True
        return self

    # -- queries --------------------------------------------------------------

    def node(self, ref) -> Node:
        if isinstance(ref, str):
            if ref in self.outputs:
                return self.nodes[self.outputs[ref]]
            if ref not in self._ids:
                raise KeyError(f"no node or output named '{ref}'")
            return self.nodes[self._ids[ref]]
        return self.nodes[ref]

    def shape(self, ref) -> Shape:
        """Static shape without the batch extent; () for scalars"""
        return self._shapes[self.node(ref).id]

    def ancestors(self, targets: Iterable[int]) -> List[int]:
        """Ids needed to evaluate the targets, in topological (insertion) order"""
        needed = set()
        stack = list(targets)
        while stack:
            i = stack.pop()
            if i in needed:
                continue
            needed.add(i)
            stack.extend(self.nodes[i].inputs)
        return sorted(needed)

    def __repr__(self):
        return f"Graph({self.name!r}, nodes={len(self.nodes)}, params={len(self.params)})"


# =============================================================================
# Named tensor sets
# =============================================================================

class TensorSet:
    """Ordered (name, tensor) pairs"""

    def __init__(self, items: Iterable[Tuple[str, np.ndarray]]):
        self._items: 'OrderedDict[str, np.ndarray]' = OrderedDict(items)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self._items.items())

    def __len__(self) -> int:
        return len(self._items)

    @property
    def names(self) -> List[str]:
        return list(self._items)

    def arrays(self) -> List[np.ndarray]:
        return list(self._items.values())

    def structure(self) -> List[Tuple[str, Shape]]:
        return [(n, a.shape) for n, a in self._items.items()]

    def count(self) -> int:
        return int(sum(a.size for a in self._items.values()))

    @property
    def dtype(self):
        for a in self._items.values():
            return a.dtype
        return np.dtype(np.float64)

    def digest(self) -> str:
        from nowcast.utils import array_digest
        return array_digest(self._items.values())

    def copy(self):
        return type(self)((n, a.copy()) for n, a in self._items.items())

    def as_dict(self) -> Dict[str, np.ndarray]:
        return dict(self._items)

    def __repr__(self):
        return f"{type(self).__name__}({len(self)} tensors, {self.count()} values)"


class ParameterSet(TensorSet):
    """Trainable weights ω in graph construction order"""


class GradientSet(TensorSet):
    """One gradient per parameter, same order and shapes as the ParameterSet"""


# =============================================================================
# Execution
# =============================================================================

class Workspace:
    """Per-worker activation storage for forward and backward passes"""

    def __init__(self, graph: Graph):
        self.graph = graph
        self.values: Dict[int, np.ndarray] = {}
        self._order: List[int] = []

    def forward(self, params: Mapping[str, np.ndarray], feeds: Mapping[str, np.ndarray],
                targets: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
        """
        Evaluate the graph

        Args:
            params: parameter tensors by name (a ParameterSet or dict)
            feeds: input tensors by input-node name
            targets: output or node names; defaults to every marked output

        Returns:
            Requested tensors by name
        """
        graph = self.graph
        targets = list(targets) if targets is not None else list(graph.outputs)
        target_ids = [graph.node(t).id for t in targets]
        self.values = {}
        self._order = graph.ancestors(target_ids)
        batch = None
        dtype = None
        for _, a in (params.items() if hasattr(params, 'items') else params):
            dtype = a.dtype
            break

        for nid in self._order:
            node = graph.nodes[nid]
            if node.kind is NodeKind.INPUT:
                if node.name not in feeds:
                    raise ShapeError(node.name, "missing input feed")
                value = np.asarray(feeds[node.name])
                if dtype is not None and value.dtype != dtype:
                    value = value.astype(dtype)
                if batch is None:
                    batch = value.shape[0] if value.ndim else 0
            else:
                p = params[node.param] if node.param else None
                value = _OPS[node.kind].forward(node, [self.values[i] for i in node.inputs], p)
            expected = graph._shapes[nid]
            full = expected if expected == () else (batch,) + expected
            if value.shape != full:
                raise ShapeError(node.name, f"produced {value.shape}, inferred {full}")
            self.values[nid] = value
        return {t: self.values[i] for t, i in zip(targets, target_ids)}

    def backward(self, params: Mapping[str, np.ndarray], loss: str) -> GradientSet:
        """Exact gradients of a scalar node with respect to every graph parameter"""
        graph = self.graph
        lid = graph.node(loss).id
        if graph._shapes[lid] != ():
            raise ShapeError(graph.nodes[lid].name, "backward needs a scalar node")
        if lid not in self.values:
            raise NowcastError(f"forward has not evaluated '{loss}'")

        grads: Dict[int, np.ndarray] = {lid: np.ones((), dtype=self.values[lid].dtype)}
        pgrads: Dict[str, np.ndarray] = {}
        for nid in reversed(graph.ancestors([lid])):
            g = grads.pop(nid, None)
            node = graph.nodes[nid]
            if g is None or node.kind is NodeKind.INPUT or not graph._requires_grad[nid]:
                continue
            need = [graph._requires_grad[i] for i in node.inputs]
            p = params[node.param] if node.param else None
            in_grads, pgrad = _OPS[node.kind].backward(
                node, g, [self.values[i] for i in node.inputs], self.values[nid], p, need)
            for i, gi, wanted in zip(node.inputs, in_grads, need):
                if gi is None or not wanted:
                    continue
                grads[i] = grads[i] + gi if i in grads else gi
            if pgrad is not None:
                pgrads[node.param] = pgrad

        items = []
        for spec in graph.params:
            g = pgrads.get(spec.name)
            if g is None:
                g = np.zeros(spec.shape, dtype=params[spec.name].dtype)
            items.append((spec.name, g))
        return GradientSet(items)


def forward(graph: Graph, params: Mapping[str, np.ndarray], feeds: Mapping[str, np.ndarray],
            targets: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
    """One-shot forward in a throwaway workspace"""
    return Workspace(graph).forward(params, feeds, targets)


def loss_and_gradients(graph: Graph, params: Mapping[str, np.ndarray], feeds: Mapping[str, np.ndarray],
                       loss: str, workspace: Optional[Workspace] = None) -> Tuple[float, GradientSet]:
    ws = workspace or Workspace(graph)
    value = ws.forward(params, feeds, [loss])[loss]
    return float(value), ws.backward(params, loss)


def check_gradients(graph: Graph, params: ParameterSet, feeds: Mapping[str, np.ndarray], loss: str,
                    rng: np.random.Generator, coords_per_param: int = 4, step: float = 1e-5,
                    noise_floor: float = 1e-9) -> float:
    """
    Compare autodiff against central finite differences

    Samples up to `coords_per_param` coordinates of every parameter tensor.
    Coordinates whose numerical gradient is below `noise_floor` must agree in
    absolute terms; the rest contribute |auto - num| / (|num| + 1e-8).

    Returns:
        The largest relative error seen
    """
    _, grads = loss_and_gradients(graph, params, feeds, loss)
    work = params.copy()

    def evaluate() -> float:
        return float(forward(graph, work, feeds, [loss])[loss])

    worst = 0.0
    for name, value in work:
        flat = value.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords_per_param, flat.size), replace=False)
        for idx in picks:
            original = flat[idx]
            flat[idx] = original + step
            up = evaluate()
            flat[idx] = original - step
            down = evaluate()
            flat[idx] = original
            numeric = (up - down) / (2 * step)
            auto = float(grads[name].reshape(-1)[idx])
            diff = abs(auto - numeric)
            if abs(numeric) < noise_floor:
                if diff > 10 * noise_floor:
                    worst = max(worst, diff / noise_floor)
                continue
            worst = max(worst, diff / (abs(numeric) + 1e-8))
    return worst
