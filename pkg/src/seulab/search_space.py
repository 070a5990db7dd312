"""Extension-unit cell topology, edge-operation registry and genotype encoding.

A cell has two input nodes (1, 2), four intermediate nodes (3..6) and an
output node that concatenates nodes 3..6.  Every directed edge (i, j) with
``j in 3..6`` and ``i < j`` carries exactly one operation from the registry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

N_INPUT_NODES = 2
N_INTERMEDIATE_NODES = 4
INTERMEDIATE_NODES = tuple(range(N_INPUT_NODES + 1, N_INPUT_NODES + N_INTERMEDIATE_NODES + 1))

Edge = Tuple[int, int]


class ConfigError(ValueError):
    """Raised when a shape plan or genotype is inconsistent."""


def enumerate_edges() -> List[Edge]:
    """All 14 cell edges, ``j`` ascending then ``i`` ascending."""
    return [(i, j) for j in INTERMEDIATE_NODES for i in range(1, j)]


EDGES: Tuple[Edge, ...] = tuple(enumerate_edges())


# ---------------------------------------------------------------------------
# Edge operations
# ---------------------------------------------------------------------------

def _norm(channels: int) -> nn.Module:
    # per-sample normalization with no running statistics, so a frozen cell
    # evaluates identically no matter which batches later pass through it
    return nn.GroupNorm(1, channels, affine=False)


class Zero(nn.Module):
    def __init__(self, stride: int):
        super().__init__()
        self.stride = stride

    def forward(self, x):
        if self.stride == 1:
            return x.mul(0.0)
        return x[:, :, :: self.stride, :: self.stride].mul(0.0)


class Identity(nn.Module):
    """Skip connection; on reduction edges a parameter-free strided subsample."""

    def __init__(self, stride: int):
        super().__init__()
        self.stride = stride

    def forward(self, x):
        if self.stride == 1:
            return x
        return x[:, :, :: self.stride, :: self.stride]


class SepConv(nn.Module):
    def __init__(self, channels: int, kernel: int, stride: int, dilation: int = 1):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.op = nn.Sequential(
            nn.ReLU(inplace=False),
            nn.Conv2d(channels, channels, kernel, stride=stride, padding=pad,
                      dilation=dilation, groups=channels, bias=False),
            nn.Conv2d(channels, channels, 1, bias=False),
            _norm(channels),
        )

    def forward(self, x):
        return self.op(x)


def _pool(kind: str, stride: int) -> nn.Module:
    if kind == "max":
        return nn.MaxPool2d(3, stride=stride, padding=1)
    return nn.AvgPool2d(3, stride=stride, padding=1, count_include_pad=False)


@dataclass(frozen=True)
class EdgeOp:
    """One member of the edge search space."""

    name: str
    build: Callable[[int, int], nn.Module]
    kernel: int = 1
    dilation: int = 1
    has_params: bool = False

    def output_shape(self, in_shape: Tuple[int, int, int], stride: int) -> Tuple[int, int, int]:
        c, h, w = in_shape
        # every registered op maps HxW -> ceil(H/stride) x ceil(W/stride)
        return c, _down(h, stride), _down(w, stride)

    def param_count(self, channels: int) -> int:
        if not self.has_params:
            return 0
        return channels * self.kernel * self.kernel + channels * channels


def _down(size: int, stride: int) -> int:
    return (size - 1) // stride + 1


OPS: Dict[str, EdgeOp] = {}


def register_op(op: EdgeOp) -> EdgeOp:
    if op.name in OPS:
        raise ConfigError(f"duplicate op name {op.name!r}")
    OPS[op.name] = op
    return op


register_op(EdgeOp("none", lambda c, s: Zero(s)))
register_op(EdgeOp("skip_connect", lambda c, s: Identity(s)))
register_op(EdgeOp("max_pool_3x3", lambda c, s: _pool("max", s)))
register_op(EdgeOp("avg_pool_3x3", lambda c, s: _pool("avg", s)))
register_op(EdgeOp("sep_conv_3x3", lambda c, s: SepConv(c, 3, s), kernel=3, has_params=True))
register_op(EdgeOp("sep_conv_5x5", lambda c, s: SepConv(c, 5, s), kernel=5, has_params=True))
register_op(EdgeOp("dil_conv_3x3", lambda c, s: SepConv(c, 3, s, dilation=2), kernel=3,
                   dilation=2, has_params=True))
register_op(EdgeOp("dil_conv_5x5", lambda c, s: SepConv(c, 5, s, dilation=2), kernel=5,
                   dilation=2, has_params=True))

OP_NAMES: Tuple[str, ...] = tuple(OPS)
N_OPS = len(OP_NAMES)


# ---------------------------------------------------------------------------
# Genotype
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CellArchitecture:
    """One op name per cell edge.  Immutable and hashable."""

    ops: Tuple[Tuple[Edge, str], ...]

    def __post_init__(self):
        keys = [e for e, _ in self.ops]
        if sorted(keys, key=lambda e: (e[1], e[0])) != list(EDGES) or len(keys) != len(EDGES):
            raise ConfigError(f"genotype must cover exactly the {len(EDGES)} cell edges")
        for _, name in self.ops:
            if name not in OPS:
                raise ConfigError(f"unknown op {name!r}")

    @classmethod
    def from_mapping(cls, edges: Mapping[Edge, str]) -> "CellArchitecture":
        missing = set(EDGES) - set(edges)
        extra = set(edges) - set(EDGES)
        if missing or extra:
            raise ConfigError(f"bad edge set: missing={sorted(missing)} extra={sorted(extra)}")
        return cls(tuple((e, edges[e]) for e in EDGES))

    @classmethod
    def from_indices(cls, indices: Sequence[int]) -> "CellArchitecture":
        if len(indices) != len(EDGES):
            raise ConfigError(f"expected {len(EDGES)} op indices, got {len(indices)}")
        return cls(tuple((e, OP_NAMES[int(k)]) for e, k in zip(EDGES, indices)))

    @classmethod
    def uniform(cls, name: str) -> "CellArchitecture":
        return cls.from_mapping({e: name for e in EDGES})

    @property
    def edges(self) -> Dict[Edge, str]:
        return dict(self.ops)

    def indices(self) -> List[int]:
        return [OP_NAMES.index(name) for _, name in self.ops]

    def encode(self) -> str:
        return "\n".join(f"{i}-{j}:{name}" for (i, j), name in self.ops)

    @classmethod
    def decode(cls, text: str) -> "CellArchitecture":
        edges = {}
        for line in text.strip().splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                key, name = line.split(":")
                i, j = (int(v) for v in key.split("-"))
            except ValueError as exc:
                raise ConfigError(f"malformed genotype line {line!r}") from exc
            if (i, j) in edges:
                raise ConfigError(f"duplicate edge {i}-{j}")
            edges[(i, j)] = name.strip()
        return cls.from_mapping(edges)

    def __str__(self):
        return self.encode()


def random_architecture(rng: np.random.Generator) -> CellArchitecture:
    return CellArchitecture.from_indices(rng.integers(0, N_OPS, size=len(EDGES)))


# ---------------------------------------------------------------------------
# Shape plan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerShape:
    """Everything needed to build one cell of a given layer."""

    in0: Tuple[int, int, int]  # (C, H, W) of the cell two layers back
    in1: Tuple[int, int, int]  # (C, H, W) of the previous cell
    channels: int
    reduction: bool

    @property
    def stride(self) -> int:
        return 2 if self.reduction else 1

    @property
    def out_shape(self) -> Tuple[int, int, int]:
        _, h, w = self.in1
        return self.channels, _down(h, self.stride), _down(w, self.stride)


@dataclass(frozen=True)
class CellShapePlan:
    """Per-layer widths and reduction flags for an N-layer chain of cells.

    The stem is parameter-free: the raw input, optionally average-pooled by
    ``stem_stride``, so ``stem_channels`` equals the input channel count.
    """

    input_shape: Tuple[int, int, int]
    channels: Tuple[int, ...]
    reductions: Tuple[bool, ...]
    stem_stride: int = 1

    def __post_init__(self):
        if len(self.channels) != len(self.reductions) or not self.channels:
            raise ConfigError("channels and reductions must be non-empty and equal length")
        if any(c <= 0 for c in self.channels):
            raise ConfigError("channel counts must be positive")
        if any(v <= 0 for v in self.input_shape):
            raise ConfigError("input shape must be positive")
        if self.stem_stride < 1:
            raise ConfigError("stem_stride must be >= 1")

    @classmethod
    def build(cls, input_shape: Sequence[int], n_layers: int, init_channels: int,
              reduction_layers: Optional[Iterable[int]] = None, stem_stride: int = 1) -> "CellShapePlan":
        """Default plan: reduce and double width at layers ceil(N/3), ceil(2N/3)."""
        if n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if reduction_layers is None:
            reduction_layers = {math.ceil(n_layers / 3), math.ceil(2 * n_layers / 3)}
        reduction_layers = set(reduction_layers)
        if any(not 1 <= k <= n_layers for k in reduction_layers):
            raise ConfigError(f"reduction layers must lie in 1..{n_layers}")
        chans, reds, c = [], [], init_channels
        for k in range(1, n_layers + 1):
            red = k in reduction_layers
            if red:
                c *= 2
            chans.append(c)
            reds.append(red)
        return cls(tuple(int(v) for v in input_shape), tuple(chans), tuple(reds), int(stem_stride))

    @property
    def n_layers(self) -> int:
        return len(self.channels)

    @property
    def stem_channels(self) -> int:
        return self.input_shape[0]

    @property
    def stem_shape(self) -> Tuple[int, int, int]:
        c, h, w = self.input_shape
        return c, h // self.stem_stride, w // self.stem_stride

    def stem(self) -> nn.Module:
        if self.stem_stride == 1:
            return nn.Identity()
        return nn.AvgPool2d(self.stem_stride)

    def layer(self, k: int) -> LayerShape:
        """Shape of layer ``k`` (0-based)."""
        outs = [self.stem_shape, self.stem_shape]
        for idx in range(k + 1):
            shape = LayerShape(outs[-2], outs[-1], self.channels[idx], self.reductions[idx])
            outs.append(shape.out_shape)
        return shape

    def layers(self) -> List[LayerShape]:
        return [self.layer(k) for k in range(self.n_layers)]

    @property
    def output_channels(self) -> int:
        """Width fed to the task heads after global average pooling."""
        return self.channels[-1]

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "channels": list(self.channels),
                "reductions": list(self.reductions), "stem_stride": self.stem_stride}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CellShapePlan":
        return cls(tuple(d["input_shape"]), tuple(d["channels"]), tuple(bool(r) for r in d["reductions"]),
                   int(d.get("stem_stride", 1)))


# ---------------------------------------------------------------------------
# Cell
# ---------------------------------------------------------------------------

class Preprocess(nn.Module):
    """ReLU-conv1x1-norm mapping an incoming tensor onto the cell's width and grid."""

    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.op = nn.Sequential(
            nn.ReLU(inplace=False),
            nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
            _norm(c_out),
        )

    def forward(self, x):
        return self.op(x)


class Cell(nn.Module):
    """An extension unit built from a genotype for one layer shape.

    ``forward(s0, s1)`` takes the outputs of the cells two and one layers back.
    Node values are sums of incoming edge results; the output concatenates
    nodes 3..6 and projects back to ``shape.channels``.
    """

    def __init__(self, arch: CellArchitecture, shape: LayerShape):
        super().__init__()
        self.arch = arch
        self.shape = shape
        c = shape.channels
        s = shape.stride
        # cell k-2 can sit one reduction above cell k-1
        stride0 = _grid_ratio(shape.in0, shape.in1)
        self.pre0 = Preprocess(shape.in0[0], c, stride0)
        self.pre1 = Preprocess(shape.in1[0], c, 1)
        self.edge_ops = nn.ModuleDict()
        for (i, j), name in arch.ops:
            stride = s if i <= N_INPUT_NODES else 1
            self.edge_ops[f"{i}_{j}"] = OPS[name].build(c, stride)
        self.project = nn.Sequential(
            nn.Conv2d(N_INTERMEDIATE_NODES * c, c, 1, bias=False),
            _norm(c),
        )

    def node_values(self, s0, s1):
        nodes = {1: self.pre0(s0), 2: self.pre1(s1)}
        for j in INTERMEDIATE_NODES:
            nodes[j] = sum(self.edge_ops[f"{i}_{j}"](nodes[i]) for i in range(1, j))
        return nodes

    def concat(self, s0, s1):
        nodes = self.node_values(s0, s1)
        return torch.cat([nodes[j] for j in INTERMEDIATE_NODES], dim=1)

    def forward(self, s0, s1):
        return self.project(self.concat(s0, s1))


def _grid_ratio(big: Tuple[int, int, int], small: Tuple[int, int, int]) -> int:
    for stride in (1, 2):
        if (_down(big[1], stride), _down(big[2], stride)) == small[1:]:
            return stride
    raise ConfigError(f"cannot align grid {big[1:]} onto {small[1:]}")


def build_cell(arch: CellArchitecture, shape: LayerShape, seed: Optional[int] = None) -> Cell:
    """Construct a cell; a ``seed`` makes parameter initialization reproducible."""
    if shape.channels <= 0:
        raise ConfigError("cell width must be positive")
    if seed is None:
        return Cell(arch, shape)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Cell(arch, shape)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def arch_param_count(arch: CellArchitecture, shape: LayerShape) -> int:
    """Closed-form count of learnable scalars in ``build_cell(arch, shape)``."""
    c = shape.channels
    total = shape.in0[0] * c + shape.in1[0] * c  # preprocessing 1x1 convs
    total += N_INTERMEDIATE_NODES * c * c  # output projection
    total += sum(OPS[name].param_count(c) for _, name in arch.ops)
    return total
