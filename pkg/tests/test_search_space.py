import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from seulab.search_space import (
    EDGES,
    INTERMEDIATE_NODES,
    N_OPS,
    OP_NAMES,
    OPS,
    CellArchitecture,
    CellShapePlan,
    ConfigError,
    LayerShape,
    arch_param_count,
    build_cell,
    count_params,
    enumerate_edges,
    random_architecture,
)


def test_edge_enumeration():
    edges = enumerate_edges()
    assert len(edges) == 14
    assert edges[0] == (1, 3)
    assert edges[-1] == (5, 6)
    assert sum(1 for _, j in edges if j == 6) == 5
    assert edges == sorted(edges, key=lambda e: (e[1], e[0]))


def test_registry_has_eight_ops():
    assert N_OPS == 8
    assert len(set(OP_NAMES)) == 8


genotype_indices = st.lists(st.integers(0, N_OPS - 1), min_size=14, max_size=14)


@settings(max_examples=1000, deadline=None)
@given(genotype_indices)
def test_genotype_round_trip(indices):
    arch = CellArchitecture.from_indices(indices)
    assert CellArchitecture.decode(arch.encode()) == arch
    assert arch.indices() == indices


def test_text_format():
    arch = CellArchitecture.uniform("skip_connect")
    lines = arch.encode().splitlines()
    assert lines[0] == "1-3:skip_connect"
    assert lines[-1] == "5-6:skip_connect"
    assert len(lines) == 14


@pytest.mark.parametrize("text", [
    "1-3:skip_connect",
    CellArchitecture.uniform("none").encode().replace("none", "conv_7x7", 1),
    CellArchitecture.uniform("none").encode() + "\n1-3:none",
    CellArchitecture.uniform("none").encode().replace("1-3", "1_3"),
])
def test_decode_rejects_bad_text(text):
    with pytest.raises(ConfigError):
        CellArchitecture.decode(text)


@pytest.mark.parametrize("name", OP_NAMES)
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("hw", [(8, 8), (7, 7), (14, 10), (4, 4)])
def test_op_shape_closure(name, stride, hw):
    c = 6
    op = OPS[name].build(c, stride)
    x = torch.randn(2, c, *hw)
    y = op(x)
    assert tuple(y.shape[1:]) == OPS[name].output_shape((c, *hw), stride)


def _walk_shapes(arch, shape):
    """Independent shape oracle: walk the DAG with each op's declared output shape."""
    c = shape.channels
    _, h, w = shape.in1
    nodes = {1: (c, h, w), 2: (c, h, w)}
    for j in INTERMEDIATE_NODES:
        outs = set()
        for i in range(1, j):
            stride = shape.stride if i <= 2 else 1
            outs.add(OPS[arch.edges[(i, j)]].output_shape(nodes[i], stride))
        assert len(outs) == 1, f"node {j} receives mismatched shapes {outs}"
        nodes[j] = outs.pop()
    concat = (4 * c,) + nodes[6][1:]
    return concat, (c,) + nodes[6][1:]


def test_sampled_cell_shape_matches_oracle():
    rng = np.random.default_rng(3)
    for reduction in (False, True):
        arch = random_architecture(rng)
        shape = LayerShape((16, 8, 8), (16, 8, 8), 16, reduction)
        concat_shape, out_shape = _walk_shapes(arch, shape)
        cell = build_cell(arch, shape, seed=0)
        x = torch.randn(3, 16, 8, 8)
        assert tuple(cell.concat(x, x).shape[1:]) == concat_shape
        y = cell(x, x)
        assert tuple(y.shape[1:]) == out_shape == shape.out_shape
        if not reduction:
            assert tuple(y.shape[2:]) == (8, 8)


def test_all_zero_cell_is_zero_before_projection():
    shape = LayerShape((4, 6, 6), (4, 6, 6), 4, False)
    cell = build_cell(CellArchitecture.uniform("none"), shape, seed=0)
    x = torch.randn(2, 4, 6, 6)
    assert torch.count_nonzero(cell.concat(x, x)) == 0


def test_identity_edges_sum_into_node():
    edges = {e: "none" for e in EDGES}
    edges[(1, 3)] = edges[(2, 3)] = "skip_connect"
    shape = LayerShape((4, 6, 6), (4, 6, 6), 4, False)
    cell = build_cell(CellArchitecture.from_mapping(edges), shape, seed=0)
    cell.pre0 = nn.Identity()
    cell.pre1 = nn.Identity()
    x = torch.randn(2, 4, 6, 6)
    nodes = cell.node_values(x, x)
    assert torch.equal(nodes[3], 2 * x)


def test_param_count_matches_introspection():
    rng = np.random.default_rng(0)
    plan = CellShapePlan.build((1, 14, 14), 4, 6)
    for _ in range(20):
        arch = random_architecture(rng)
        for shape in plan.layers():
            assert arch_param_count(arch, shape) == count_params(build_cell(arch, shape, seed=1))


def test_parameter_free_cells_share_count():
    shape = LayerShape((3, 8, 8), (5, 8, 8), 7, False)
    zero = build_cell(CellArchitecture.uniform("none"), shape)
    ident = build_cell(CellArchitecture.uniform("skip_connect"), shape)
    # only the two input preprocessors and the output projection carry weights
    expected = 3 * 7 + 5 * 7 + 4 * 7 * 7
    assert count_params(zero) == count_params(ident) == expected
    assert arch_param_count(CellArchitecture.uniform("none"), shape) == expected


@pytest.mark.parametrize("name", ["sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5"])
def test_conv_params_scale_with_width(name):
    op = OPS[name]
    k = op.kernel
    for c in (8, 32, 128):
        small = count_params(op.build(c, 1))
        big = count_params(op.build(2 * c, 1))
        assert small == c * k * k + c * c
        assert big == 2 * c * k * k + 4 * c * c
        assert 2.0 < big / small < 4.0
    # the ratio tends to 4 as the pointwise term dominates
    assert count_params(op.build(512, 1)) / count_params(op.build(256, 1)) > 3.8


def test_same_seed_same_parameters():
    arch = random_architecture(np.random.default_rng(1))
    shape = LayerShape((8, 8, 8), (8, 8, 8), 8, True)
    a = build_cell(arch, shape, seed=42).state_dict()
    b = build_cell(arch, shape, seed=42).state_dict()
    c = build_cell(arch, shape, seed=43).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a if a[k].numel())


def test_default_plan_reductions():
    plan = CellShapePlan.build((1, 28, 28), 6, 4)
    assert plan.reductions == (False, True, False, True, False, False)
    assert plan.channels == (4, 8, 8, 16, 16, 16)
    assert plan.output_channels == 16
    shapes = plan.layers()
    for prev, cur in zip(shapes, shapes[1:]):
        assert cur.in1 == prev.out_shape
    assert shapes[-1].out_shape[0] == plan.output_channels


def test_stem_stride_plan_runs():
    plan = CellShapePlan.build((1, 28, 28), 4, 4, stem_stride=2)
    assert plan.stem_shape == (1, 14, 14)
    x = torch.randn(2, 1, 28, 28)
    s0 = s1 = plan.stem()(x)
    arch = random_architecture(np.random.default_rng(5))
    for shape in plan.layers():
        s0, s1 = s1, build_cell(arch, shape, seed=0)(s0, s1)
        assert tuple(s1.shape[1:]) == shape.out_shape


def test_bad_plans_rejected():
    with pytest.raises(ConfigError):
        CellShapePlan.build((1, 28, 28), 0, 4)
    with pytest.raises(ConfigError):
        CellShapePlan.build((1, 28, 28), 3, 4, reduction_layers=[4])
    with pytest.raises(ConfigError):
        CellShapePlan((1, 8, 8), (4, 0), (False, False))
