import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgemorph.exceptions import (
    CyclicGraph,
    DanglingConnection,
    DegenerateShape,
    MalformedDocument,
    ShapeMismatch,
    UnsupportedTopology,
)
from forgemorph.netgraph import (
    LayerKind,
    LayerSpec,
    chain,
    dumps_network,
    fuse_residual_blocks,
    layer_output_shape,
    parse_network,
    to_document,
)

from conftest import conv, fc, pool, residual_doc


def test_mnist_structure(mnist):
    kinds = [l.kind for l in mnist.layers]
    assert kinds.count(LayerKind.CONV) == 3
    assert kinds.count(LayerKind.MAX_POOL) == 3
    assert kinds.count(LayerKind.FULLY_CONNECTED) == 1
    assert [l.filters for l in mnist.conv_layers] == [8, 16, 32]
    assert mnist.fc_layers[0].fc_in == 3 * 3 * 32
    pos = {l.id: i for i, l in enumerate(mnist.layers)}
    assert all(pos[s] < pos[d] for s, d in mnist.connections)


def test_input_output_only_is_valid():
    g = chain("empty", (4, 4, 1), [])
    assert g.costable_layers == []


def test_residual_unequal_channels_rejected():
    doc = residual_doc()
    doc["layers"][3]["filters"] = 8  # c2 now emits 8 channels, shortcut carries 4
    doc["layers"][5]["fc_in"] = None
    with pytest.raises(ShapeMismatch):
        parse_network(doc)


def test_explicit_residual_add_annotated():
    g = parse_network(residual_doc())
    adds = [l for l in g.layers if l.kind is LayerKind.RESIDUAL_ADD]
    assert [a.id for a in adds] == ["merge"]
    assert dict(g.residual_blocks)["merge"] == ("c1", "c2", "merge")
    assert g.block_of("c1") == "merge"
    assert g.block_of("c0") is None


def test_implicit_convergence_gets_add_node():
    doc = residual_doc()
    doc["layers"] = [l for l in doc["layers"] if l["id"] != "merge"]
    doc["connections"] = [["in", "c0"], ["c0", "c1"], ["c1", "c2"], ["c2", "fc"],
                          ["c0", "fc"], ["fc", "out"]]
    g = parse_network(doc)
    assert "fc_add" in g
    assert g.layer("fc_add").kind is LayerKind.RESIDUAL_ADD
    assert g.predecessors("fc") == ["fc_add"]
    assert sorted(g.predecessors("fc_add")) == ["c0", "c2"]


def test_sequential_chain_unchanged_by_fusion(mnist):
    assert fuse_residual_blocks(mnist) is mnist


def test_three_branches_rejected():
    doc = {
        "name": "tri",
        "layers": [
            {"id": "in", "kind": "Input", "in_shape": [8, 8, 4]},
            conv("a", 4, padding=1), conv("b", 4, padding=1), conv("c", 4, padding=1),
            conv("join", 4, padding=1),
            {"id": "out", "kind": "Output"},
        ],
        "connections": [["in", "a"], ["in", "b"], ["in", "c"],
                        ["a", "join"], ["b", "join"], ["c", "join"], ["join", "out"]],
    }
    with pytest.raises(UnsupportedTopology):
        parse_network(doc)


@pytest.mark.parametrize("h,w,k,s,p,expected", [
    (28, 28, 3, 1, 1, (28, 28, 7)),
    (32, 32, 2, 2, 0, (16, 16, 7)),
])
def test_layer_output_shape(h, w, k, s, p, expected):
    l = LayerSpec("c", LayerKind.CONV, filters=7, kernel=k, stride=s, padding=p, in_shape=(h, w, 3))
    assert layer_output_shape(l) == expected


def test_layer_output_shape_pool_keeps_channels():
    l = LayerSpec("p", LayerKind.MAX_POOL, kernel=2, stride=2, padding=0, in_shape=(32, 32, 5))
    assert layer_output_shape(l) == (16, 16, 5)


def test_degenerate_shape():
    l = LayerSpec("c", LayerKind.CONV, filters=1, kernel=7, stride=1, padding=0, in_shape=(5, 5, 1))
    with pytest.raises(DegenerateShape):
        layer_output_shape(l)
    with pytest.raises(DegenerateShape):
        chain("bad", (5, 5, 1), [conv("c", 1, kernel=7)])


def test_malformed_documents():
    with pytest.raises(MalformedDocument):
        parse_network("{not json")
    with pytest.raises(MalformedDocument):
        parse_network({"layers": [], "connections": [], "extra": 1})
    with pytest.raises(MalformedDocument):
        chain("x", (4, 4, 1), [{"id": "c", "kind": "Conv", "filters": 2, "kernel": 3, "color": 1}])
    with pytest.raises(MalformedDocument):
        chain("x", (4, 4, 1), [{"id": "f", "kind": "FullyConnected", "fc_out": 2, "kernel": 3}])
    with pytest.raises(MalformedDocument):
        chain("x", (4, 4, 1), [{"id": "c", "kind": "Conv", "filters": 0, "kernel": 3}])


def test_cycle_and_dangling():
    base = {"name": "n", "layers": [
        {"id": "in", "kind": "Input", "in_shape": [4, 4, 1]},
        conv("a", 1, padding=1), conv("b", 1, padding=1),
        {"id": "out", "kind": "Output"}]}
    with pytest.raises(CyclicGraph):
        parse_network({**base, "connections": [["in", "a"], ["a", "b"], ["b", "a"], ["b", "out"]]})
    with pytest.raises(DanglingConnection):
        parse_network({**base, "connections": [["in", "a"], ["a", "ghost"]]})
    with pytest.raises(DanglingConnection):
        parse_network({**base, "connections": [["in", "a"], ["a", "out"]]})  # b unused


def test_declared_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        chain("x", (8, 8, 1), [{**conv("c", 2), "in_shape": [8, 8, 3]}])
    with pytest.raises(ShapeMismatch):
        chain("x", (8, 8, 1), [{**fc("f", 2), "fc_in": 5}])


def test_roundtrip_is_identity_on_canonical_form(mnist):
    again = parse_network(dumps_network(mnist))
    assert to_document(again) == to_document(mnist)
    assert again == mnist


def test_with_filters_repropagates(mnist):
    narrow = mnist.with_filters({"conv1": 4, "conv2": 8, "conv3": 16})
    assert narrow.layer("conv2").in_channels == 4
    assert narrow.fc_layers[0].fc_in == 3 * 3 * 16


# random sequential networks: shape propagation is total and order is a linear extension
layer_st = st.one_of(
    st.tuples(st.just("conv"), st.integers(1, 8), st.sampled_from([1, 2, 3]), st.integers(0, 1)),
    st.tuples(st.just("pool"), st.just(0), st.just(2), st.just(0)),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(layer_st, min_size=1, max_size=5), st.integers(8, 20))
def test_random_chains_parse_and_roundtrip(spec, size):
    layers = []
    h = size
    for i, (kind, n, k, p) in enumerate(spec):
        if kind == "conv":
            if h + 2 * p - k + 1 < 1:
                continue
            layers.append(conv(f"l{i}", n, kernel=k, padding=p))
            h = h + 2 * p - k + 1
        else:
            if h < 2:
                continue
            layers.append(pool(f"l{i}"))
            h = h // 2
    layers.append(fc("fc", 3))
    g = chain("rand", (size, size, 1), layers)
    pos = {l.id: i for i, l in enumerate(g.layers)}
    assert all(pos[s] < pos[d] for s, d in g.connections)
    assert g.fc_layers[0].in_height == h
    assert parse_network(json.loads(dumps_network(g))) == g
