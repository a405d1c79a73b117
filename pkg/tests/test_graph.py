import numpy as np
import pytest

from gf2cnn.errors import GraphError, ShapeError
from gf2cnn.nn.builders import (
    build_bottleneck_module,
    build_fire_module,
    compressed_edges,
    insert_compression,
    insert_quantization,
    integer_toy_fire_net,
    toy_fire_net,
)
from gf2cnn.nn.graph import NetworkGraph
from gf2cnn.nn.layers import EdgeType, LayerSpec
from gf2cnn.trainer import calibrate_graph


def test_fire_module_widths():
    g = NetworkGraph("data", (16, 8, 8))
    out = build_fire_module(g, "f", "data", 64, 64, ratio=8)
    assert g.edges["f/concat"].shape == (128, 8, 8)
    assert g.edges[out].shape == (16, 8, 8)


def test_fire_module_bad_ratio():
    g = NetworkGraph("data", (16, 8, 8))
    with pytest.raises(GraphError):
        build_fire_module(g, "f", "data", 64, 60, ratio=8)


def test_bottleneck_expansion():
    g = NetworkGraph("data", (16, 8, 8))
    out = build_bottleneck_module(g, "b", "data", 24, factor=6, stride=2)
    assert g.edges["b/expand"].shape == (96, 8, 8)
    assert g.edges[out].shape == (24, 4, 4)
    with pytest.raises(GraphError):
        build_bottleneck_module(NetworkGraph("data", (16, 8, 8)), "b", "data", 24, factor=7)


def test_unknown_input_edge_and_duplicates():
    g = NetworkGraph("data", (1, 4, 4))
    g.add("relu", "r", "nothing")
    with pytest.raises(GraphError):
        g.validate()
    g = NetworkGraph("data", (1, 4, 4))
    g.add("relu", "r", "data")
    with pytest.raises(GraphError):
        g.add("relu", "r", "data")


def test_unknown_layer_kind():
    with pytest.raises(GraphError):
        NetworkGraph("data", (1, 4, 4)).add("softsign", "s", "data")


def test_signed_quantizer_cannot_feed_binarize():
    g = toy_fire_net()
    with pytest.raises(GraphError, match="unsigned"):
        insert_compression(g, "fire2/squeeze", 4, signed=True)


def test_decompress_must_restore_the_map():
    g = toy_fire_net()
    insert_compression(g, "fire2/squeeze", 2)
    spec = g.layer("fire2/squeeze/decompress")
    spec.params["layers"][0]["stride"] = 2
    spec.params["layers"][0]["transposed"] = False
    with pytest.raises((GraphError, ShapeError)):
        g.validate()


def test_compression_sandwich_edges_and_types():
    g = toy_fire_net()
    insert_compression(g, "fire2/squeeze", 4, compressed_channels=16)
    e = g.edges
    assert str(e["fire2/squeeze:q"].etype) == "uint4"
    assert e["fire2/squeeze:bits"].shape == (32, 8, 8)
    assert e["fire2/squeeze:stored"].shape == (16, 8, 8) and str(e["fire2/squeeze:stored"].etype) == "bin1"
    assert e["fire2/squeeze:deq"].shape == e["fire2/squeeze"].shape
    assert all(info.origin == "fire2/squeeze" for k, info in e.items() if k.startswith("fire2/squeeze:"))
    assert compressed_edges(g) == ["fire2/squeeze"]
    assert g.consumers_of("fire2/squeeze") == [g.layer("fire2/squeeze/quant")]


def _calibrated_pair(bits):
    x = np.random.default_rng(0).normal(size=(8, 1, 32, 32)).astype(np.float32)
    base = toy_fire_net()
    base.init_weights(1)
    plain, comp = base.copy(), base.copy()
    insert_quantization(plain, "fire2/squeeze", bits)
    insert_compression(comp, "fire2/squeeze", bits)
    calibrate_graph(plain, x)
    calibrate_graph(comp, x)
    return x, plain, comp


@pytest.mark.parametrize("bits", [1, 4, 8])
def test_full_width_identity_sandwich_equals_plain_quantization(bits):
    x, plain, comp = _calibrated_pair(bits)
    np.testing.assert_array_equal(comp.forward(x), plain.forward(x))


def test_integer_graph_is_deterministic_and_exact():
    g = integer_toy_fire_net(seed=3)
    x = np.random.default_rng(1).integers(0, 256, (4, 1, 16, 16)).astype(np.uint8)
    a, b = g.forward(x), g.forward(x)
    assert np.issubdtype(a.dtype, np.integer)
    np.testing.assert_array_equal(a, b)
    one = np.concatenate([g.forward(x[i:i + 1]) for i in range(4)])
    np.testing.assert_array_equal(a, one)


def test_describe_round_trip_keeps_hash():
    g = toy_fire_net()
    insert_compression(g, "fire3/squeeze", 8, compressed_channels=32)
    again = NetworkGraph.from_description(g.describe())
    assert again.graph_hash() == g.graph_hash()
    assert again.edges.keys() == g.edges.keys()


def test_hash_changes_with_structure():
    a, b = toy_fire_net(), toy_fire_net(squeeze=4)
    assert a.graph_hash() != b.graph_hash()


def test_input_shape_checked():
    g = toy_fire_net()
    g.init_weights(0)
    with pytest.raises(ShapeError):
        g.forward(np.zeros((1, 1, 16, 16), np.float32))


def test_check_weights_reports_missing_and_bad_shapes():
    g = toy_fire_net()
    with pytest.raises(GraphError):
        g.check_weights()
    g.init_weights(0)
    g.weights["conv1"]["W"] = np.zeros((3, 3, 3, 3), np.float32)
    with pytest.raises(ShapeError):
        g.check_weights()


def test_backward_needs_forward():
    g = toy_fire_net()
    g.init_weights(0)
    with pytest.raises(GraphError):
        g.backward(np.zeros((1, 10, 1, 1)))


def test_edge_type_parse():
    assert EdgeType.parse("uint8") == EdgeType("uint", 8)
    assert EdgeType.parse("bin") == EdgeType("bin", 1)
    with pytest.raises(GraphError):
        EdgeType.parse("complex64")


def test_add_spec_with_explicit_output():
    g = NetworkGraph("data", (2, 4, 4))
    g.add_spec(LayerSpec("r", "relu", ["data"], "act"))
    assert g.output_edge == "act" and g.edges["act"].shape == (2, 4, 4)
