import numpy as np
import pytest

from gf2cnn.checkpoint import Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from gf2cnn.errors import CheckpointError
from gf2cnn.nn.builders import insert_compression, toy_fire_net
from gf2cnn.trainer import calibrate_graph


@pytest.fixture
def compressed():
    g = toy_fire_net(input_shape=(1, 16, 16))
    g.init_weights(0)
    insert_compression(g, "fire2/squeeze", 4, compressed_channels=16)
    calibrate_graph(g, np.random.default_rng(0).normal(size=(4, 1, 16, 16)).astype(np.float32))
    return Checkpoint(g, iteration=42, extra={"top1": 0.5})


def test_round_trip_is_byte_identical(compressed, tmp_path):
    raw = to_bytes(compressed)
    save_checkpoint(tmp_path / "a.ckpt", compressed)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert to_bytes(back) == raw
    assert back.iteration == 42 and back.extra == {"top1": 0.5}
    assert back.graph_hash == compressed.graph_hash
    assert back.graph.quant == compressed.graph.quant
    assert back.grad_norms() == compressed.grad_norms()


def test_restored_model_computes_the_same(compressed):
    back = from_bytes(to_bytes(compressed))
    x = np.random.default_rng(1).normal(size=(3, 1, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(back.graph.forward(x), compressed.graph.forward(x))


def test_graph_hash_mismatch(compressed):
    with pytest.raises(CheckpointError, match="does not match"):
        from_bytes(to_bytes(compressed), expect_hash=toy_fire_net().graph_hash())


@pytest.mark.parametrize("where", [0, 20, -40, -1])
def test_corruption_detected(compressed, where):
    raw = bytearray(to_bytes(compressed))
    raw[where] ^= 0x01
    with pytest.raises(CheckpointError):
        from_bytes(bytes(raw))


def test_truncation_and_missing(compressed, tmp_path):
    with pytest.raises(CheckpointError):
        from_bytes(to_bytes(compressed)[:-100])
    with pytest.raises(CheckpointError):
        from_bytes(b"GF2C")
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "none.ckpt")
