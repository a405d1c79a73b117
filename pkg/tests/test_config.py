import pytest

from gf2cnn.config import load_config, parse_config, shipped_configs
from gf2cnn.errors import ConfigError, GraphError
from gf2cnn.nn.builders import toy_fire_net

TOY = {"network": {"name": "t", "input": {"name": "data", "shape": [1, 8, 8], "type": "float32"}},
       "layer": [{"kind": "conv", "name": "c", "inputs": ["data"], "out_channels": 2, "kernel": 1}]}


def test_shipped_configs_load():
    assert set(shipped_configs()) >= {"toy-fire-net", "squeezenet-memory", "mobilenetv2-memory", "ssd512-memory"}
    for name in shipped_configs():
        cfg = load_config(name)
        cfg.build_graph().validate()


def test_toy_config_matches_builder():
    assert load_config("toy-fire-net").build_graph().graph_hash() == toy_fire_net().graph_hash()


def test_minimal_explicit_network():
    g = parse_config(TOY).build_graph()
    assert g.edges["c"].shape == (2, 8, 8)


def test_config_file_on_disk(tmp_path):
    p = tmp_path / "x.toml"
    p.write_text('[network]\ngeometry = "toy-fire-net"\n[data]\nkind = "synthetic"\nn = 100\ntrain = 50\n')
    cfg = load_config(p)
    assert cfg.data.n == 100 and cfg.base_dir == tmp_path
    assert cfg.resolve("a.idx") == tmp_path / "a.idx"


@pytest.mark.parametrize("doc", [
    {**TOY, "optimizer": {}},
    {"layer": TOY["layer"]},
    {**TOY, "train": {"learning_rate": 0.1}},
    {**TOY, "quant": {"bitz": 4}},
    {**TOY, "compression": {"mode": "4x4"}},
    {**TOY, "data": {"kind": "imagenet"}},
    {**TOY, "data": {"kind": "mnist-idx"}},
    {**TOY, "data": {"n": 10, "train": 10}},
    {"network": {"geometry": "vgg16"}},
    {"network": {"geometry": "toy-fire-net", "geometry_args": {"depth": 3}}},
    {"network": {"geometry": "toy-fire-net"}, "layer": TOY["layer"]},
    {"network": TOY["network"]},
    {**TOY, "layer": [{"name": "c", "inputs": ["data"]}]},
    {**TOY, "fusion": {"group": [{"layers": ["c"]}]}},
    {**TOY, "memory": {"variant": [{"label": "x", "mode": "4x4"}]}},
    {**TOY, "memory": {"colour": 1}},
])
def test_config_errors(doc):
    with pytest.raises(ConfigError):
        parse_config(doc).build_graph()


def test_graph_error_names_the_record():
    doc = {**TOY, "layer": [{"kind": "fire", "prefix": "f", "input": "data", "expand1x1": 5,
                             "expand3x3": 4, "ratio": 8}]}
    with pytest.raises(GraphError, match="layer record 0"):
        parse_config(doc).build_graph()


def test_unknown_shipped_name():
    with pytest.raises(ConfigError, match="shipped configs"):
        load_config("no-such-config")


def test_bad_toml(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[network\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_finetune_defaults_to_train():
    cfg = parse_config({**TOY, "train": {"base_lr": 0.05}})
    assert cfg.finetune.base_lr == 0.05
