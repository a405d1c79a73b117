import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gf2cnn.config import load_config
from gf2cnn.errors import ConfigError, FusionError
from gf2cnn.memory import (
    Variant,
    build_variant,
    fmt_kb,
    fmt_mb,
    memory_table,
    plan_memory,
    run_variants,
    weight_size,
)
from gf2cnn.nn.builders import insert_quantization, squeezenet_v11, toy_fire_net
from gf2cnn.nn.fusion import plan_from_stored
from gf2cnn.nn.graph import NetworkGraph


def _columns(name):
    m = load_config(name).memory
    return run_variants(m.geometry, m.variants, m.rows, m.separate, m.targets, m.batch)


def _kb(cols, row):
    return [fmt_kb(rep.row(row).bytes) for _, rep in cols]


def test_squeezenet_squeeze_maps():
    cols = _columns("squeezenet-memory")
    assert _kb(cols, "fire2,3/squeeze") == ["392.0", "98.0", "73.5", "49.0", "73.5", "49.0", "24.5", "18.4"]


def test_mobilenet_linear_bottleneck_map():
    cols = _columns("mobilenetv2-memory")
    assert _kb(cols, "conv2_1/linear") == ["784.0", "220.5", "171.5", "122.5", "196.0", "147.0", "98.0",
                                          "49.0", "36.8"]


def test_ssd_front_totals_and_factors():
    cols = _columns("ssd512-memory")
    totals = [rep.total // 1024 for _, rep in cols]
    assert totals == [38912, 2048, 512, 256, 128]
    base = cols[0][1]
    assert [round(rep.factor_vs(base)) for _, rep in cols[1:]] == [19, 76, 152, 304]
    assert base.row("input (int8)").bytes == 768 * 1024 and base.row("input (int8)").separate
    assert base.row("conv1").bytes == 16384 * 1024
    assert base.row("mpool1").bytes == 4096 * 1024
    assert base.row("fire2,3/expand").bytes == 16384 * 1024


def test_table_text_layout():
    text = memory_table(_columns("ssd512-memory"))
    lines = text.splitlines()
    assert lines[0].split()[:3] == ["A", "size,", "KB"]
    total = next(l for l in lines if l.startswith("Total")).split()
    assert total[1:] == ["38912", "2048", "512", "256", "128"]
    assert lines[-1].split()[1:] == ["-", "19x", "76x", "152x", "304x"]


def test_weight_size():
    g = squeezenet_v11()
    assert fmt_mb(weight_size(g)) == "4.7"
    assert fmt_mb(weight_size(g, 8)) == "1.2"
    assert weight_size(NetworkGraph("data", (1, 4, 4))) == 0


def test_weight_size_per_layer_bits():
    g = toy_fire_net()
    assert weight_size(g, {"conv1": 8}) < weight_size(g)


def test_kb_rounding_is_half_up():
    assert fmt_kb(18816) == "18.4"
    assert fmt_kb(256) == "0.3"  # exactly 0.25 KB; banker's rounding would give 0.2
    assert fmt_kb(256, 0) == "0" and fmt_kb(512, 0) == "1"


def test_default_rows_keep_input_separate():
    g = toy_fire_net()
    rep = plan_memory(g)
    assert rep.row("data").separate
    assert rep.total == sum(r.bytes for r in rep.rows if not r.separate)
    assert rep.row("conv1").bytes == 16 * 16 * 16 * 4


def test_empty_graph():
    rep = plan_memory(NetworkGraph("data", (1, 4, 4)))
    assert rep.total == 0


def test_unfused_concat_of_stored_maps_is_free():
    rep = plan_memory(toy_fire_net())
    assert rep.row("fire3/concat").bytes == 0


def test_batch_scales_linearly():
    g = toy_fire_net()
    assert plan_memory(g, batch=4).total == 4 * plan_memory(g).total


@settings(max_examples=20, deadline=None)
@given(hi=st.integers(2, 16), drop=st.integers(1, 14))
def test_fewer_bits_never_cost_more(hi, drop):
    lo = max(1, hi - drop)
    totals = []
    for bits in (hi, lo):
        g = toy_fire_net()
        insert_quantization(g, "fire2/squeeze", bits)
        totals.append(plan_memory(g, plan_from_stored(g, ["fire2/squeeze", "fire3/squeeze"])).total)
    assert totals[1] <= totals[0]


@pytest.mark.parametrize("bits", [8, 4, 2])
def test_factor_composition(bits):
    targets = ["fire2/squeeze", "fire3/squeeze"]
    fused_g, fused_p = build_variant("toy-fire-net", Variant("F", fused=True, keep=targets), targets)
    fq_g, fq_p = build_variant("toy-fire-net", Variant("FQ", fused=True, bits=bits), targets)
    rows = {"maps": targets}
    fused = plan_memory(fused_g, fused_p, rows=rows)
    fq = plan_memory(fq_g, fq_p, rows=rows)
    base = plan_memory(*build_variant("toy-fire-net", Variant("fp32"), targets), rows=rows)
    assert fq.factor_vs(base) == pytest.approx(fused.factor_vs(base) * 32 / bits)


def test_variant_errors():
    with pytest.raises(ConfigError):
        build_variant("alexnet", Variant("x"))
    with pytest.raises(ConfigError):
        build_variant("toy-fire-net", Variant("x", mode="1x1"), ["fire2/squeeze"])
    with pytest.raises(ConfigError):
        Variant.from_dict({"label": "x", "colour": "red"})
    with pytest.raises(FusionError):
        build_variant("toy-fire-net", Variant("x", fused=True), ["no-such-edge"])


def test_csv_has_one_line_per_edge():
    g = toy_fire_net()
    text = plan_memory(g).to_csv()
    assert len(text.strip().splitlines()) == 1 + len(g.edges)
