"""Architecture builders: fire modules, ReLU bottlenecks, quantize/compress insertion, reference geometries."""
from __future__ import annotations

import numpy as np

from ..errors import GraphError
from .compression import make_block
from .layers import FLOAT, EdgeType, LayerSpec
from .graph import NetworkGraph


def add_conv(g: NetworkGraph, name: str, inp: str, out_channels: int, kernel: int = 1,
             stride: int = 1, pad: int = 0, relu: bool = True) -> str:
    return g.add("conv", name, inp, out_channels=out_channels, kernel=kernel, stride=stride, pad=pad,
                 activation="relu" if relu else "none")


def build_fire_module(g: NetworkGraph, prefix: str, inp: str, expand1x1: int, expand3x3: int,
                      squeeze: int | None = None, ratio: int = 8, squeeze_name: str | None = None,
                      compression: dict | None = None) -> str:
    """expand1x1 || expand3x3 -> concat -> squeeze1x1 [-> compression sandwich].

    ``squeeze=None`` derives the squeeze width as (expand1x1 + expand3x3) / ratio;
    ``squeeze=0`` stops at the concat.
    """
    if expand1x1 < 1 or expand3x3 < 1:
        raise GraphError(f"{prefix}: expand widths must be positive")
    wide = expand1x1 + expand3x3
    if squeeze is None:
        if ratio < 1 or wide % ratio:
            raise GraphError(f"{prefix}: expand width {wide} is not divisible by squeeze ratio {ratio}")
        squeeze = wide // ratio
    e1 = add_conv(g, f"{prefix}/expand1x1", inp, expand1x1, 1)
    e3 = add_conv(g, f"{prefix}/expand3x3", inp, expand3x3, 3, pad=1)
    out = g.add("concat", f"{prefix}/concat", [e1, e3])
    if squeeze == 0:
        if compression:
            raise GraphError(f"{prefix}: compression needs a squeeze layer")
        return out
    if squeeze < 0:
        raise GraphError(f"{prefix}: negative squeeze width")
    out = add_conv(g, squeeze_name or f"{prefix}/squeeze", out, squeeze, 1)
    if compression:
        out = insert_compression(g, out, **compression)
    return out


def build_bottleneck_module(g: NetworkGraph, prefix: str, inp: str, out_channels: int, factor: int = 6,
                            stride: int = 1, relu_after_linear: bool = True) -> str:
    """Inverted-residual style block; the depthwise 3x3 is a standard conv at this scale."""
    if not 2 <= factor <= 6:
        raise GraphError(f"{prefix}: expansion factor {factor} outside [2, 6]")
    cin = g.edges[inp].shape[0]
    h = add_conv(g, f"{prefix}/expand", inp, cin * factor, 1)
    h = add_conv(g, f"{prefix}/dwise", h, cin * factor, 3, stride=stride, pad=1)
    return add_conv(g, f"{prefix}/linear", h, out_channels, 1, relu=relu_after_linear)


def _rewire(g: NetworkGraph, edge: str, new_edge: str, skip: set[str]) -> None:
    for spec in g.layers:
        if spec.name in skip:
            continue
        spec.inputs = [new_edge if e == edge else e for e in spec.inputs]
    if g.output == edge:
        g.output = new_edge


def _insert_chain(g: NetworkGraph, edge: str, chain: list[LayerSpec]) -> str:
    producer = g.producer_of(edge)
    at = 0 if producer is None else g.index_of(producer.name) + 1
    if g.output is None and g.output_edge == edge:
        g.output = edge
    _rewire(g, edge, chain[-1].output, {s.name for s in chain})
    for i, spec in enumerate(chain):
        g.add_spec(spec, at + i)
    g.validate()
    return chain[-1].output


def insert_quantization(g: NetworkGraph, edge: str, bits: int, signed: bool = False) -> str:
    """Quantize ``edge`` and dequantize it straight back for every consumer."""
    q = f"{edge}/quant"
    chain = [
        LayerSpec(q, "quantize", [edge], f"{edge}:q", {"bits": int(bits), "signed": bool(signed)}),
        LayerSpec(f"{edge}/dequant", "dequantize", [f"{edge}:q"], f"{edge}:deq", {"source": q}),
    ]
    return _insert_chain(g, edge, chain)


def insert_compression(g: NetworkGraph, edge: str, bits: int, mode: str = "1x1",
                       compressed_channels: int | None = None, init: str | None = None,
                       noise: float = 1e-3, seed: int = 0, signed: bool = False,
                       grad_norm: float = 1.0) -> str:
    """quantize -> binarize -> P stack -> stored GF(2) map -> R stack -> debinarize -> dequantize."""
    c, h, w = g.edges[edge].shape
    ct = bits * c if compressed_channels is None else int(compressed_channels)
    init = init or ("identity" if mode == "1x1" else "delta")
    block = make_block(bits, c, ct, mode, h, w, init=init, noise=noise, rng=np.random.default_rng(seed))
    P, R = block.P_layers[0], block.R_layers[0]

    def geom(p):
        return {"out_channels": p.cout, "kernel": p.kernel[0], "stride": p.stride, "pad": p.pad,
                "transposed": p.transposed, "output_padding": p.output_padding}

    q = f"{edge}/quant"
    chain = [
        LayerSpec(q, "quantize", [edge], f"{edge}:q", {"bits": int(bits), "signed": bool(signed)}),
        LayerSpec(f"{edge}/binarize", "binarize", [f"{edge}:q"], f"{edge}:bits",
                  {"bits": int(bits), "grad_norm": float(grad_norm)}),
        LayerSpec(f"{edge}/compress", "compress", [f"{edge}:bits"], f"{edge}:stored",
                  {"layers": [geom(P)], "mode": mode}),
        LayerSpec(f"{edge}/decompress", "decompress", [f"{edge}:stored"], f"{edge}:rbits",
                  {"layers": [geom(R)], "mode": mode, "restores": f"{edge}:bits"}),
        LayerSpec(f"{edge}/debinarize", "debinarize", [f"{edge}:rbits"], f"{edge}:codes", {"bits": int(bits)}),
        LayerSpec(f"{edge}/dequant", "dequantize", [f"{edge}:codes"], f"{edge}:deq", {"source": q}),
    ]
    out = _insert_chain(g, edge, chain)
    g.weights[f"{edge}/compress"] = {"L0.W": P.W, "L0.b": P.b}
    g.weights[f"{edge}/decompress"] = {"L0.W": R.W, "L0.b": R.b}
    return out


def compressed_edges(g: NetworkGraph) -> list[str]:
    """Base edges that carry a compression sandwich."""
    return [s.inputs[0][: -len(":bits")] for s in g.layers if s.kind == "compress"]


def quantized_edges(g: NetworkGraph) -> list[str]:
    return [s.inputs[0] for s in g.layers if s.kind == "quantize"]


# ------------------------------------------------------------ geometries

def toy_fire_net(input_shape=(1, 32, 32), classes: int = 10, width: int = 16,
                 expand: int = 32, squeeze: int = 8, input_type: EdgeType = FLOAT) -> NetworkGraph:
    """Two fire modules at desk scale; ``fire2/squeeze`` and ``fire3/squeeze`` are the compressible maps."""
    g = NetworkGraph("data", input_shape, input_type, name="toy-fire-net")
    h = add_conv(g, "conv1", "data", width, 3, stride=2, pad=1)
    h = g.add("maxpool", "pool1", h, window=3, stride=2, ceil_mode=True)
    h = add_conv(g, "fire2/squeeze", h, squeeze, 1)
    h = build_fire_module(g, "fire2", h, expand, expand, squeeze, squeeze_name="fire3/squeeze")
    h = build_fire_module(g, "fire3", h, expand, expand, 0)
    h = add_conv(g, "conv10", h, classes, 1, relu=False)
    g.add("avgpool", "pool10", h)
    g.validate()
    return g


def integer_toy_fire_net(seed: int = 0, input_shape=(1, 16, 16), max_weight: int = 3) -> NetworkGraph:
    """Toy fire-net on uint8 input with small integer weights: an exact integer path."""
    g = toy_fire_net(input_shape, classes=4, width=8, expand=8, squeeze=4,
                     input_type=EdgeType("uint", 8))
    g.layers = [s for s in g.layers if s.kind != "avgpool"]
    g.validate()
    rng = np.random.default_rng(seed)
    for spec, shapes in _param_shapes(g):
        g.weights[spec.name] = {k: rng.integers(-max_weight, max_weight + 1, size=s).astype(np.int32)
                                for k, s in shapes.items()}
    return g


def _param_shapes(g: NetworkGraph):
    from .layers import op_for

    edges = g.edges
    for spec in g.layers:
        shapes = op_for(spec.kind).param_shapes(spec, [edges[e] for e in spec.inputs])
        if shapes:
            yield spec, shapes


def squeezenet_v11(size: int = 227, classes: int = 1000) -> NetworkGraph:
    g = NetworkGraph("data", (3, size, size), name="squeezenet-v1.1")
    h = add_conv(g, "conv1", "data", 64, 3, stride=2)
    h = g.add("maxpool", "pool1", h, window=3, stride=2, ceil_mode=True)
    plan = [(2, 16, 64), (3, 16, 64), "pool3", (4, 32, 128), (5, 32, 128), "pool5",
            (6, 48, 192), (7, 48, 192), (8, 64, 256), (9, 64, 256)]
    for item in plan:
        if isinstance(item, str):
            h = g.add("maxpool", item, h, window=3, stride=2, ceil_mode=True)
            continue
        k, sq, ex = item
        h = add_conv(g, f"fire{k}/squeeze", h, sq, 1)
        h = build_fire_module(g, f"fire{k}", h, ex, ex, 0)
    h = add_conv(g, "conv10", h, classes, 1)
    g.add("avgpool", "pool10", h)
    g.validate()
    return g


def mobilenet_v2_front(size: int = 224, relu_after_linear: bool = False) -> NetworkGraph:
    """Stem plus the first two bottlenecks; ``conv2_1/linear`` is the map of interest."""
    g = NetworkGraph("data", (3, size, size), name="mobilenet-v2-front")
    h = add_conv(g, "conv1", "data", 32, 3, stride=2, pad=1)
    h = add_conv(g, "conv2_1/dwise", h, 32, 3, pad=1)
    h = add_conv(g, "conv2_1/linear", h, 16, 1, relu=relu_after_linear)
    build_bottleneck_module(g, "conv2_2", h, 24, factor=6, stride=2, relu_after_linear=relu_after_linear)
    g.validate()
    return g


def ssd512_front(size: int = 512) -> NetworkGraph:
    """SqueezeNet feature extractor up to fire4/squeeze on an 8-bit input frame."""
    g = NetworkGraph("data", (3, size, size), EdgeType("uint", 8), name="ssd512-front")
    h = add_conv(g, "conv1", "data", 64, 3, stride=2, pad=1)
    h = g.add("maxpool", "mpool1", h, window=3, stride=2, ceil_mode=True)
    h = add_conv(g, "fire2/squeeze", h, 16, 1)
    h = build_fire_module(g, "fire2", h, 64, 64, 16, squeeze_name="fire3/squeeze")
    h = build_fire_module(g, "fire3", h, 64, 64, 0)
    h = g.add("maxpool", "pool3", h, window=3, stride=2, ceil_mode=True)
    add_conv(g, "fire4/squeeze", h, 32, 1)
    g.validate()
    return g


GEOMETRIES = {
    "toy-fire-net": toy_fire_net,
    "squeezenet-v1.1": squeezenet_v11,
    "mobilenet-v2-front": mobilenet_v2_front,
    "ssd512-front": ssd512_front,
}
