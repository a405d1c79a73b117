"""Layer records and the per-kind operator registry used by graphs and the fused executor."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import gf2
from ..errors import GraphError
from ..quantizer import dequantize, quantize, quantize_backward
from . import ops
from .compression import binary_step, stack_backward, stack_forward
from .ops import ConvParams


@dataclass(frozen=True)
class EdgeType:
    kind: str = "float"
    bits: int = 32

    KINDS = ("float", "acc", "uint", "int", "bin")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise GraphError(f"unknown edge type {self.kind!r}")

    @property
    def integer(self) -> bool:
        return self.kind != "float"

    def __str__(self) -> str:
        return f"{self.kind}{self.bits}"

    @classmethod
    def parse(cls, text: str) -> "EdgeType":
        for kind in cls.KINDS:
            if text.startswith(kind):
                rest = text[len(kind):]
                return cls(kind, int(rest) if rest else (1 if kind == "bin" else 32))
        raise GraphError(f"cannot parse edge type {text!r}")


FLOAT = EdgeType("float", 32)
ACC = EdgeType("acc", 32)
BIN = EdgeType("bin", 1)


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: list[str]
    output: str
    params: dict = field(default_factory=dict)

    def describe(self) -> dict:
        return {"name": self.name, "kind": self.kind, "inputs": list(self.inputs),
                "output": self.output, "params": _jsonable(self.params)}


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in sorted(v.items())}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


@dataclass
class EdgeInfo:
    name: str
    shape: tuple[int, int, int]
    etype: EdgeType
    producer: str | None
    origin: str

    def row_bytes(self, batch: int = 1) -> int:
        c, _, w = self.shape
        return math.ceil(batch * c * w * self.etype.bits / 8)

    def nbytes(self, batch: int = 1) -> int:
        c, h, w = self.shape
        return math.ceil(batch * c * h * w * self.etype.bits / 8)


@dataclass
class Ctx:
    keep: bool = False
    passthrough: bool = False


OPS: dict[str, "Op"] = {}


def register(cls):
    OPS[cls.kind] = cls()
    return cls


def op_for(kind: str) -> "Op":
    try:
        return OPS[kind]
    except KeyError:
        raise GraphError(f"unknown layer kind {kind!r}") from None


class Op:
    kind = ""
    arity = 1
    # layers whose output keeps the input's origin (representation changes only)
    derived = False

    def check_arity(self, spec, ins):
        if self.arity is not None and len(ins) != self.arity:
            raise GraphError(f"{spec.name}: {self.kind} takes {self.arity} input(s), got {len(ins)}")

    def infer(self, spec, ins, g):
        raise NotImplementedError

    def param_shapes(self, spec, ins) -> dict:
        return {}

    def init_params(self, spec, ins, rng) -> dict:
        out = {}
        for key, shape in self.param_shapes(spec, ins).items():
            if key.endswith("b"):
                out[key] = np.zeros(shape, np.float32)
            else:
                fan_in = int(np.prod(shape[1:]))
                out[key] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)
        return out

    def forward(self, spec, g, xs, ctx):
        raise NotImplementedError

    def backward(self, spec, g, gy, cache):
        raise NotImplementedError

    # Row streaming: window() gives, per input, the inclusive input-row range for
    # output row r and whether out-of-range rows are virtual padding (True) or
    # simply absent (False). None means the op cannot be streamed by rows.
    def window(self, spec, g, ins, r):
        return [(r, r, True)] * len(ins)

    def fill(self, spec, dtype):
        return 0

    def forward_rows(self, spec, g, wins, r, ins):
        y, _ = self.forward(spec, g, [w for w, _ in wins], Ctx())
        return y


def _conv_geom(params) -> dict:
    return dict(stride=int(params.get("stride", 1)), pad=int(params.get("pad", 0)),
                transposed=bool(params.get("transposed", False)),
                output_padding=int(params.get("output_padding", 0)))


def _conv_out_hw(geom, k, h, w):
    if geom["transposed"]:
        f = ops.deconv_out_size
        return (f(h, k, geom["stride"], geom["pad"], geom["output_padding"]),
                f(w, k, geom["stride"], geom["pad"], geom["output_padding"]))
    return (ops.conv_out_size(h, k, geom["stride"], geom["pad"]),
            ops.conv_out_size(w, k, geom["stride"], geom["pad"]))


def _conv_window(geom: dict, kh: int, h_in: int, r: int):
    s, pad = geom["stride"], geom["pad"]
    if geom["transposed"]:
        lo = max(0, -(-(r + pad - kh + 1) // s))
        hi = min(h_in - 1, (r + pad) // s)
        return lo, hi, False
    lo = r * s - pad
    return lo, lo + kh - 1, True


def _conv_row(p: ConvParams, win: np.ndarray, lo: int, r: int, wo: int) -> np.ndarray:
    """Output row ``r`` of a conv from its input-row window (bit-exact with the full op)."""
    if not p.transposed:
        return ops.conv_valid(ops.pad_hw(win, 0, 0, p.pad, p.pad), p.W, p.b, p.stride)
    dt = ops._accum_dtype(win, p.W)
    n = win.shape[0]
    if win.shape[2] == 0:
        row = np.zeros((n, p.cout, 1, wo), dt)
    else:
        canvas = ops.deconv_canvas(win, p.W, p.stride)
        rr = r + p.pad - lo * p.stride
        if 0 <= rr < canvas.shape[2]:
            line = canvas[:, :, rr:rr + 1]
        else:
            line = np.zeros((n, p.cout, 1, canvas.shape[3]), dt)
        line = ops.pad_hw(line, 0, 0, 0, max(0, p.pad + wo - line.shape[3]))
        row = line[:, :, :, p.pad:p.pad + wo]
    return row + p.b.astype(dt).reshape(1, -1, 1, 1)


@register
class Conv(Op):
    kind = "conv"

    def infer(self, spec, ins, g):
        self.check_arity(spec, ins)
        c, h, w = ins[0].shape
        k = int(spec.params["kernel"])
        geom = _conv_geom(spec.params)
        if geom["pad"] >= k:
            raise GraphError(f"{spec.name}: pad {geom['pad']} must be smaller than kernel {k}")
        ho, wo = _conv_out_hw(geom, k, h, w)
        if ho < 1 or wo < 1:
            raise GraphError(f"{spec.name}: input {h}x{w} too small for kernel {k}")
        if ins[0].etype.kind == "bin":
            raise GraphError(f"{spec.name}: plain conv cannot consume a GF(2) map; use compress/decompress")
        et = FLOAT if ins[0].etype.kind == "float" else ACC
        return (int(spec.params["out_channels"]), ho, wo), et

    def param_shapes(self, spec, ins):
        k = int(spec.params["kernel"])
        co, ci = int(spec.params["out_channels"]), ins[0].shape[0]
        return {"W": (co, ci, k, k), "b": (co,)}

    def conv_params(self, spec, g) -> ConvParams:
        w = g.weights[spec.name]
        return ConvParams(w["W"], w["b"], **_conv_geom(spec.params))

    def forward(self, spec, g, xs, ctx):
        x = xs[0]
        y = ops.conv_forward(x, self.conv_params(spec, g))
        if spec.params.get("activation", "none") == "relu":
            y = ops.relu(y)
        return y, ((x, y) if ctx.keep else None)

    def backward(self, spec, g, gy, cache):
        x, y = cache
        if spec.params.get("activation", "none") == "relu":
            gy = ops.relu_backward(gy, y)
        gx, gW, gb = ops.conv_backward(gy, x, self.conv_params(spec, g))
        return [gx], {"W": gW, "b": gb}

    def window(self, spec, g, ins, r):
        return [_conv_window(_conv_geom(spec.params), int(spec.params["kernel"]), ins[0].shape[1], r)]

    def forward_rows(self, spec, g, wins, r, ins):
        win, lo = wins[0]
        p = self.conv_params(spec, g)
        wo = _conv_out_hw(_conv_geom(spec.params), p.kernel[0], *ins[0].shape[1:])[1]
        y = _conv_row(p, win, lo, r, wo)
        if spec.params.get("activation", "none") == "relu":
            y = ops.relu(y)
        return y


@register
class ReLU(Op):
    kind = "relu"

    def infer(self, spec, ins, g):
        self.check_arity(spec, ins)
        return ins[0].shape, ins[0].etype

    def forward(self, spec, g, xs, ctx):
        return ops.relu(xs[0]), (xs[0] if ctx.keep else None)

    def backward(self, spec, g, gy, cache):
        return [ops.relu_backward(gy, cache)], {}


@register
class MaxPool(Op):
    kind = "maxpool"

    def _p(self, spec):
        prm = spec.params
        return int(prm["window"]), int(prm.get("stride", prm["window"])), int(prm.get("pad", 0)), bool(prm.get("ceil_mode", True))

    def infer(self, spec, ins, g):
        self.check_arity(spec, ins)
        k, s, pad, ceil = self._p(spec)
        c, h, w = ins[0].shape
        if k > h + 2 * pad or k > w + 2 * pad:
            raise GraphError(f"{spec.name}: pool window {k} larger than input {h}x{w}")
        return (c, ops.pool_out_size(h, k, s, pad, ceil), ops.pool_out_size(w, k, s, pad, ceil)), ins[0].etype

    def forward(self, spec, g, xs, ctx):
        k, s, pad, ceil = self._p(spec)
        y, idx = ops.maxpool_forward(xs[0], k, s, pad, ceil)
        return y, ((xs[0].shape, idx) if ctx.keep else None)

    def backward(self, spec, g, gy, cache):
        k, s, pad, ceil = self._p(spec)
        shape, idx = cache
        return [ops.maxpool_backward(gy, shape, idx, k, s, pad, ceil)], {}

    def window(self, spec, g, ins, r):
        k, s, pad, _ = self._p(spec)
        lo = r * s - pad
        return [(lo, lo + k - 1, True)]

    def fill(self, spec, dtype):
        return ops._min_fill(dtype)

    def forward_rows(self, spec, g, wins, r, ins):
        k, s, pad, ceil = self._p(spec)
        win, _ = wins[0]
        _, h, w = ins[0].shape
        _, wo, (_, _, left, right) = ops.maxpool_pads(h, w, k, s, pad, ceil)
        y, _ = ops.maxpool_valid(ops.pad_hw(win, 0, 0, left, right, fill=ops._min_fill(win.dtype)), k, s)
        return y[:, :, :1, :wo]


@register
class AvgPool(Op):
    kind = "avgpool"

    def infer(self, spec, ins, g):
        self.check_arity(spec, ins)
        return (ins[0].shape[0], 1, 1), FLOAT

    def forward(self, spec, g, xs, ctx):
        return ops.global_avgpool_forward(xs[0]), (xs[0].shape if ctx.keep else None)

    def backward(self, spec, g, gy, cache):
        return [ops.global_avgpool_backward(gy, cache)], {}

    def window(self, spec, g, ins, r):
        return None


@register
class Concat(Op):
    kind = "concat"
    arity = None

    def infer(self, spec, ins, g):
        if len(ins) < 2:
            raise GraphError(f"{spec.name}: concat needs at least two inputs")
        hw = {e.shape[1:] for e in ins}
        types = {e.etype for e in ins}
        if len(hw) != 1:
            raise GraphError(f"{spec.name}: concat inputs disagree on spatial size {sorted(hw)}")
        if len(types) != 1:
            raise GraphError(f"{spec.name}: concat inputs disagree on type {sorted(map(str, types))}")
        c = sum(e.shape[0] for e in ins)
        return (c,) + ins[0].shape[1:], ins[0].etype

    def forward(self, spec, g, xs, ctx):
        splits = np.cumsum([x.shape[1] for x in xs])[:-1]
        return np.concatenate(xs, axis=1), (splits if ctx.keep else None)

    def backward(self, spec, g, gy, cache):
        return list(np.split(gy, cache, axis=1)), {}


@register
class FC(Op):
    kind = "fc"

    def infer(self, spec, ins, g):
        self.check_arity(spec, ins)
        et = FLOAT if ins[0].etype.kind == "float" else ACC
        return (int(spec.params["out_features"]), 1, 1), et

    def param_shapes(self, spec, ins):
        k = int(spec.params["out_features"])
        return {"W": (k, int(np.prod(ins[0].shape))), "b": (k,)}

    def forward(self, spec, g, xs, ctx):
        w = g.weights[spec.name]
        return ops.fc_forward(xs[0], w["W"], w["b"]), (xs[0] if ctx.keep else None)

    def backward(self, spec, g, gy, cache):
        gx, gW, gb = ops.fc_backward(gy, cache, g.weights[spec.name]["W"])
        return [gx], {"W": gW, "b": gb}

    def window(self, spec, g, ins, r):
        return None


@register
class Quantize(Op):
    kind = "quantize"
    derived = True

    def infer(self, spec, ins, g):
        self.check_arity(spec, ins)
        if ins[0].etype.kind in ("bin", "uint", "int"):
            raise GraphError(f"{spec.name}: quantize expects real or accumulator input, got {ins[0].etype}")
        bits = int(spec.params["bits"])
        kind = "int" if spec.params.get("signed", False) else "uint"
        return ins[0].shape, EdgeType(kind, bits)

    def forward(self, spec, g, xs, ctx):
        p = g.quant_params(spec.name)
        x = xs[0]
        if ctx.passthrough:
            scaled = np.asarray(x, np.float64) / p.scale
            y = np.clip(scaled, p.qmin - 0.5, p.qmax + 0.5).astype(x.dtype)
        else:
            y = quantize(x, p)
        return y, (x if ctx.keep else None)

    def backward(self, spec, g, gy, cache):
        p = g.quant_params(spec.name)
        return [quantize_backward(gy / np.asarray(p.scale, gy.dtype), cache, p)], {}


@register
class Dequantize(Op):
    kind = "dequantize"
    derived = True

    def infer(self, spec, ins, g):
        self.check_arity(spec, ins)
        if ins[0].etype.kind not in ("uint", "int"):
            raise GraphError(f"{spec.name}: dequantize expects integer codes, got {ins[0].etype}")
        return ins[0].shape, FLOAT

    def forward(self, spec, g, xs, ctx):
        p = g.quant_params(spec.params["source"])
        x = xs[0]
        if np.issubdtype(x.dtype, np.floating):
            y = x * np.asarray(p.scale, x.dtype)
        else:
            y = dequantize(x, p, dtype=g.float_dtype)
        return y, None

    def backward(self, spec, g, gy, cache):
        p = g.quant_params(spec.params["source"])
        return [gy * np.asarray(p.scale, gy.dtype)], {}


@register
class Binarize(Op):
    kind = "binarize"
    derived = True

    def infer(self, spec, ins, g):
        self.check_arity(spec, ins)
        et = ins[0].etype
        if et.kind != "uint":
            raise GraphError(
                f"{spec.name}: binarize requires unsigned codes (add a ReLU before a signed quantizer); got {et}"
            )
        bits = int(spec.params["bits"])
        if bits != et.bits or not 1 <= bits <= 8:
            raise GraphError(f"{spec.name}: binarize bits {bits} incompatible with input {et}")
        c, h, w = ins[0].shape
        return (c * bits, h, w), BIN

    def forward(self, spec, g, xs, ctx):
        if ctx.passthrough:
            raise GraphError(f"{spec.name}: GF(2) layers have no real-valued pass-through mode")
        planes = gf2.to_planes(xs[0], int(spec.params["bits"]))
        return planes, (planes if ctx.keep else None)

    def backward(self, spec, g, gy, cache):
        norm = float(spec.params.get("grad_norm", 1.0))
        return [gf2.binarize_backward(gy, cache, norm, bits=int(spec.params["bits"]))], {}


@register
class Debinarize(Op):
    kind = "debinarize"
    derived = True

    def infer(self, spec, ins, g):
        self.check_arity(spec, ins)
        bits = int(spec.params["bits"])
        c, h, w = ins[0].shape
        if ins[0].etype.kind != "bin" or c % bits:
            raise GraphError(f"{spec.name}: debinarize needs a GF(2) map with a multiple of {bits} channels")
        return (c // bits, h, w), EdgeType("uint", bits)

    def forward(self, spec, g, xs, ctx):
        planes = xs[0]
        return gf2.from_planes(planes, int(spec.params["bits"])), (planes if ctx.keep else None)

    def backward(self, spec, g, gy, cache):
        return [gf2.debinarize_backward(gy, cache, bits=int(spec.params["bits"]))], {}


class _Stack(Op):
    """P (compress) or R (decompress) stack over GF(2) maps."""

    derived = True

    def geoms(self, spec):
        return [dict(out_channels=int(l["out_channels"]), kernel=int(l["kernel"]), **_conv_geom(l))
                for l in spec.params["layers"]]

    def infer(self, spec, ins, g):
        self.check_arity(spec, ins)
        if ins[0].etype.kind != "bin":
            raise GraphError(f"{spec.name}: {self.kind} expects a GF(2) map, got {ins[0].etype}")
        c, h, w = ins[0].shape
        for geom in self.geoms(spec):
            h, w = _conv_out_hw(geom, geom["kernel"], h, w)
            c = geom["out_channels"]
            if h < 1 or w < 1:
                raise GraphError(f"{spec.name}: map vanishes inside the {self.kind} stack")
        return (c, h, w), BIN

    def param_shapes(self, spec, ins):
        out, c = {}, ins[0].shape[0]
        for i, geom in enumerate(self.geoms(spec)):
            k = geom["kernel"]
            out[f"L{i}.W"] = (geom["out_channels"], c, k, k)
            out[f"L{i}.b"] = (geom["out_channels"],)
            c = geom["out_channels"]
        return out

    def layers(self, spec, g) -> list[ConvParams]:
        w = g.weights[spec.name]
        return [ConvParams(w[f"L{i}.W"], w[f"L{i}.b"], **{k: v for k, v in geom.items()
                                                            if k not in ("out_channels", "kernel")})
                for i, geom in enumerate(self.geoms(spec))]

    def forward(self, spec, g, xs, ctx):
        y, caches = stack_forward(xs[0], self.layers(spec, g), keep=ctx.keep)
        return y, caches

    def backward(self, spec, g, gy, cache):
        gx, grads = stack_backward(gy, self.layers(spec, g), cache)
        out = {}
        for i, (gW, gb) in enumerate(grads):
            out[f"L{i}.W"], out[f"L{i}.b"] = gW, gb
        return [gx], out

    def window(self, spec, g, ins, r):
        geoms = self.geoms(spec)
        if len(geoms) != 1:
            return None
        return [_conv_window(geoms[0], geoms[0]["kernel"], ins[0].shape[1], r)]

    def forward_rows(self, spec, g, wins, r, ins):
        p = self.layers(spec, g)[0]
        win, lo = wins[0]
        geom = self.geoms(spec)[0]
        wo = _conv_out_hw(geom, geom["kernel"], *ins[0].shape[1:])[1]
        return binary_step(_conv_row(p, win, lo, r, wo))


@register
class Compress(_Stack):
    kind = "compress"


@register
class Decompress(_Stack):
    kind = "decompress"

