"""Declarative network graphs: validation, shape/type inference, forward and backward."""
from __future__ import annotations

import copy
import hashlib
import json
from collections import defaultdict

import numpy as np

from ..errors import GraphError, ShapeError
from ..quantizer import QuantParams
from .layers import FLOAT, Ctx, EdgeInfo, EdgeType, LayerSpec, op_for


class NetworkGraph:
    """Topologically ordered layers over named edges.

    ``weights`` maps layer name -> {param name: array}; ``quant`` maps a
    quantize layer name -> QuantParams.
    """

    def __init__(self, input_name: str, input_shape, input_type: EdgeType = FLOAT,
                 output: str | None = None, name: str = "net"):
        self.name = name
        self.input_name = input_name
        self.input_shape = tuple(int(d) for d in input_shape)
        self.input_type = input_type
        self.output = output
        self.layers: list[LayerSpec] = []
        self.weights: dict[str, dict[str, np.ndarray]] = {}
        self.quant: dict[str, QuantParams] = {}
        self.float_dtype = np.float32
        self._edges: dict[str, EdgeInfo] | None = None
        self._cache = None

    # ------------------------------------------------------------ building

    def add(self, kind: str, name: str, inputs, output: str | None = None, **params) -> str:
        inputs = [inputs] if isinstance(inputs, str) else list(inputs)
        spec = LayerSpec(name, kind, inputs, output or name, params)
        self.add_spec(spec)
        return spec.output

    def add_spec(self, spec: LayerSpec, index: int | None = None) -> None:
        op_for(spec.kind)
        if any(l.name == spec.name for l in self.layers):
            raise GraphError(f"duplicate layer name {spec.name!r}")
        if index is None:
            self.layers.append(spec)
        else:
            self.layers.insert(index, spec)
        self._edges = None

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise GraphError(f"no layer named {name!r}")

    def index_of(self, name: str) -> int:
        return self.layers.index(self.layer(name))

    def producer_of(self, edge: str) -> LayerSpec | None:
        for l in self.layers:
            if l.output == edge:
                return l
        return None

    def consumers_of(self, edge: str) -> list[LayerSpec]:
        return [l for l in self.layers if edge in l.inputs]

    @property
    def output_edge(self) -> str:
        if self.output:
            return self.output
        if not self.layers:
            return self.input_name
        return self.layers[-1].output

    # ---------------------------------------------------------- validation

    @property
    def edges(self) -> dict[str, EdgeInfo]:
        if self._edges is None:
            self.validate()
        return self._edges

    def validate(self) -> dict[str, EdgeInfo]:
        edges = {self.input_name: EdgeInfo(self.input_name, self.input_shape, self.input_type, None,
                                           self.input_name)}
        for spec in self.layers:
            for e in spec.inputs:
                if e not in edges:
                    raise GraphError(
                        f"{spec.name}: input edge {e!r} is not produced by an earlier layer"
                    )
            if spec.output in edges:
                raise GraphError(f"edge {spec.output!r} has more than one producer")
            op = op_for(spec.kind)
            ins = [edges[e] for e in spec.inputs]
            shape, etype = op.infer(spec, ins, self)
            origin = ins[0].origin if op.derived else spec.output
            edges[spec.output] = EdgeInfo(spec.output, tuple(int(d) for d in shape), etype, spec.name, origin)
            if spec.kind == "decompress" and "restores" in spec.params:
                want = edges[spec.params["restores"]].shape
                if edges[spec.output].shape != want:
                    raise GraphError(
                        f"{spec.name}: reconstruction {edges[spec.output].shape} does not restore {want}"
                    )
        if self.output and self.output not in edges:
            raise GraphError(f"designated output {self.output!r} is not an edge")
        self._edges = edges
        return edges

    def check_weights(self) -> None:
        edges = self.edges
        for spec in self.layers:
            shapes = op_for(spec.kind).param_shapes(spec, [edges[e] for e in spec.inputs])
            have = self.weights.get(spec.name, {})
            for key, shape in shapes.items():
                if key not in have:
                    raise GraphError(f"{spec.name}: missing parameter {key}")
                if tuple(have[key].shape) != tuple(shape):
                    raise ShapeError(f"{spec.name}.{key}: shape {have[key].shape} != expected {shape}")

    def init_weights(self, rng: np.random.Generator | int = 0, only_missing: bool = False) -> None:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        edges = self.edges
        for spec in self.layers:
            if only_missing and spec.name in self.weights:
                continue
            params = op_for(spec.kind).init_params(spec, [edges[e] for e in spec.inputs], rng)
            if params:
                self.weights[spec.name] = params

    def quant_params(self, layer_name: str) -> QuantParams:
        try:
            return self.quant[layer_name]
        except KeyError:
            raise GraphError(f"quantizer {layer_name!r} has not been calibrated") from None

    # ------------------------------------------------------------- execute

    def forward(self, x: np.ndarray, *, keep: bool = False, passthrough: bool = False,
                capture=None, until: str | None = None) -> np.ndarray:
        """Run the graph. ``capture`` (iterable of edge names) also returns those edges;
        ``until`` stops as soon as that edge is computed and returns it."""
        edges = self.edges
        x = np.asarray(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"input shape {x.shape} != (N,) + {self.input_shape}")
        ctx = Ctx(keep=keep, passthrough=passthrough)
        values = {self.input_name: x}
        remaining = self._use_counts()
        wanted = set(capture or ())
        out_edge = self.output_edge
        caches = {}
        for spec in self.layers:
            xs = [values[e] for e in spec.inputs]
            y, cache = op_for(spec.kind).forward(spec, self, xs, ctx)
            if tuple(y.shape[1:]) != edges[spec.output].shape:
                raise ShapeError(f"{spec.name}: produced {y.shape[1:]}, expected {edges[spec.output].shape}")
            values[spec.output] = y
            if spec.output == until:
                self._cache = None
                return y
            if keep:
                caches[spec.name] = cache
            else:
                for e in spec.inputs:
                    remaining[e] -= 1
                    if remaining[e] == 0 and e not in wanted and e != out_edge:
                        del values[e]
        self._cache = caches if keep else None
        if capture is not None:
            return values[out_edge], {e: values[e] for e in wanted}
        return values[out_edge]

    def _use_counts(self):
        counts = defaultdict(int)
        for spec in self.layers:
            for e in spec.inputs:
                counts[e] += 1
        return counts

    def backward(self, grad_out: np.ndarray) -> dict[str, dict[str, np.ndarray]]:
        """Backpropagate from the output edge; requires a prior ``forward(keep=True)``."""
        if self._cache is None:
            raise GraphError("backward() needs a preceding forward(keep=True)")
        grads_e = {self.output_edge: grad_out}
        grads_p: dict[str, dict[str, np.ndarray]] = {}
        for spec in reversed(self.layers):
            gy = grads_e.pop(spec.output, None)
            if gy is None:
                continue
            gxs, gp = op_for(spec.kind).backward(spec, self, gy, self._cache[spec.name])
            if gp:
                grads_p[spec.name] = gp
            for e, gx in zip(spec.inputs, gxs):
                grads_e[e] = gx if e not in grads_e else grads_e[e] + gx
        self.input_grad = grads_e.get(self.input_name)
        self._cache = None
        return grads_p

    # --------------------------------------------------------- persistence

    def describe(self) -> dict:
        return {
            "name": self.name,
            "input": {"name": self.input_name, "shape": list(self.input_shape), "type": str(self.input_type)},
            "output": self.output_edge,
            "layers": [l.describe() for l in self.layers],
        }

    def graph_hash(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_description(cls, d: dict) -> "NetworkGraph":
        inp = d["input"]
        g = cls(inp["name"], inp["shape"], EdgeType.parse(inp.get("type", "float32")),
                d.get("output"), d.get("name", "net"))
        for l in d["layers"]:
            g.add_spec(LayerSpec(l["name"], l["kind"], list(l["inputs"]), l["output"], dict(l.get("params", {}))))
        g.validate()
        return g

    def copy(self) -> "NetworkGraph":
        g = NetworkGraph(self.input_name, self.input_shape, self.input_type, self.output, self.name)
        g.layers = [LayerSpec(l.name, l.kind, list(l.inputs), l.output, copy.deepcopy(l.params)) for l in self.layers]
        g.weights = {k: {n: a.copy() for n, a in v.items()} for k, v in self.weights.items()}
        g.quant = dict(self.quant)
        g.float_dtype = self.float_dtype
        return g

    def astype(self, dtype) -> "NetworkGraph":
        g = self.copy()
        g.float_dtype = dtype
        for params in g.weights.values():
            for k, a in params.items():
                if np.issubdtype(a.dtype, np.floating):
                    params[k] = a.astype(dtype)
        return g

    def parameters(self):
        for spec in self.layers:
            for key, arr in self.weights.get(spec.name, {}).items():
                yield spec.name, key, arr

    def param_count(self) -> int:
        return int(sum(a.size for _, _, a in self.parameters()))
