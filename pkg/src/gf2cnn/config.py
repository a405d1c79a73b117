"""TOML experiment configs: network records, fusion groups, train/quant/compression/data/memory sections.

A network is either a named reference geometry::

    [network]
    geometry = "squeezenet-v1.1"

or an explicit list of layer records::

    [network]
    name = "toy"
    input = { name = "data", shape = [1, 32, 32], type = "float32" }

    [[layer]]
    kind = "conv"
    name = "conv1"
    inputs = ["data"]
    out_channels = 16
    kernel = 3

``kind = "fire"`` and ``kind = "bottleneck"`` records expand into several layers.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, GraphError
from .memory import Variant
from .nn.builders import GEOMETRIES, build_bottleneck_module, build_fire_module
from .nn.fusion import FusionGroup, FusionPlan
from .nn.graph import NetworkGraph
from .nn.layers import EdgeType, LayerSpec
from .trainer import CompressionConfig, QuantConfig, TrainConfig

SECTIONS = {"network", "layer", "fusion", "train", "finetune", "quant", "compression", "data", "memory"}
MACROS = {
    "fire": {"prefix", "input", "expand1x1", "expand3x3", "squeeze", "ratio", "squeeze_name"},
    "bottleneck": {"prefix", "input", "out_channels", "factor", "stride", "relu_after_linear"},
}
MODES = ("none", "1x1", "3x3s2", "2x2s2")


@dataclass
class DataConfig:
    kind: str = "synthetic"
    seed: int = 0
    n: int = 3000
    train: int = 2000
    classes: int = 10
    shape: list[int] = field(default_factory=lambda: [1, 32, 32])
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "mnist-idx"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'mnist-idx', got {self.kind!r}")
        if self.kind == "mnist-idx" and not (self.images and self.labels):
            raise ConfigError("mnist-idx data needs 'images' and 'labels' paths")
        if self.kind == "synthetic" and not 0 < self.train < self.n:
            raise ConfigError(f"data.train must lie in (0, n={self.n}), got {self.train}")


@dataclass
class MemoryConfig:
    geometry: str | None = None
    batch: int = 1
    rows: dict[str, list[str]] = field(default_factory=dict)
    separate: list[str] = field(default_factory=list)
    targets: list[str] = field(default_factory=list)
    variants: list[Variant] = field(default_factory=list)
    title: str = "A size, KB"
    places: int = 0


@dataclass
class ExperimentConfig:
    source: str
    network: dict
    layers: list[dict]
    fusion: FusionPlan | None
    train: TrainConfig
    finetune: TrainConfig
    quant: QuantConfig
    compression: CompressionConfig
    data: DataConfig
    memory: MemoryConfig | None
    base_dir: Path = field(default_factory=Path.cwd)

    def build_graph(self) -> NetworkGraph:
        return build_network(self.network, self.layers)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def _take(d: dict, allowed: set[str], where: str) -> dict:
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    return d


def build_network(network: dict, records: list[dict]) -> NetworkGraph:
    """Graph from a [network] table and its layer records."""
    _take(network, {"name", "geometry", "geometry_args", "input", "output"}, "[network]")
    if "geometry" in network:
        if records:
            raise ConfigError("give either network.geometry or [[layer]] records, not both")
        geo = network["geometry"]
        if geo not in GEOMETRIES:
            raise ConfigError(f"unknown geometry {geo!r}; expected one of {sorted(GEOMETRIES)}")
        try:
            return GEOMETRIES[geo](**network.get("geometry_args", {}))
        except TypeError as exc:
            raise ConfigError(f"network.geometry_args: {exc}") from None
    inp = network.get("input")
    if not isinstance(inp, dict) or "shape" not in inp:
        raise ConfigError("[network] needs input = { name, shape, type } or a geometry")
    if not records:
        raise ConfigError("network has no [[layer]] records")
    g = NetworkGraph(inp.get("name", "data"), inp["shape"], EdgeType.parse(inp.get("type", "float32")),
                     network.get("output"), network.get("name", "net"))
    for i, rec in enumerate(records):
        rec = dict(rec)
        where = f"layer record {i} ({rec.get('name', rec.get('prefix', '?'))})"
        kind = rec.pop("kind", None)
        if kind is None:
            raise ConfigError(f"{where}: missing 'kind'")
        try:
            if kind == "fire":
                _take(rec, MACROS["fire"], where)
                build_fire_module(g, rec.pop("prefix"), rec.pop("input"), **rec)
            elif kind == "bottleneck":
                _take(rec, MACROS["bottleneck"], where)
                build_bottleneck_module(g, rec.pop("prefix"), rec.pop("input"), **rec)
            else:
                if "name" not in rec or "inputs" not in rec:
                    raise ConfigError(f"{where}: layer records need 'name' and 'inputs'")
                name, inputs = rec.pop("name"), rec.pop("inputs")
                output = rec.pop("output", None)
                g.add_spec(LayerSpec(name, kind, [inputs] if isinstance(inputs, str) else list(inputs),
                                     output or name, rec))
        except KeyError as exc:
            raise ConfigError(f"{where}: missing {exc}") from None
        except TypeError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        except GraphError as exc:
            raise type(exc)(f"{where}: {exc}") from None
    g.validate()
    return g


def _fusion(d) -> FusionPlan | None:
    if d is None:
        return None
    _take(d, {"group"}, "[fusion]")
    groups = []
    for i, gd in enumerate(d.get("group", [])):
        _take(gd, {"name", "layers", "halo"}, f"fusion group {i}")
        if "name" not in gd or not gd.get("layers"):
            raise ConfigError(f"fusion group {i}: needs a name and a non-empty layer list")
        groups.append(FusionGroup(gd["name"], list(gd["layers"]), bool(gd.get("halo", True))))
    return FusionPlan(groups)


def _memory(d) -> MemoryConfig | None:
    if d is None:
        return None
    _take(d, (set(MemoryConfig.__dataclass_fields__) | {"variant"}) - {"variants"}, "[memory]")
    d = dict(d)
    variants = [Variant.from_dict(v) for v in d.pop("variant", [])]
    for v in variants:
        if v.mode is not None and v.mode not in MODES:
            raise ConfigError(f"memory variant {v.label!r}: mode must be one of {MODES}")
    return MemoryConfig(variants=variants, **d)


def parse_config(doc: dict, source: str = "<config>", base_dir: Path | None = None) -> ExperimentConfig:
    extra = set(doc) - SECTIONS
    if extra:
        raise ConfigError(f"{source}: unknown sections {sorted(extra)}")
    if "network" not in doc:
        raise ConfigError(f"{source}: missing [network] section")
    try:
        train = TrainConfig.from_dict(doc.get("train", {}))
        finetune = TrainConfig.from_dict(doc["finetune"]) if "finetune" in doc else train
        quant = QuantConfig(**_take(dict(doc.get("quant", {})), {"bits", "targets", "signed"}, "[quant]"))
        comp = CompressionConfig(**_take(dict(doc.get("compression", {})),
                                         {"mode", "stored_bits", "init", "noise"}, "[compression]"))
        data = DataConfig(**_take(dict(doc.get("data", {})), set(DataConfig.__dataclass_fields__), "[data]"))
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if comp.mode not in MODES:
        raise ConfigError(f"compression.mode must be one of {MODES}, got {comp.mode!r}")
    return ExperimentConfig(source, dict(doc["network"]), list(doc.get("layer", [])), _fusion(doc.get("fusion")),
                            train, finetune, quant, comp, data, _memory(doc.get("memory")),
                            base_dir or Path.cwd())


def shipped_configs() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("gf2cnn.configs").iterdir() if p.name.endswith(".toml"))


def load_config(path_or_name) -> ExperimentConfig:
    """Load a TOML file, or a shipped config by bare name (e.g. ``toy-fire-net``)."""
    path = Path(path_or_name)
    if path.exists():
        text, base = path.read_text(), path.resolve().parent
    else:
        ref = resources.files("gf2cnn.configs") / f"{path_or_name}.toml"
        if not ref.is_file():
            raise ConfigError(f"config {str(path_or_name)!r} not found; shipped configs: {shipped_configs()}")
        text, base = ref.read_text(), Path.cwd()
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path_or_name}: {exc}") from None
    return parse_config(doc, str(path_or_name), base)
