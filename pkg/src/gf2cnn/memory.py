"""Activation-memory accounting under fusion, quantization and compression."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

from .errors import ConfigError
from .nn.builders import GEOMETRIES, insert_compression, insert_quantization
from .nn.fusion import FusionPlan, aliased, analyze, plan_from_stored, simulate_buffers
from .nn.graph import NetworkGraph
from .nn.layers import op_for

KB = 1024
MB = 1024 * 1024


def fmt_kb(nbytes: int, places: int = 1) -> str:
    """Bytes as KB (1024) rounded half up, e.g. 18816 -> '18.4'."""
    q = Decimal(1).scaleb(-places)
    return str((Decimal(nbytes) / KB).quantize(q, rounding=ROUND_HALF_UP))


def fmt_mb(nbytes: int, places: int = 1) -> str:
    q = Decimal(1).scaleb(-places)
    return str((Decimal(nbytes) / MB).quantize(q, rounding=ROUND_HALF_UP))


@dataclass
class EdgeEntry:
    name: str
    shape: tuple[int, int, int, int]
    etype: str
    bits: int
    stored: bool
    bytes: int
    buffer_bytes: int
    origin: str


@dataclass
class ReportRow:
    label: str
    edges: list[str]
    bytes: int
    separate: bool = False


@dataclass
class MemoryReport:
    name: str
    batch: int
    entries: list[EdgeEntry]
    rows: list[ReportRow]
    step_live: list[tuple[str, int]] = field(default_factory=list)
    input_name: str = "data"

    @property
    def total(self) -> int:
        """Sum of the reported rows, excluding rows kept separately (the input frame)."""
        return sum(r.bytes for r in self.rows if not r.separate)

    @property
    def stored_total(self) -> int:
        return sum(e.bytes for e in self.entries if e.stored and e.name != self.input_name)

    @property
    def buffer_total(self) -> int:
        return sum(e.buffer_bytes for e in self.entries)

    @property
    def peak_live(self) -> int:
        return max((b for _, b in self.step_live), default=0)

    def row(self, label: str) -> ReportRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def factor_vs(self, baseline: "MemoryReport") -> float:
        return baseline.total / self.total

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["edge", "shape", "type", "bits", "stored", "bytes", "kb", "buffer_bytes", "origin"])
        for e in self.entries:
            w.writerow([e.name, "x".join(map(str, e.shape)), e.etype, e.bits, int(e.stored), e.bytes,
                        fmt_kb(e.bytes), e.buffer_bytes, e.origin])
        return buf.getvalue()


def plan_memory(g: NetworkGraph, plan: FusionPlan | None = None, batch: int = 1,
                rows: dict[str, list[str]] | None = None, separate=None, name: str = "") -> MemoryReport:
    """Stored and buffer bytes per edge under ``plan``.

    ``rows`` groups base edges into labelled report rows (all derived
    representations of those edges are included). By default every base edge
    is its own row and the input frame is kept separate.
    """
    layout = analyze(g, plan)
    edges = g.edges
    buf_rows = simulate_buffers(g, layout)
    entries = []
    for e, info in edges.items():
        stored = e in layout.stored or e == g.input_name
        nbytes = info.nbytes(batch) if stored and not aliased(g, layout, e) else 0
        entries.append(EdgeEntry(e, (batch,) + info.shape, str(info.etype), info.etype.bits, stored, nbytes,
                                 buf_rows.get(e, 0) * info.row_bytes(batch), info.origin))
    if rows is None:
        rows = {e: [e] for e, info in edges.items() if info.origin == e}
        separate = {g.input_name} if separate is None else set(separate)
    else:
        separate = set(separate or ())
    report_rows = []
    by_origin: dict[str, int] = {}
    for en in entries:
        by_origin[en.origin] = by_origin.get(en.origin, 0) + en.bytes
    for label, base in rows.items():
        origins = {edges[b].origin for b in base}
        total = sum(by_origin.get(o, 0) for o in origins)
        sep = label in separate or any(b in separate for b in base)
        report_rows.append(ReportRow(label, list(base), total, sep))

    step_live = []
    live_edges = []
    for i, (gname, members) in enumerate(layout.steps):
        live_edges += [s.output for s in (g.layer(m) for m in members) if s.output in layout.stored]
        live = sum(en.bytes for en in entries if en.name in live_edges)
        live += sum(en.buffer_bytes for en in entries if en.name in layout.internal
                    and layout.group_of[g.producer_of(en.name).name] == gname)
        step_live.append((gname, live))
        live_edges = [e for e in live_edges if layout.last_use[e] > i or e == g.output_edge]
    return MemoryReport(name or g.name, batch, entries, report_rows, step_live, g.input_name)


def weight_size(g: NetworkGraph, bits: int | dict = 32) -> int:
    """Parameter bytes; ``bits`` is a width for all layers or a {layer: bits} map (default 32)."""
    edges = g.edges
    total_bits = 0
    for spec in g.layers:
        shapes = op_for(spec.kind).param_shapes(spec, [edges[e] for e in spec.inputs])
        count = sum(int(_prod(s)) for s in shapes.values())
        b = bits.get(spec.name, 32) if isinstance(bits, dict) else bits
        total_bits += count * b
    return -(-total_bits // 8)


def _prod(shape) -> int:
    out = 1
    for d in shape:
        out *= int(d)
    return out


def memory_table(columns: list[tuple[str, MemoryReport]], title: str = "A size, KB",
                 places: int = 0) -> str:
    """Text table with one column per variant, a Total row and compression factors."""
    labels = [r.label for r in columns[0][1].rows]

    def cell(v: int) -> str:
        return fmt_kb(v, places) if places else str(int(Decimal(v) / KB) if v % KB == 0 else fmt_kb(v))

    header = [title] + [c for c, _ in columns]
    body = []
    for lab in labels:
        body.append([lab] + [cell(rep.row(lab).bytes) for _, rep in columns])
    body.append(["Total"] + [cell(rep.total) for _, rep in columns])
    base = columns[0][1]
    body.append(["Compression", "-"] + [f"{round(rep.factor_vs(base))}x" for _, rep in columns[1:]])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(s.rjust(w) if i else s.ljust(w) for i, (s, w) in enumerate(zip(r, widths)))
             for r in [header] + body]
    rule = "-" * len(lines[0])
    return "\n".join([lines[0], rule] + lines[1:-2] + [rule] + lines[-2:]) + "\n"


def table_csv(columns: list[tuple[str, MemoryReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row"] + [c for c, _ in columns])
    for r in columns[0][1].rows:
        w.writerow([r.label] + [rep.row(r.label).bytes for _, rep in columns])
    w.writerow(["Total"] + [rep.total for _, rep in columns])
    return buf.getvalue()


@dataclass
class Variant:
    """One column of a memory table: how the target maps are represented and stored."""

    label: str
    fused: bool = False
    bits: int | None = None
    signed: bool = False
    mode: str | None = None
    stored_bits: int | None = None
    targets: list[str] = field(default_factory=list)
    keep: list[str] | None = None
    geometry_args: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "Variant":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"memory variant {d.get('label', '?')!r}: unknown keys {sorted(extra)}")
        if "label" not in d:
            raise ConfigError("memory variant needs a label")
        return cls(**d)


def build_variant(geometry: str, v: Variant, targets: list[str] | None = None):
    """Graph and fusion plan for one table column."""
    if geometry not in GEOMETRIES:
        raise ConfigError(f"unknown geometry {geometry!r}; expected one of {sorted(GEOMETRIES)}")
    g = GEOMETRIES[geometry](**v.geometry_args)
    targets = v.targets or targets or []
    apply_variant(g, v, targets)
    plan = plan_from_stored(g, v.keep if v.keep is not None else targets) if v.fused else None
    return g, plan


def apply_variant(g: NetworkGraph, v: Variant, targets: list[str]) -> None:
    """Insert the variant's quantizers or compression blocks on ``targets`` in place."""
    for t in targets:
        if v.mode and v.mode != "none":
            if v.bits is None:
                raise ConfigError(f"variant {v.label!r}: compression needs bits")
            c = g.edges[t].shape[0]
            ct = (v.stored_bits or v.bits) * c
            insert_compression(g, t, v.bits, v.mode, ct, signed=v.signed)
        elif v.bits:
            insert_quantization(g, t, v.bits, v.signed)


def run_variants(geometry: str, variants: list[Variant], rows: dict[str, list[str]],
                 separate=(), targets=None, batch: int = 1) -> list[tuple[str, MemoryReport]]:
    out = []
    for v in variants:
        g, plan = build_variant(geometry, v, targets)
        out.append((v.label, plan_memory(g, plan, batch, rows, separate, name=v.label)))
    return out
