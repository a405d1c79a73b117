"""Fusion plans and the row-streaming fused executor.

An edge whose producer and every consumer sit in one group (and which is not
the graph output) is internal: it is never materialized, only a sliding
window of its rows is kept. Every other edge is stored. Rows are the buffer
unit: one spatial row across all channels of the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import gf2
from ..errors import FusionError
from .graph import NetworkGraph
from .layers import Ctx, EdgeInfo, op_for


@dataclass
class FusionGroup:
    name: str
    layers: list[str]
    # False restricts the group to 1-row windows (no halo rows for k>1 consumers)
    halo: bool = True


@dataclass
class FusionPlan:
    groups: list[FusionGroup] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"groups": [{"name": g.name, "layers": list(g.layers), "halo": g.halo} for g in self.groups]}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionPlan":
        return cls([FusionGroup(x["name"], list(x["layers"]), bool(x.get("halo", True)))
                    for x in d.get("groups", [])])


@dataclass
class Layout:
    """A validated plan: execution steps and the stored/internal split."""

    steps: list[tuple[str, list[str]]]
    group_of: dict[str, str]
    internal: set[str]
    stored: list[str]
    produced_at: dict[str, int]
    last_use: dict[str, int]


def _toposort_groups(g: NetworkGraph, group_of: dict[str, str]) -> list[str]:
    order = []
    for spec in g.layers:
        if group_of[spec.name] not in order:
            order.append(group_of[spec.name])
    succ = {k: set() for k in order}
    indeg = {k: 0 for k in order}
    for spec in g.layers:
        for e in spec.inputs:
            prod = g.producer_of(e)
            if prod is None:
                continue
            a, b = group_of[prod.name], group_of[spec.name]
            if a != b and b not in succ[a]:
                succ[a].add(b)
                indeg[b] += 1
    ready = [k for k in order if indeg[k] == 0]
    out = []
    while ready:
        k = ready.pop(0)
        out.append(k)
        for m in sorted(succ[k], key=order.index):
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
    if len(out) != len(order):
        stuck = sorted(set(order) - set(out))
        raise FusionError(f"fusion groups are not convex (cyclic dependency among {stuck})")
    return out


def analyze(g: NetworkGraph, plan: FusionPlan | None = None) -> Layout:
    plan = plan or FusionPlan()
    edges = g.edges
    names = {s.name for s in g.layers}
    group_of: dict[str, str] = {}
    halo = {}
    for grp in plan.groups:
        if grp.name in names and grp.layers != [grp.name]:
            raise FusionError(f"group name {grp.name!r} collides with a layer name")
        for lname in grp.layers:
            if lname not in names:
                raise FusionError(f"group {grp.name!r} names unknown layer {lname!r}")
            if lname in group_of:
                raise FusionError(f"layer {lname!r} appears in groups {group_of[lname]!r} and {grp.name!r}")
            group_of[lname] = grp.name
        halo[grp.name] = grp.halo
    for spec in g.layers:
        group_of.setdefault(spec.name, spec.name)

    order = _toposort_groups(g, group_of)
    members = {k: [] for k in order}
    for spec in g.layers:
        members[group_of[spec.name]].append(spec.name)
    steps = [(k, members[k]) for k in order]
    step_of = {k: i for i, k in enumerate(order)}

    out_edge = g.output_edge
    internal, stored = set(), []
    produced_at = {g.input_name: -1}
    last_use = {}
    for spec in g.layers:
        e = spec.output
        grp = group_of[spec.name]
        cons = g.consumers_of(e)
        produced_at[e] = step_of[grp]
        if cons and e != out_edge and all(group_of[c.name] == grp for c in cons):
            internal.add(e)
        else:
            stored.append(e)
    for e in [g.input_name] + stored:
        cons = g.consumers_of(e)
        last_use[e] = len(steps) if e == out_edge else max((step_of[group_of[c.name]] for c in cons),
                                                             default=produced_at[e])
    layout = Layout(steps, group_of, internal, stored, produced_at, last_use)
    _check_streamable(g, layout, halo)
    return layout


def _check_streamable(g: NetworkGraph, layout: Layout, halo: dict) -> None:
    edges = g.edges
    for e in layout.internal:
        spec = g.producer_of(e)
        ins = [edges[i] for i in spec.inputs]
        if op_for(spec.kind).window(spec, g, ins, 0) is None:
            raise FusionError(f"{spec.name} ({spec.kind}) cannot produce its output row by row")
    for spec in g.layers:
        grp = layout.group_of[spec.name]
        ins = [edges[i] for i in spec.inputs]
        for e in spec.inputs:
            if e in layout.stored and e != g.input_name and layout.group_of[g.producer_of(e).name] == grp:
                raise FusionError(
                    f"stored edge {e!r} is consumed inside its own group {grp!r}; split the group"
                )
        if not any(e in layout.internal for e in spec.inputs):
            continue
        op = op_for(spec.kind)
        if op.window(spec, g, ins, 0) is None:
            raise FusionError(f"{spec.name} ({spec.kind}) needs its whole input and cannot be fused")
        if not halo.get(grp, True):
            for r in range(edges[spec.output].shape[1]):
                for (lo, hi, _), e in zip(op.window(spec, g, ins, r), spec.inputs):
                    if e in layout.internal and hi > lo:
                        raise FusionError(
                            f"{spec.name} reads {hi - lo + 1} rows of fused edge {e!r}; "
                            f"group {grp!r} needs halo buffering"
                        )


def plan_from_stored(g: NetworkGraph, stored_base, name: str = "fused") -> FusionPlan:
    """Fuse everything except the chosen base edges (kept in their most compact form).

    Inputs of layers that cannot stream (global pooling, FC) stay stored as well.
    """
    edges = g.edges
    keep = {g.input_name, g.output_edge}
    for base in stored_base:
        if base not in edges:
            raise FusionError(f"unknown edge {base!r}")
        origin = edges[base].origin
        keep.add(_most_compact(g, origin, [e for e, info in edges.items() if info.origin == origin]))
    for spec in g.layers:
        if op_for(spec.kind).window(spec, g, [edges[e] for e in spec.inputs], 0) is None:
            keep.update(spec.inputs)

    parent = {s.name: s.name for s in g.layers}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for spec in g.layers:
        if spec.output in keep:
            continue
        for c in g.consumers_of(spec.output):
            parent[find(c.name)] = find(spec.name)
    comps: dict[str, list[str]] = {}
    for spec in g.layers:
        comps.setdefault(find(spec.name), []).append(spec.name)
    groups = [FusionGroup(f"{name}{i}", members) for i, members in enumerate(
        m for m in comps.values() if len(m) > 1)]
    return FusionPlan(groups)


def _most_compact(g: NetworkGraph, origin: str, family: list[str]) -> str:
    for kind in ("compress", "quantize"):
        for e in family:
            prod = g.producer_of(e)
            if prod is not None and prod.kind == kind:
                return e
    return origin


# ------------------------------------------------------------ accounting

def aliased(g: NetworkGraph, layout: Layout, e: str) -> bool:
    """A concat whose inputs are all stored is a view over them and costs nothing."""
    prod = g.producer_of(e)
    return prod is not None and prod.kind == "concat" and all(i in layout.stored or i == g.input_name
                                                               for i in prod.inputs)


def measured_bytes(value, info: EdgeInfo) -> int:
    """Bytes a stored value actually occupies in its declared representation."""
    if isinstance(value, gf2.BitTensor):
        return value.nbytes
    et = info.etype
    if et.kind == "float":
        return value.astype(np.float32).nbytes
    if et.kind == "acc":
        return value.astype(np.int32).nbytes
    if et.kind == "bin":
        return gf2.pack_bits(value, 1).nbytes
    codes = np.asarray(value, np.int64)
    if et.kind == "int":
        codes = codes + (1 << (et.bits - 1))
    return gf2.binarize(codes, et.bits).nbytes


@dataclass
class FusionTrace:
    stored_bytes: dict[str, int]
    buffer_rows: dict[str, int]
    buffer_bytes: dict[str, int]
    step_live: list[tuple[str, int]]

    @property
    def stored_total(self) -> int:
        return sum(self.stored_bytes.values())

    @property
    def buffer_total(self) -> int:
        return sum(self.buffer_bytes.values())

    @property
    def peak_live(self) -> int:
        return max((b for _, b in self.step_live), default=0)


# ------------------------------------------------------------- execution

class _GroupRunner:
    """Computes one group; internal edges are produced lazily row by row."""

    def __init__(self, g: NetworkGraph, layout: Layout, members: list[str], values: dict, dry: bool):
        self.g, self.layout, self.values, self.dry = g, layout, values, dry
        self.edges = g.edges
        self.specs = [g.layer(n) for n in members]
        self.cache: dict[str, dict[int, np.ndarray]] = {}
        self.max_rows: dict[str, int] = {}
        self.next_row: dict[str, int] = {}
        self.out: dict[str, np.ndarray] = {}
        self.batch = next((v.shape[0] for v in values.values()), 0)

    def _ins(self, spec):
        return [self.edges[e] for e in spec.inputs]

    def row(self, e: str, r: int):
        if e not in self.layout.internal:
            return None if self.dry else self.values[e][:, :, r:r + 1]
        rows = self.cache.setdefault(e, {})
        if r not in rows:
            rows[r] = self._compute(self.g.producer_of(e), r)
            self.max_rows[e] = max(self.max_rows.get(e, 0), len(rows))
        return rows[r]

    def _window(self, e: str, lo: int, hi: int, fill: bool, spec):
        h = self.edges[e].shape[1]
        if not fill:
            lo, hi = max(lo, 0), min(hi, h - 1)
        parts = []
        for r in range(lo, hi + 1):
            if 0 <= r < h:
                parts.append(self.row(e, r))
            else:
                parts.append(None)
        if self.dry:
            return None, lo
        if not parts:
            c, _, w = self.edges[e].shape
            return np.zeros((self.batch, c, 0, w), np.float32), lo
        ref = next(p for p in parts if p is not None)
        filler = None
        out = []
        for p in parts:
            if p is None:
                if filler is None:
                    filler = np.full_like(ref, op_for(spec.kind).fill(spec, ref.dtype))
                p = filler
            out.append(p)
        return np.concatenate(out, axis=2), lo

    def _compute(self, spec, r: int):
        op = op_for(spec.kind)
        ins = self._ins(spec)
        wins = [self._window(e, lo, hi, fill, spec)
                for (lo, hi, fill), e in zip(op.window(spec, self.g, ins, r), spec.inputs)]
        if self.dry:
            return True
        return op.forward_rows(spec, self.g, wins, r, ins)

    def _evict(self) -> None:
        need: dict[str, float] = {}
        for spec in reversed(self.specs):
            o = spec.output
            nxt = need.get(o, math.inf) if o in self.layout.internal else self.next_row.get(o, math.inf)
            if nxt == math.inf:
                continue
            wins = op_for(spec.kind).window(spec, self.g, self._ins(spec), int(nxt))
            for (lo, _, _), e in zip(wins, spec.inputs):
                if e in self.layout.internal:
                    need[e] = min(need.get(e, math.inf), lo)
        for e, rows in self.cache.items():
            cut = need.get(e, math.inf)
            for r in [r for r in rows if r < cut]:
                del rows[r]

    def run(self) -> dict[str, np.ndarray]:
        streamed = []
        for spec in self.specs:
            if spec.output in self.layout.internal:
                continue
            if any(e in self.layout.internal for e in spec.inputs):
                streamed.append(spec)
                self.next_row[spec.output] = 0
            elif not self.dry:
                y, _ = op_for(spec.kind).forward(spec, self.g, [self.values[e] for e in spec.inputs],
                                                  Ctx())
                self.out[spec.output] = y
        parts: dict[str, list] = {s.output: [] for s in streamed}
        while self.next_row:
            o = min(self.next_row, key=lambda k: ((self.next_row[k] + 1) / self.edges[k].shape[1],
                                                  list(self.next_row).index(k)))
            r = self.next_row[o]
            y = self._compute(self.g.producer_of(o), r)
            parts[o].append(y)
            self.next_row[o] = r + 1
            if r + 1 >= self.edges[o].shape[1]:
                del self.next_row[o]
            self._evict()
        if not self.dry:
            for o, rows in parts.items():
                self.out[o] = np.concatenate(rows, axis=2)
        return self.out


def _dense(v):
    return v.unpack() if isinstance(v, gf2.BitTensor) else v


def simulate_buffers(g: NetworkGraph, layout: Layout) -> dict[str, int]:
    """Maximum rows each internal edge holds under the executor's schedule."""
    rows: dict[str, int] = {}
    for _, members in layout.steps:
        runner = _GroupRunner(g, layout, members, {}, dry=True)
        runner.run()
        rows.update(runner.max_rows)
    return rows


def fused_execute(g: NetworkGraph, x: np.ndarray, plan: FusionPlan | None = None):
    """Run ``g`` under ``plan``; returns (output, FusionTrace).

    Stored GF(2) maps are held bit-packed between groups.
    """
    layout = analyze(g, plan)
    edges = g.edges
    x = np.asarray(x)
    n = x.shape[0]
    held: dict[str, object] = {g.input_name: x}
    stored_bytes: dict[str, int] = {}
    buffer_rows: dict[str, int] = {}
    step_live = []
    for i, (name, members) in enumerate(layout.steps):
        dense = {e: _dense(v) for e, v in held.items()}
        runner = _GroupRunner(g, layout, members, dense, dry=False)
        outs = runner.run()
        buffer_rows.update(runner.max_rows)
        for e, y in outs.items():
            info = edges[e]
            held[e] = gf2.pack_bits(y, 1) if info.etype.kind == "bin" else y
            stored_bytes[e] = 0 if aliased(g, layout, e) else measured_bytes(held[e], info)
        live = sum(stored_bytes[e] for e in held if e != g.input_name)
        live += sum(edges[e].row_bytes(n) * k for e, k in runner.max_rows.items())
        step_live.append((name, live))
        for e in [e for e in held if layout.last_use.get(e, -1) <= i and e != g.output_edge]:
            del held[e]
    buffer_bytes = {e: edges[e].row_bytes(n) * k for e, k in buffer_rows.items()}
    out = _dense(held[g.output_edge])
    return out, FusionTrace(stored_bytes, buffer_rows, buffer_bytes, step_live)
