"""Daily multi-relational snapshots, aligned prices, labels and on-disk formats.

Files in a dataset directory::

    snapshots.jsonl   one JSON object per trading day
    prices.csv        header ``stock,day0,day1,...``; empty cell = suspended
    benchmark.csv     header ``day,return``
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

KINDS = ("S", "B", "I")
RELATIONS = ("SS", "SB", "SI", "II")
RELATION_KINDS = {"SS": ("S", "S"), "SB": ("S", "B"), "SI": ("S", "I"), "II": ("I", "I")}


class DataError(ValueError):
    """Bad values in otherwise well-formed data (e.g. non-positive price)."""


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


@dataclass(frozen=True)
class NodeRef:
    kind: str
    index: int


@dataclass(frozen=True)
class EdgeRecord:
    """Undirected typed edge; ``src`` is the endpoint listed first in the relation."""

    relation: str
    src: NodeRef
    dst: NodeRef
    features: tuple[float, ...]

    @classmethod
    def make(cls, relation: str, src: int, dst: int, features) -> "EdgeRecord":
        a, b = RELATION_KINDS[relation]
        return cls(relation, NodeRef(a, int(src)), NodeRef(b, int(dst)),
                   tuple(float(x) for x in features))


@dataclass
class GraphSnapshot:
    day: int
    stock_features: np.ndarray
    bank_features: np.ndarray
    industry_features: np.ndarray
    edges: list[EdgeRecord] = field(default_factory=list)

    @property
    def n_stocks(self) -> int:
        return self.stock_features.shape[0]

    def count(self, kind: str) -> int:
        return {"S": self.stock_features, "B": self.bank_features,
                "I": self.industry_features}[kind].shape[0]

    def features(self, kind: str) -> np.ndarray:
        return {"S": self.stock_features, "B": self.bank_features,
                "I": self.industry_features}[kind]

    def edges_of(self, relation: str) -> list[EdgeRecord]:
        return [e for e in self.edges if e.relation == relation]

    def edge_counts(self) -> dict[str, int]:
        counts = {r: 0 for r in RELATIONS}
        for e in self.edges:
            counts[e.relation] = counts.get(e.relation, 0) + 1
        return counts

    def equals(self, other: "GraphSnapshot") -> bool:
        return (self.day == other.day
                and all(np.array_equal(self.features(k), other.features(k)) for k in KINDS)
                and self.edges == other.edges)


@dataclass
class DynamicGraph:
    snapshots: list[GraphSnapshot]
    prices: np.ndarray      # n_S x T, NaN where suspended
    benchmark: np.ndarray   # length T

    @property
    def n_days(self) -> int:
        return len(self.snapshots)

    @property
    def n_stocks(self) -> int:
        return self.prices.shape[0]

    def equals(self, other: "DynamicGraph") -> bool:
        return (len(self.snapshots) == len(other.snapshots)
                and all(a.equals(b) for a, b in zip(self.snapshots, other.snapshots))
                and np.array_equal(self.prices, other.prices, equal_nan=True)
                and np.array_equal(self.benchmark, other.benchmark))


@dataclass
class LabelFrame:
    labels: np.ndarray  # n_S x (T-1); 0.0 where invalid
    valid: np.ndarray   # bool, same shape


def build_labels(g: DynamicGraph) -> LabelFrame:
    """Next-day excess return ``(p[t+1] - p[t]) / p[t] - benchmark[t]``."""
    p = g.prices
    if p.shape[1] < 2:
        raise DataError("need at least two days of prices for labels")
    bad = np.argwhere(~np.isnan(p) & (p <= 0))
    if len(bad):
        i, t = bad[0]
        raise DataError(f"non-positive price {p[i, t]} for stock {i} on day {t}")
    now, nxt = p[:, :-1], p[:, 1:]
    valid = ~(np.isnan(now) | np.isnan(nxt))
    with np.errstate(invalid="ignore"):
        y = (nxt - now) / now - g.benchmark[None, :-1]
    return LabelFrame(np.where(valid, y, 0.0), valid)


def validate(s: GraphSnapshot, d_e: int | None = None) -> list[str]:
    """Every violated invariant of ``s``, as messages. Empty list means ok."""
    problems = []
    dims = {k: s.features(k).shape[1] for k in KINDS if s.count(k)}
    if len(set(dims.values())) > 1:
        problems.append(f"feature width differs across kinds: {dims}")
    for k in KINDS:
        if not np.all(np.isfinite(s.features(k))):
            problems.append(f"non-finite feature in kind {k}")
    seen = set()
    widths = set()
    for pos, e in enumerate(s.edges):
        if e.relation not in RELATION_KINDS:
            problems.append(f"edge {pos}: unknown relation {e.relation!r}")
            continue
        want = RELATION_KINDS[e.relation]
        got = (e.src.kind, e.dst.kind)
        if got != want:
            problems.append(f"edge {pos}: relation/kind mismatch ({e.relation} between {got[0]} and {got[1]})")
            continue
        for ref in (e.src, e.dst):
            if not 0 <= ref.index < s.count(ref.kind):
                problems.append(f"edge {pos}: {ref.kind} index {ref.index} out of range")
        if e.relation == "SS" and e.src == e.dst:
            problems.append(f"edge {pos}: self-loop on stock {e.src.index}")
        key = (e.relation, e.src.index, e.dst.index)
        if key in seen:
            problems.append(f"edge {pos}: duplicate edge {key}")
        seen.add(key)
        widths.add(len(e.features))
        if d_e is not None and len(e.features) != d_e:
            problems.append(f"edge {pos}: bad feature length {len(e.features)} (want {d_e})")
    if d_e is None and len(widths) > 1:
        problems.append(f"bad feature length: mixed edge feature widths {sorted(widths)}")
    return problems


def relation_subset(s: GraphSnapshot, keep: Iterable[str]) -> GraphSnapshot:
    keep = set(keep)
    unknown = keep - set(RELATIONS)
    if unknown:
        raise ValueError(f"unknown relations {sorted(unknown)}")
    return GraphSnapshot(s.day, s.stock_features, s.bank_features, s.industry_features,
                         [e for e in s.edges if e.relation in keep])


def subset_graph(g: DynamicGraph, keep: Iterable[str]) -> DynamicGraph:
    keep = set(keep)
    return DynamicGraph([relation_subset(s, keep) for s in g.snapshots], g.prices, g.benchmark)


# ---------------------------------------------------------------------------
# file formats


def _snapshot_to_json(s: GraphSnapshot) -> str:
    obj = {
        "day": s.day,
        "nodes": {k: s.features(k).tolist() for k in KINDS},
        "edges": [{"rel": e.relation, "src": e.src.index, "dst": e.dst.index,
                   "feat": list(e.features)}
                  for e in s.edges],
    }
    # repr round-trips float64 exactly
    return json.dumps(obj, separators=(",", ":"))


def _matrix(rows, what: str, lineno: int) -> np.ndarray:
    arr = np.array(rows, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 0))
    if arr.ndim != 2:
        raise ParseError(f"line {lineno}: ragged {what} feature matrix")
    return arr


def _snapshot_from_json(line: str, lineno: int) -> GraphSnapshot:
    try:
        obj = json.loads(line)
        day = int(obj["day"])
        nodes = obj["nodes"]
        feats = {k: _matrix(nodes.get(k, []), k, lineno) for k in KINDS}
        edges = []
        for e in obj["edges"]:
            rel = str(e["rel"])
            if rel not in RELATION_KINDS:
                raise ParseError(f"snapshots line {lineno}: unknown relation {rel!r}")
            edges.append(EdgeRecord.make(rel, e["src"], e["dst"], e["feat"]))
    except ParseError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"snapshots line {lineno}: {exc}") from exc
    width = max(f.shape[1] for f in feats.values())
    for k, f in feats.items():
        if f.size == 0:
            feats[k] = np.zeros((0, width))
    return GraphSnapshot(day, feats["S"], feats["B"], feats["I"], edges)


def _read_prices(text: str) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or not rows[0] or rows[0][0] != "stock":
        raise ParseError("prices line 1: header must start with 'stock'")
    n_days = len(rows[0]) - 1
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != n_days + 1:
            raise ParseError(f"prices line {lineno}: row for stock {row[0]!r} has "
                             f"{len(row) - 1} values, expected {n_days}")
        try:
            if int(row[0]) != len(out):
                raise ParseError(f"prices line {lineno}: stocks must be listed in order")
            out.append([float(x) if x != "" else math.nan for x in row[1:]])
        except ValueError as exc:
            raise ParseError(f"prices line {lineno}: {exc}") from exc
    return np.array(out, dtype=np.float64).reshape(len(out), n_days)


def _read_benchmark(text: str) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["day", "return"]:
        raise ParseError("benchmark line 1: header must be 'day,return'")
    vals = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            if len(row) != 2 or int(row[0]) != len(vals):
                raise ParseError(f"benchmark line {lineno}: malformed row {row}")
            vals.append(float(row[1]))
        except ValueError as exc:
            raise ParseError(f"benchmark line {lineno}: {exc}") from exc
    return np.array(vals, dtype=np.float64)


def save(g: DynamicGraph, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "snapshots.jsonl", "w") as fh:
        for s in g.snapshots:
            fh.write(_snapshot_to_json(s) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stock"] + [f"day{t}" for t in range(g.prices.shape[1])])
    for i, row in enumerate(g.prices):
        w.writerow([i] + ["" if np.isnan(x) else repr(float(x)) for x in row])
    (path / "prices.csv").write_text(buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["day", "return"])
    for t, r in enumerate(g.benchmark):
        w.writerow([t, repr(float(r))])
    (path / "benchmark.csv").write_text(buf.getvalue())


def load(path) -> DynamicGraph:
    path = Path(path)
    snapshots = []
    with open(path / "snapshots.jsonl") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                snapshots.append(_snapshot_from_json(line, lineno))
    prices = _read_prices((path / "prices.csv").read_text())
    benchmark = _read_benchmark((path / "benchmark.csv").read_text())
    g = DynamicGraph(snapshots, prices, benchmark)
    check_dynamic(g)
    return g


def check_dynamic(g: DynamicGraph, d_e: int | None = None) -> None:
    """Raise :class:`SchemaError` on any cross-file or per-snapshot violation."""
    if not g.snapshots:
        raise SchemaError("dataset has no snapshots")
    n_s = g.snapshots[0].n_stocks
    for prev, s in zip(g.snapshots, g.snapshots[1:]):
        if s.day <= prev.day:
            raise SchemaError(f"snapshot days not strictly increasing at day {s.day}")
    for s in g.snapshots:
        if s.n_stocks != n_s:
            raise SchemaError(f"day {s.day}: {s.n_stocks} stocks, expected {n_s}")
        problems = validate(s, d_e)
        if problems:
            raise SchemaError(f"day {s.day}: {problems[0]}")
    if g.prices.shape != (n_s, len(g.snapshots)):
        raise SchemaError(f"prices shape {g.prices.shape} does not match "
                          f"{n_s} stocks x {len(g.snapshots)} days")
    if g.benchmark.shape != (len(g.snapshots),):
        raise SchemaError(f"benchmark length {len(g.benchmark)} != {len(g.snapshots)} days")
    bad = np.argwhere(~np.isnan(g.prices) & (g.prices <= 0))
    if len(bad):
        i, t = bad[0]
        raise DataError(f"non-positive price for stock {i} on day {t}")
