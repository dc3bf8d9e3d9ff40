"""Intra-day encoder: meta-path neighbourhoods, edge-aware attention, relation fusion.

Stock embeddings are row vectors, so a projection ``W h`` is written ``h @ W``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_SENTINEL, Node, Tape
from .graph import GraphSnapshot

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetaPath:
    id: str
    chain: tuple[str, ...]
    via: str | None  # kind of the intermediate nodes


META_PATHS = {
    "SS": MetaPath("SS", ("SS",), None),
    "SBS": MetaPath("SBS", ("SB", "SB"), "B"),
    "SIIS": MetaPath("SIIS", ("SI", "II", "SI"), "I"),
}
PATH_IDS = ("SS", "SBS", "SIIS")
UNTYPED = "ALL"


@dataclass
class InducedEdges:
    """Stock-to-stock edges of one meta-path on one or more stacked days.

    Row ``e`` says stock ``dst[e]`` sends to target ``src[e]``; rows are sorted
    by target. ``feat`` holds the mean constituent edge features followed by
    ``log1p(instance count)``. ``mid_*`` is a sparse averaging operator over
    the intermediate nodes of the path instances, indexing the hub table
    ``[banks; industries]``.
    """
    src: np.ndarray
    dst: np.ndarray
    feat: np.ndarray
    mid_row: np.ndarray
    mid_col: np.ndarray
    mid_w: np.ndarray

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.src.tolist(), self.dst.tolist()))


def _empty(d_e: int) -> InducedEdges:
    z = np.zeros(0, dtype=np.intp)
    return InducedEdges(z, z.copy(), np.zeros((0, d_e + 1)), z.copy(), z.copy(), np.zeros(0))


def _edge_width(s: GraphSnapshot, d_e: int | None) -> int:
    if d_e is not None:
        return d_e
    return len(s.edges[0].features) if s.edges else 0


def _instances(s: GraphSnapshot, path: str):
    """Yield (i, j, [edge feature vectors], [(kind, node)]) per path instance.

    Iteration order depends only on intermediate-node indices, never on stock
    labels, so downstream sums are invariant to stock relabelling.
    """
    by_rel = {r: [] for r in ("SS", "SB", "SI", "II")}
    for e in s.edges:
        by_rel[e.relation].append(e)
    if path == "SS":
        for e in by_rel["SS"]:
            f = np.asarray(e.features)
            yield e.src.index, e.dst.index, [f], []
            yield e.dst.index, e.src.index, [f], []
    elif path == "SBS":
        members: dict[int, list] = {}
        for e in by_rel["SB"]:
            members.setdefault(e.dst.index, []).append((e.src.index, np.asarray(e.features)))
        for b in sorted(members):
            for i, fi in members[b]:
                for j, fj in members[b]:
                    if i != j:
                        yield i, j, [fi, fj], [("B", b)]
    elif path == "SIIS":
        members = {}
        for e in by_rel["SI"]:
            members.setdefault(e.dst.index, []).append((e.src.index, np.asarray(e.features)))
        links: dict[tuple[int, int], list] = {}
        for a in members:
            links[(a, a)] = []  # implicit identity link, carries no features
        for e in by_rel["II"]:
            f = [np.asarray(e.features)]
            a, b = e.src.index, e.dst.index
            links[(a, b)] = f
            links[(b, a)] = f
        for (a, b) in sorted(links):
            if a not in members or b not in members:
                continue
            for i, fi in members[a]:
                for j, fj in members[b]:
                    if i != j:
                        yield i, j, [fi, *links[(a, b)], fj], [("I", a), ("I", b)]
    else:
        raise ValueError(f"unknown meta-path {path!r}")


def induce_meta_path_graph(s: GraphSnapshot, path: str, d_e: int | None = None) -> InducedEdges:
    """Stock pairs joined by an instance of ``path`` (or of any path for ``"ALL"``)."""
    d_e = _edge_width(s, d_e)
    paths = PATH_IDS if path == UNTYPED else (path,)
    acc: dict[tuple[int, int], list] = {}
    for p in paths:
        for i, j, feats, mids in _instances(s, p):
            rec = acc.setdefault((i, j), [[], [], 0])
            rec[0].extend(feats)
            if mids:
                rec[1].append(mids)
            rec[2] += 1
    if not acc:
        return _empty(d_e)

    x = s.stock_features

    def order_key(pair):
        # within a target, neighbours are ordered by content, not by label
        i, j = pair
        return (i, tuple(x[j]), tuple(np.sum(acc[pair][0], axis=0)))

    keys = sorted(acc, key=order_key)
    src = np.array([k[0] for k in keys], dtype=np.intp)
    dst = np.array([k[1] for k in keys], dtype=np.intp)
    feat = np.zeros((len(keys), d_e + 1))
    n_b = s.count("B")
    rows, cols, ws = [], [], []
    for r, k in enumerate(keys):
        feats, mids, count = acc[k]
        if d_e:
            feat[r, :d_e] = np.sum(feats, axis=0) / len(feats)
        feat[r, d_e] = np.log1p(count)
        # mean over instances of each instance's mean intermediate node
        weight: dict[tuple[str, int], float] = {}
        for inst in mids:
            for m in inst:
                weight[m] = weight.get(m, 0.0) + 1.0 / (len(inst) * len(mids))
        for (kind, node) in sorted(weight):
            rows.append(r)
            cols.append(node if kind == "B" else n_b + node)
            ws.append(weight[(kind, node)])
    return InducedEdges(src, dst, feat, np.array(rows, dtype=np.intp),
                        np.array(cols, dtype=np.intp), np.array(ws))


# ---------------------------------------------------------------------------
# batching: several snapshots stacked as one block-diagonal graph


@dataclass
class GraphBatch:
    days: list[int]
    n_stocks: int
    stock_x: np.ndarray  # (days * n_S) x d_in
    hub_x: np.ndarray    # stacked [banks; industries] per day
    hub_is_bank: np.ndarray
    paths: dict[str, InducedEdges]

    @property
    def n_rows(self) -> int:
        return self.stock_x.shape[0]


def _stack(parts: list[InducedEdges], stock_off, hub_off) -> InducedEdges:
    src, dst, feat, mr, mc, mw = [], [], [], [], [], []
    edge_off = 0
    for ie, so, ho in zip(parts, stock_off, hub_off):
        src.append(ie.src + so)
        dst.append(ie.dst + so)
        feat.append(ie.feat)
        mr.append(ie.mid_row + edge_off)
        mc.append(ie.mid_col + ho)
        mw.append(ie.mid_w)
        edge_off += ie.n_edges
    return InducedEdges(np.concatenate(src), np.concatenate(dst), np.concatenate(feat),
                        np.concatenate(mr), np.concatenate(mc), np.concatenate(mw))


def path_ids(untyped: bool = False) -> tuple[str, ...]:
    return (UNTYPED,) if untyped else PATH_IDS


def day_batch(s: GraphSnapshot, d_e: int, untyped: bool = False) -> GraphBatch:
    """Induced meta-path edges and node features of one snapshot."""
    hub = np.concatenate([s.bank_features, s.industry_features], axis=0)
    paths = {p: induce_meta_path_graph(s, p, d_e) for p in path_ids(untyped)}
    return GraphBatch([s.day], s.n_stocks, s.stock_features, hub,
                      np.arange(hub.shape[0]) < s.count("B"), paths)


def stack_batches(parts: list[GraphBatch]) -> GraphBatch:
    if not parts:
        raise ValueError("empty batch")
    n_s = parts[0].n_stocks
    stock_off, hub_off = [], []
    s_off = h_off = 0
    for b in parts:
        if b.n_stocks != n_s:
            raise ValueError(f"days {b.days}: stock count {b.n_stocks} != {n_s}")
        stock_off.append(s_off)
        hub_off.append(h_off)
        s_off += b.n_rows
        h_off += b.hub_x.shape[0]
    paths = {p: _stack([b.paths[p] for b in parts], stock_off, hub_off) for p in parts[0].paths}
    return GraphBatch([d for b in parts for d in b.days], n_s,
                      np.concatenate([b.stock_x for b in parts], axis=0),
                      np.concatenate([b.hub_x for b in parts], axis=0),
                      np.concatenate([b.hub_is_bank for b in parts]), paths)


def build_batch(snapshots: list[GraphSnapshot], d_e: int, untyped: bool = False) -> GraphBatch:
    return stack_batches([day_batch(s, d_e, untyped) for s in snapshots])


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class EncoderOptions:
    layers: int = 2
    heads: int = 2
    slope: float = 0.2
    edge_features: bool = True
    untyped: bool = False        # one collapsed edge set instead of meta-paths
    learned_fusion: bool = True  # False: plain average over available meta-paths


def edge_inputs(tape: Tape, P: dict[str, Node], ie: InducedEdges, hub: Node | None,
                layer: int, path: str, edge_features: bool) -> Node:
    """Per-edge feature rows ``[mean edge feats, log1p count, intermediates -> d_e]``."""
    w_mid = P[f"enc.{layer}.{path}.W_mid"]
    d_mid = w_mid.shape[1]
    if not edge_features:
        return tape.constant(np.zeros((ie.n_edges, ie.feat.shape[1] + d_mid)))
    raw = tape.constant(ie.feat, "edge_feat")
    if hub is None or len(ie.mid_row) == 0:
        mid = tape.constant(np.zeros((ie.n_edges, d_mid)))
    else:
        picked = ad.mul_col(ad.gather_rows(hub, ie.mid_col), tape.constant(ie.mid_w[:, None]))
        mid = ad.matmul(ad.segment_sum(picked, ie.mid_row, ie.n_edges), w_mid)
    return ad.concat_cols(raw, mid)


def attend_meta_path(h: Node, ie: InducedEdges, edge_x: Node, heads: list[dict[str, Node]],
                     slope: float = 0.2, trace: list | None = None) -> Node:
    """Multi-head edge-aware attention over one induced edge set.

    Each head scores ``a . [h_i W ; h_j W ; e_ij W_e]``, applies LeakyReLU,
    normalises over the target's neighbours and sums ``alpha * h_j W``. The
    head outputs are averaged and passed through tanh. Stocks with no
    neighbour get a zero row before the tanh.
    """
    n = h.shape[0]
    d_h = heads[0]["W"].shape[1]
    outs = []
    for hp in heads:
        proj = ad.matmul(h, hp["W"])
        a = hp["a"]
        s_i = ad.matmul(proj, ad.slice_rows(a, 0, d_h))
        s_j = ad.matmul(proj, ad.slice_rows(a, d_h, 2 * d_h))
        s_e = ad.matmul(ad.matmul(edge_x, hp["W_e"]), ad.slice_rows(a, 2 * d_h, 3 * d_h))
        beta = ad.add(ad.add(ad.gather_rows(s_i, ie.src), ad.gather_rows(s_j, ie.dst)), s_e)
        alpha = ad.segment_softmax(ad.leaky_relu(beta, slope), ie.src, n)
        if trace is not None:
            trace.append(alpha.value[:, 0].copy())
        msg = ad.mul_col(ad.gather_rows(proj, ie.dst), alpha)
        outs.append(ad.segment_sum(msg, ie.src, n))
    out = ad.tanh(ad.mean_over(outs))
    if not np.all(np.isfinite(out.value)):
        raise ad.NumericError("non-finite meta-path attention output")
    return out


def fuse_relations(hs: list[Node], covered: np.ndarray, w_fus: Node | None,
                   fallback: Node) -> tuple[Node, np.ndarray]:
    """Softmax-weighted combination of per-meta-path embeddings, then tanh.

    ``covered[i, m]`` says stock ``i`` has at least one neighbour under
    meta-path ``m``; uncovered paths are left out of that stock's softmax.
    A stock covered by no path falls back to ``tanh(fallback[i])``.
    ``w_fus=None`` gives equal weights over the covered paths.
    Returns the fused node and the n x M weight matrix (zero rows for fallbacks).
    """
    tape = fallback.tape
    n = fallback.shape[0]
    none = ~covered.any(axis=1)
    if none.any():
        log.debug("%d stocks have no meta-path neighbour; using own projection", int(none.sum()))
    if w_fus is None:
        scores = tape.constant(np.zeros((n, len(hs))))
    else:
        scores = ad.concat_cols(*[ad.matmul(h, w_fus) for h in hs])
    mask = np.where(covered | none[:, None], 0.0, NEG_SENTINEL)
    weights = ad.softmax_rows(scores, mask)
    if none.any():
        weights = ad.mul_const(weights, np.repeat(~none[:, None], len(hs), 1).astype(np.float64))
    parts = [ad.mul_col(h, ad.slice_cols(weights, m, m + 1)) for m, h in enumerate(hs)]
    total = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
    for p in parts[2:]:
        total = ad.add(total, p)
    if none.any():
        total = ad.add(total, ad.mul_const(fallback, np.repeat(none[:, None], fallback.shape[1], 1)
                                           .astype(np.float64)))
    report = np.where(none[:, None], 0.0, weights.value)
    return ad.tanh(total), report


def head_params(P: dict[str, Node], layer: int, path: str, heads: int) -> list[dict[str, Node]]:
    return [{"W": P[f"enc.{layer}.{path}.{k}.W"], "a": P[f"enc.{layer}.{path}.{k}.a"],
             "W_e": P[f"enc.{layer}.{path}.{k}.W_e"]} for k in range(heads)]


def input_projection(tape: Tape, P: dict[str, Node], x: np.ndarray, kind: str) -> Node:
    return ad.add(ad.matmul(tape.constant(x, f"x_{kind}"), P[f"in.{kind}.W"]), P[f"in.{kind}.b"])


@dataclass
class EncoderTrace:
    fusion: list[np.ndarray]   # per layer: n x M weights
    attention: list[np.ndarray]  # every head's alpha vector, all layers and paths
    covered: np.ndarray


def encode_batch(tape: Tape, P: dict[str, Node], batch: GraphBatch, opt: EncoderOptions,
                 trace: EncoderTrace | None = None) -> Node:
    """Final-layer stock embeddings, one row per (day, stock) of ``batch``."""
    h = input_projection(tape, P, batch.stock_x, "S")
    hub = _hub_projection(tape, P, batch) if batch.hub_x.shape[0] else None
    ids = path_ids(opt.untyped)
    n = batch.n_rows
    covered = np.zeros((n, len(ids)), dtype=bool)
    for m, p in enumerate(ids):
        covered[np.unique(batch.paths[p].src), m] = True
    for layer in range(opt.layers):
        hs, cov = [], []
        for m, p in enumerate(ids):
            ie = batch.paths[p]
            if ie.n_edges == 0:
                continue
            ex = edge_inputs(tape, P, ie, hub, layer, p, opt.edge_features)
            alphas = trace.attention if trace is not None else None
            hs.append(attend_meta_path(h, ie, ex, head_params(P, layer, p, opt.heads),
                                       opt.slope, alphas))
            cov.append(covered[:, m])
        if hs:
            w = P[f"fuse.{layer}.w"] if opt.learned_fusion else None
            h, weights = fuse_relations(hs, np.stack(cov, axis=1), w, h)
            if trace is not None:
                full = np.zeros((n, len(ids)))
                full[:, [m for m, p in enumerate(ids) if batch.paths[p].n_edges]] = weights
                trace.fusion.append(full)
        else:
            h = ad.tanh(h)
            if trace is not None:
                trace.fusion.append(np.zeros((n, len(ids))))
    if trace is not None:
        trace.covered = covered
    return h


def _hub_projection(tape: Tape, P: dict[str, Node], batch: GraphBatch) -> Node:
    """Input projections of the bank/industry table, each kind with its own weights."""
    banks = np.flatnonzero(batch.hub_is_bank)
    inds = np.flatnonzero(~batch.hub_is_bank)
    parts, order = [], np.empty(len(batch.hub_is_bank), dtype=np.intp)
    pos = 0
    for rows, kind in ((banks, "B"), (inds, "I")):
        if len(rows):
            parts.append(input_projection(tape, P, batch.hub_x[rows], kind))
            order[rows] = np.arange(pos, pos + len(rows))
            pos += len(rows)
    table = parts[0] if len(parts) == 1 else ad.concat_rows(*parts)
    return ad.gather_rows(table, order)


def encode_snapshot(tape: Tape, P: dict[str, Node], s: GraphSnapshot, opt: EncoderOptions,
                    d_e: int | None = None, trace: EncoderTrace | None = None) -> Node:
    """Stock embeddings (n_S x d_h) of a single day."""
    d_e = _edge_width(s, d_e)
    return encode_batch(tape, P, build_batch([s], d_e, opt.untyped), opt, trace)


def new_trace() -> EncoderTrace:
    return EncoderTrace([], [], np.zeros((0, 0), dtype=bool))
