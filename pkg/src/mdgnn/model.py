"""Full scoring model: intra-day encoder -> temporal attention -> sigmoid head."""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .encoder import (EncoderOptions, EncoderTrace, GraphBatch, day_batch, encode_batch,
                      path_ids, stack_batches)
from .graph import RELATIONS, DynamicGraph, LabelFrame, build_labels, subset_graph
from .params import ParamStore
from .temporal import temporal_attend_last, window_index

LOSS_KINDS = ("bce", "mse")
MSE_TAU = 0.01


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 42
    d_e: int = 4
    d_h: int = 32
    layers: int = 2
    heads: int = 2
    temporal_heads: int = 4
    window: int = 10
    slope: float = 0.2
    kind: str = "mdgnn"  # or "mlp", a features-only control
    # ablation switches
    edge_features: bool = True
    meta_paths: bool = True
    hier_fusion: bool = True
    temporal: bool = True
    relations: tuple[str, ...] = RELATIONS

    def __post_init__(self):
        object.__setattr__(self, "relations", tuple(sorted(self.relations, key=RELATIONS.index)))
        if self.kind not in ("mdgnn", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        for name in ("d_in", "d_e", "d_h", "layers", "heads", "temporal_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.window < 0:
            raise ValueError("window must be >= 0")
        if set(self.relations) - set(RELATIONS):
            raise ValueError(f"unknown relations in {self.relations}")

    def encoder_options(self) -> EncoderOptions:
        return EncoderOptions(self.layers, self.heads, self.slope, self.edge_features,
                              untyped=not self.meta_paths, learned_fusion=self.hier_fusion)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["relations"] = list(self.relations)
        return d


def _rng_for(seed: int, name: str) -> np.random.Generator:
    # one substream per parameter name so variants share whatever they have in common
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    ps = ParamStore()

    def uni(name, rows, cols, fan_in=None):
        ps.init_uniform(name, rows, cols, _rng_for(seed, name), fan_in)

    d_h, d_e = cfg.d_h, cfg.d_e
    if cfg.kind == "mlp":
        uni("mlp.W", cfg.d_in, d_h)
        ps.init_zeros("mlp.b", 1, d_h)
    else:
        for kind in ("S", "B", "I"):
            uni(f"in.{kind}.W", cfg.d_in, d_h)
            ps.init_zeros(f"in.{kind}.b", 1, d_h)
        for layer in range(cfg.layers):
            for p in path_ids(not cfg.meta_paths):
                uni(f"enc.{layer}.{p}.W_mid", d_h, d_e)
                for k in range(cfg.heads):
                    uni(f"enc.{layer}.{p}.{k}.W", d_h, d_h)
                    uni(f"enc.{layer}.{p}.{k}.a", 3 * d_h, 1)
                    uni(f"enc.{layer}.{p}.{k}.W_e", 2 * d_e + 1, d_h)
            if cfg.hier_fusion:
                uni(f"fuse.{layer}.w", d_h, 1)
        if cfg.temporal:
            for name in ("WQ", "WK", "WV", "WO"):
                uni(f"tmp.{name}", d_h, d_h)
    uni("head.W1", d_h, 1)
    ps.init_zeros("head.b1", 1, 1)
    return ps


class PreparedData:
    """A dataset with labels and per-day induced graphs, cached for reuse."""

    def __init__(self, g: DynamicGraph, cfg: ModelConfig):
        if set(cfg.relations) != set(RELATIONS):
            g = subset_graph(g, cfg.relations)
        self.graph = g
        self.cfg = cfg
        self.labels: LabelFrame = build_labels(g)
        self.n_stocks = g.n_stocks
        self._days: dict[int, GraphBatch] = {}
        self._cache: dict[tuple[int, ...], tuple[GraphBatch, dict[int, int]]] = {}
        self.cache_limit = 32

    @property
    def n_label_days(self) -> int:
        return self.labels.labels.shape[1]

    def day(self, t: int) -> GraphBatch:
        if t not in self._days:
            s = self.graph.snapshots[t]
            self._days[t] = day_batch(s, self.cfg.d_e, untyped=not self.cfg.meta_paths)
        return self._days[t]

    def batch_for(self, days: list[int]) -> tuple[GraphBatch, dict[int, int]]:
        """Stacked graph covering ``days`` and their look-back windows."""
        w = self.cfg.window if self.cfg.temporal else 0
        need = sorted({d for t in days for d in range(max(0, t - w), t + 1)})
        key = tuple(need)
        if key not in self._cache:
            if len(self._cache) >= self.cache_limit:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = (stack_batches([self.day(t) for t in need]),
                                {d: r for r, d in enumerate(need)})
        return self._cache[key]

    def targets(self, days: list[int]) -> tuple[np.ndarray, np.ndarray]:
        """Labels and validity, day-major, for ``days`` (flattened column vectors)."""
        y = self.labels.labels[:, days].T.reshape(-1, 1)
        ok = self.labels.valid[:, days].T.reshape(-1, 1)
        return y, ok


@dataclass
class ForwardTrace:
    encoder: EncoderTrace | None = None
    temporal: list = field(default_factory=list)


def forward_logits(tape: Tape, P: dict[str, Node], data: PreparedData, days: list[int],
                   trace: ForwardTrace | None = None) -> Node:
    """Head pre-activation for every (day, stock) in ``days``, day-major (B x 1)."""
    cfg = data.cfg
    batch, row_of_day = data.batch_for(days)
    if cfg.kind == "mlp":
        rows = np.concatenate([np.arange(data.n_stocks) + row_of_day[t] * data.n_stocks
                               for t in days])
        x = tape.constant(batch.stock_x[rows])
        z = ad.tanh(ad.add(ad.matmul(x, P["mlp.W"]), P["mlp.b"]))
    else:
        etrace = trace.encoder if trace is not None else None
        E = encode_batch(tape, P, batch, cfg.encoder_options(), etrace)
        if cfg.temporal:
            index = window_index(days, data.n_stocks, cfg.window, row_of_day)
            z = temporal_attend_last(tape, P, E, index, cfg.temporal_heads,
                                     trace.temporal if trace is not None else None)
        else:
            rows = np.concatenate([np.arange(data.n_stocks) + row_of_day[t] * data.n_stocks
                                   for t in days])
            z = ad.gather_rows(E, rows)
    return ad.add(ad.matmul(z, P["head.W1"]), P["head.b1"])


def predict(z: Node, W1: Node, b1: Node) -> Node:
    """Probability of a positive excess return: ``sigmoid(z W1 + b1)``."""
    return ad.sigmoid(ad.add(ad.matmul(z, W1), b1))


def loss(logits: Node, labels: np.ndarray, valid: np.ndarray, kind: str = "bce") -> Node:
    """Mean per-sample loss over valid entries.

    ``logits`` are the head pre-activations, so ``bce`` equals binary
    cross-entropy of ``sigmoid(logits)`` against ``1[y > 0]``. ``mse`` compares
    ``sigmoid(logits)`` with ``sigmoid(y / 0.01)``.
    """
    labels = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    w = np.asarray(valid, dtype=np.float64).reshape(logits.shape)
    n = w.sum()
    if n == 0:
        raise ValueError("loss over an empty set of valid samples")
    if kind == "bce":
        target = (labels > 0).astype(np.float64)
        per = ad.sub(ad.softplus(logits), ad.mul_const(logits, target))
    elif kind == "mse":
        target = 1.0 / (1.0 + np.exp(-labels / MSE_TAU))
        per = ad.square(ad.add_const(ad.sigmoid(logits), -target))
    else:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    return ad.scale(ad.sum_all(ad.mul_const(per, w)), 1.0 / n)


def score(params: ParamStore, data: PreparedData, days: list[int], chunk: int = 8) -> np.ndarray:
    """Head logits as an (n_days x n_S) array.

    Logits rank stocks exactly as the probabilities do but never tie through
    sigmoid saturation, so they are what the backtest consumes. Days are
    scored ``chunk`` at a time to bound memory; each row depends only on its own
    window, so chunking changes nothing beyond floating-point rounding.
    """
    days = list(days)
    out = np.empty((len(days), data.n_stocks))
    for lo in range(0, len(days), chunk):
        part = days[lo:lo + chunk]
        tape = Tape()
        logits = forward_logits(tape, params.bind(tape), data, part)
        out[lo:lo + len(part)] = logits.value.reshape(len(part), data.n_stocks)
        tape.release()
    return out
