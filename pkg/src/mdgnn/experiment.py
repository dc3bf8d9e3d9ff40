"""Config-driven experiments: rolling backtests, ablation tables and sweeps."""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import graph as gm
from .autodiff import Tape
from .encoder import PATH_IDS, new_trace
from .graph import RELATIONS, DynamicGraph
from .metrics import BacktestReport, evaluate_days
from .model import ForwardTrace, ModelConfig, PreparedData, forward_logits, init_params, score
from .synthetic import ConfigError, preset, simulate
from .train import (Fold, LeakageError, TrainConfig, check_no_leakage, rolling_schedule,
                    save_checkpoint, train)

log = logging.getLogger(__name__)

COMPONENT_VARIANTS = {
    "full": {},
    "w/o edge": {"no_edge_features": True},
    "w/o meta-path": {"no_meta_path": True},
    "w/o aggregation": {"no_hier_fusion": True},
    "w/o temporal": {"no_temporal": True},
}

RELATION_SUBSETS = [
    ("SS",),
    ("SS", "SB"),
    ("SS", "SI"),
    ("SS", "SI", "II"),
    ("SS", "SB", "SI"),
    ("SS", "SB", "SI", "II"),
]

SWEEPS = {"window": (2, 5, 10, 15, 20), "layers": (1, 2, 3, 4)}


@dataclass
class DataSpec:
    path: str | None = None       # dataset directory; when unset the preset is generated
    preset: str = "csi100-like"
    overrides: dict = field(default_factory=dict)


@dataclass
class ModelSpec:
    d_h: int = 128
    layers: int = 2
    heads: int = 2
    temporal_heads: int = 4
    window: int = 10
    slope: float = 0.2
    kind: str = "mdgnn"


@dataclass
class ScheduleSpec:
    train: int = 120
    val: int = 20
    test: int = 60
    partial_last: bool = False


@dataclass
class Ablation:
    no_edge_features: bool = False
    no_meta_path: bool = False
    no_hier_fusion: bool = False
    no_temporal: bool = False
    relations: list = field(default_factory=lambda: list(RELATIONS))


@dataclass
class ExperimentConfig:
    seed: int = 0
    k: int = 30
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    ablation: Ablation = field(default_factory=Ablation)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {"data": DataSpec, "model": ModelSpec, "train": TrainConfig,
             "schedule": ScheduleSpec, "ablation": Ablation}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    parts = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            parts[name] = _build(cls, raw.pop(name), name)
    cfg = _build(ExperimentConfig, raw, "config")
    cfg = replace(cfg, **parts)
    check_config(cfg)
    return cfg


def check_config(cfg: ExperimentConfig) -> None:
    if cfg.k < 1:
        raise ConfigError("k must be >= 1")
    if set(cfg.ablation.relations) - set(RELATIONS) or "SS" not in cfg.ablation.relations:
        raise ConfigError(f"relations must include SS and be drawn from {RELATIONS}")
    if min(cfg.schedule.train, cfg.schedule.test) < 1 or cfg.schedule.val < 0:
        raise ConfigError("schedule lengths must be positive")
    try:
        model_config(cfg, 1, 1)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, sets: list[str]) -> dict:
    """Apply ``key.sub=value`` strings; values are parsed as JSON when possible."""
    raw = copy.deepcopy(raw)
    for item in sets:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        node = raw
        *path, last = key.split(".")
        for part in path:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part} is not a section")
        node[last] = _parse_value(value)
    return raw


def load_config(path=None, sets=(), seed: int | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    raw = apply_overrides(raw, list(sets))
    if seed is not None:
        raw["seed"] = seed
    return config_from_dict(raw)


def with_changes(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Copy of ``cfg`` with ``section={key: value}`` updates applied."""
    parts = {name: replace(getattr(cfg, name), **upd) for name, upd in sections.items()}
    return replace(cfg, **parts)


def model_config(cfg: ExperimentConfig, d_in: int, d_e: int) -> ModelConfig:
    m, a = cfg.model, cfg.ablation
    return ModelConfig(d_in=d_in, d_e=d_e, d_h=m.d_h, layers=m.layers, heads=m.heads,
                       temporal_heads=m.temporal_heads, window=m.window, slope=m.slope,
                       kind=m.kind, edge_features=not a.no_edge_features,
                       meta_paths=not a.no_meta_path, hier_fusion=not a.no_hier_fusion,
                       temporal=not a.no_temporal, relations=tuple(a.relations))


def load_dataset(cfg: ExperimentConfig) -> DynamicGraph:
    if cfg.data.path:
        return gm.load(cfg.data.path)
    try:
        market = preset(cfg.data.preset, **{"seed": cfg.seed, **cfg.data.overrides})
    except TypeError as exc:
        raise ConfigError(f"data.overrides: {exc}") from None
    market.check()
    return simulate(market)[0]


def graph_dims(g: DynamicGraph) -> tuple[int, int]:
    s = g.snapshots[0]
    d_e = next((len(e.features) for snap in g.snapshots for e in snap.edges), 1)
    return s.stock_features.shape[1], d_e


def prepare(cfg: ExperimentConfig, g: DynamicGraph) -> PreparedData:
    return PreparedData(g, model_config(cfg, *graph_dims(g)))


def schedule_for(cfg: ExperimentConfig, n_days: int) -> list[Fold]:
    s = cfg.schedule
    try:
        return rolling_schedule(n_days, s.train, s.val, s.test, s.partial_last)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def run_backtest(cfg: ExperimentConfig, g: DynamicGraph | None = None,
                 checkpoint_dir=None) -> dict:
    """Train on each rolling fold and score its test days out of sample."""
    g = g if g is not None else load_dataset(cfg)
    data = prepare(cfg, g)
    folds = schedule_for(cfg, data.n_label_days)
    report = BacktestReport(cfg.k)
    # the top-level seed drives the shuffle stream as well as data and init
    tcfg = replace(cfg.train, seed=cfg.seed)
    fold_rows = []
    for i, fold in enumerate(folds):
        check_no_leakage(fold)
        train_days, val_days, test_days = fold.days("train"), fold.days("val"), fold.days("test")
        params = init_params(data.cfg, cfg.seed)
        result = train(data, train_days, val_days, tcfg, params)
        if max(train_days + val_days) >= min(test_days):
            raise LeakageError(f"fold {i}: test day {min(test_days)} precedes training data")
        pred = score(result.params, data, test_days)
        y = data.labels.labels[:, test_days].T
        ok = data.labels.valid[:, test_days].T
        evaluate_days(pred, y, ok, test_days, cfg.k, report)
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"fold{i}", result.params, cfg.to_dict(),
                            result.best_epoch, result.best_val_ic)
        fold_rows.append({"fold": i, "train": list(fold.train), "val": list(fold.val),
                          "test": list(fold.test), "best_epoch": result.best_epoch,
                          "val_ic": result.best_val_ic if np.isfinite(result.best_val_ic) else None,
                          "epochs_run": len(result.curve), "diverged": result.diverged})
    return {"config_hash": cfg.hash(), "config": cfg.to_dict(), "folds": fold_rows,
            "rows": report.rows(), "skipped": report.skipped, "aggregates": report.aggregates()}


def write_report(report: dict, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    with open(out / "daily.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "ic", "port_return", "precision"])
        for r in report["rows"]:
            w.writerow([r["day"], _cell(r["ic"]), _cell(r["port_return"]), _cell(r["precision"])])


def _cell(x):
    return "" if x is None else repr(float(x))


# ---------------------------------------------------------------------------
# ablations and sweeps


def _seed_stats(reports: list[dict]) -> dict:
    out = {}
    keys = [k for k in reports[0]["aggregates"] if k not in ("n_days", "n_skipped")]
    for key in keys:
        vals = np.array([r["aggregates"][key] for r in reports
                         if r["aggregates"][key] is not None], dtype=float)
        out[key] = float(vals.mean()) if len(vals) else None
        out[key + "_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else None
    out["per_seed_IC"] = [r["aggregates"]["IC"] for r in reports]
    return out


def run_seeds(cfg: ExperimentConfig, seeds, cache: dict | None = None) -> list[dict]:
    reports = []
    for seed in seeds:
        c = replace(cfg, seed=seed)
        key = c.hash()
        if cache is not None and key in cache:
            reports.append(cache[key])
            continue
        rep = run_backtest(c)
        if cache is not None:
            cache[key] = rep
        reports.append(rep)
    return reports


def ablation_variants(cfg: ExperimentConfig) -> list[tuple[str, str, ExperimentConfig]]:
    """(table, label, config) for the component and relation ablations."""
    out = []
    base = with_changes(cfg, ablation=asdict(Ablation()))
    for label, switches in COMPONENT_VARIANTS.items():
        out.append(("components", label, with_changes(base, ablation=switches)))
    for rels in RELATION_SUBSETS:
        out.append(("relations", "+".join(rels), with_changes(base, ablation={"relations": list(rels)})))
    return out


def run_ablation(cfg: ExperimentConfig, seeds) -> list[dict]:
    cache: dict = {}
    rows = []
    for table, label, c in ablation_variants(cfg):
        stats = _seed_stats(run_seeds(c, seeds, cache))
        rows.append({"table": table, "variant": label, "config_hash": c.hash(), **stats})
    return rows


def run_sweep(cfg: ExperimentConfig, axis: str, seeds, values=None) -> list[dict]:
    if axis not in SWEEPS:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEPS)}")
    rows = []
    for v in values or SWEEPS[axis]:
        c = with_changes(cfg, model={axis: v})
        stats = _seed_stats(run_seeds(c, seeds))
        rows.append({"axis": axis, "value": v, "config_hash": c.hash(), **stats})
    return rows


_METRIC_COLS = ("IC", "IR", "CR")


def rows_to_csv(rows: list[dict], lead: tuple[str, ...]) -> str:
    buf = io.StringIO()
    prec = next(k for k in rows[0] if k.startswith("Prec@") and not k.endswith("_std"))
    cols = list(lead) + [c for m in (*_METRIC_COLS, prec) for c in (m, m + "_std")] + ["config_hash"]
    w = csv.writer(buf)
    w.writerow(cols)
    for r in rows:
        w.writerow([_cell(r[c]) if isinstance(r[c], float) or r[c] is None else r[c] for c in cols])
    return buf.getvalue()


def rows_to_markdown(rows: list[dict], table: str) -> str:
    sel = [r for r in rows if r["table"] == table]
    prec = next(k for k in sel[0] if k.startswith("Prec@") and not k.endswith("_std"))
    head = ["variant", *_METRIC_COLS, prec]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in sel:
        cells = [r["variant"]]
        for m in (*_METRIC_COLS, prec):
            v, sd = r[m], r[m + "_std"]
            cells.append("n/a" if v is None else f"{v:.4f}" + ("" if sd is None else f" ({sd:.4f})"))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# fusion weights export


def fusion_weights(params, data: PreparedData, days: list[int]) -> list[dict]:
    """Per (day, stock, layer) relation-fusion weights for the requested days."""
    if data.cfg.kind != "mdgnn" or not data.cfg.meta_paths:
        raise ConfigError("fusion weights need the typed meta-path encoder")
    rows = []
    for t in days:
        tape = Tape()
        trace = ForwardTrace(encoder=new_trace())
        forward_logits(tape, params.bind(tape), data, [t], trace)
        _, row_of_day = data.batch_for([t])
        base = row_of_day[t] * data.n_stocks
        for layer, w in enumerate(trace.encoder.fusion):
            for v in range(data.n_stocks):
                rows.append({"day": t, "stock": v, "layer": layer + 1,
                             **{f"w_{p.lower()}": float(w[base + v, m]) for m, p in enumerate(PATH_IDS)}})
        tape.release()
    return rows


def fusion_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    cols = ["day", "stock", "layer"] + [f"w_{p.lower()}" for p in PATH_IDS]
    w.writerow(cols)
    for r in rows:
        w.writerow([r["day"], r["stock"], r["layer"]] + [repr(r[c]) for c in cols[3:]])
    return buf.getvalue()
