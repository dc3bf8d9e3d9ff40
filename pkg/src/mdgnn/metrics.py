"""Cross-sectional backtest metrics: rank IC, top-K portfolio, CR, IR, Precision@K."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)


class UndefinedMetric(ValueError):
    pass


@dataclass
class DayScores:
    day: int
    pred: np.ndarray
    realized: np.ndarray
    valid: np.ndarray | None = None

    def clean(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Valid predictions, realised returns and their original stock indices."""
        ok = np.ones(len(self.pred), bool) if self.valid is None else np.asarray(self.valid, bool)
        idx = np.flatnonzero(ok)
        return np.asarray(self.pred, float)[idx], np.asarray(self.realized, float)[idx], idx


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0.0:
        raise UndefinedMetric("correlation undefined for a constant vector")
    return float(a @ b) / den


def daily_ic(s: DayScores) -> float:
    """Spearman correlation (Pearson on average ranks) over valid stocks."""
    pred, real, _ = s.clean()
    if len(pred) < 2:
        raise UndefinedMetric(f"day {s.day}: fewer than two valid stocks")
    return _pearson(rankdata(pred), rankdata(real))


def top_k(s: DayScores, k: int) -> np.ndarray:
    """Stock indices of the ``k`` highest predictions; ties go to the lower index."""
    pred, _, idx = s.clean()
    if k < 1 or len(pred) < k:
        raise UndefinedMetric(f"day {s.day}: {len(pred)} valid stocks, need {k}")
    order = np.lexsort((idx, -pred))
    return idx[order[:k]]


def topk_portfolio(s: DayScores, k: int) -> tuple[np.ndarray, float]:
    members = top_k(s, k)
    # sum in index order so the all-stocks portfolio is exactly the cross-sectional mean
    return members, float(np.mean(np.asarray(s.realized, float)[np.sort(members)]))


def precision_at_k(s: DayScores, k: int) -> float:
    members = top_k(s, k)
    return float(np.mean(np.asarray(s.realized, float)[members] > 0))


def cumulative_return(returns) -> float:
    """Compounded return ``prod(1 + r) - 1``."""
    r = np.asarray(returns, dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite daily return")
    return float(np.prod(1.0 + r) - 1.0)


def information_ratio(returns) -> float:
    """Mean over sample standard deviation of daily portfolio excess returns."""
    r = np.asarray(returns, dtype=float)
    if len(r) < 2:
        raise UndefinedMetric("information ratio needs at least two days")
    sd = float(np.std(r, ddof=1))
    if sd == 0.0:
        raise UndefinedMetric("zero tracking error")
    return float(np.mean(r)) / sd


@dataclass
class BacktestReport:
    k: int
    days: list[int] = field(default_factory=list)
    ic: list[float | None] = field(default_factory=list)
    port_return: list[float | None] = field(default_factory=list)
    precision: list[float | None] = field(default_factory=list)
    members: list[list[int]] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def add_day(self, s: DayScores) -> None:
        self.days.append(s.day)
        try:
            self.ic.append(daily_ic(s))
        except UndefinedMetric as exc:
            log.info("IC skipped: %s", exc)
            self.ic.append(None)
            self.skipped.append({"day": s.day, "metric": "ic", "reason": str(exc)})
        try:
            members, ret = topk_portfolio(s, self.k)
            self.members.append(members.tolist())
            self.port_return.append(ret)
            self.precision.append(precision_at_k(s, self.k))
        except UndefinedMetric as exc:
            log.info("portfolio skipped: %s", exc)
            self.members.append([])
            self.port_return.append(None)
            self.precision.append(None)
            self.skipped.append({"day": s.day, "metric": "portfolio", "reason": str(exc)})

    def aggregates(self) -> dict:
        ics = [x for x in self.ic if x is not None]
        rets = [x for x in self.port_return if x is not None]
        precs = [x for x in self.precision if x is not None]
        try:
            ir = information_ratio(rets)
        except UndefinedMetric:
            ir = None
        return {
            "IC": float(np.mean(ics)) if ics else None,
            "IR": ir,
            "CR": cumulative_return(rets) if rets else None,
            f"Prec@{self.k}": float(np.mean(precs)) if precs else None,
            "n_days": len(self.days),
            "n_skipped": len(self.skipped),
        }

    def rows(self) -> list[dict]:
        return [{"day": d, "ic": ic, "port_return": r, "precision": p, "top_k": m}
                for d, ic, r, p, m in zip(self.days, self.ic, self.port_return,
                                          self.precision, self.members)]


def evaluate_days(pred: np.ndarray, realized: np.ndarray, valid: np.ndarray,
                  days: list[int], k: int, report: BacktestReport | None = None) -> BacktestReport:
    """Add one row per day; arrays are (n_days x n_S)."""
    report = report or BacktestReport(k)
    for r, d in enumerate(days):
        report.add_day(DayScores(d, pred[r], realized[r], valid[r]))
    return report


def mean_ic(pred: np.ndarray, realized: np.ndarray, valid: np.ndarray) -> float:
    vals = []
    for r in range(pred.shape[0]):
        try:
            vals.append(daily_ic(DayScores(r, pred[r], realized[r], valid[r])))
        except UndefinedMetric:
            pass
    return float(np.mean(vals)) if vals else float("nan")
