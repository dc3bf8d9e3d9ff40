"""Optimisation loop, early stopping, rolling retrain schedule and checkpoints."""
from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, backward
from .metrics import mean_ic
from .model import LOSS_KINDS, PreparedData, forward_logits, loss, score
from .params import ParamStore

log = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


class LeakageError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    patience: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "bce"
    batch_days: int = 16  # days per optimiser step; 0 means full batch
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.patience < 1 or self.batch_days < 0:
            raise ValueError("epochs must be >= 0 and patience >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")


class Adam:
    def __init__(self, params: ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name in params.names():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    params: ParamStore
    best_epoch: int
    best_val_ic: float
    curve: list[dict] = field(default_factory=list)
    diverged: bool = False


def train_step(params: ParamStore, data: PreparedData, days: list[int], kind: str):
    tape = Tape()
    nodes = params.bind(tape)
    logits = forward_logits(tape, nodes, data, days)
    y, ok = data.targets(days)
    L = loss(logits, y, ok, kind)
    backward(tape, L)
    grads = {k: n.grad for k, n in nodes.items()}
    tape.release()
    return L.item(), grads


def validation_ic(params: ParamStore, data: PreparedData, days: list[int]) -> float:
    pred = score(params, data, days)
    y = data.labels.labels[:, days].T
    ok = data.labels.valid[:, days].T
    return mean_ic(pred, y, ok)


def minibatches(days: list[int], size: int, rng: np.random.Generator) -> list[list[int]]:
    """Contiguous blocks of ``size`` days visited in a shuffled order.

    Blocks stay contiguous so their look-back windows overlap, which keeps the
    stacked graph per step small and lets it be cached across epochs.
    """
    days = sorted(days)
    if size <= 0 or size >= len(days):
        return [days]
    blocks = [days[lo:lo + size] for lo in range(0, len(days), size)]
    return [blocks[i] for i in rng.permutation(len(blocks))]


def train(data: PreparedData, train_days: list[int], val_days: list[int], cfg: TrainConfig,
          params: ParamStore) -> TrainResult:
    """Adam on the mean training loss, early-stopped on validation rank IC.

    Each epoch visits the training days once, in contiguous blocks of
    ``cfg.batch_days`` days whose order is shuffled by a seeded stream. The reported epoch loss
    is the sample-weighted mean over the epoch's batches.

    Returns the parameters of the best validation epoch (the initial ones when
    no epoch improves on them). ``params`` is not modified.
    """
    if len(train_days) < 1:
        raise ScheduleError("no training days")
    if val_days and min(val_days) <= max(train_days):
        raise LeakageError("validation days must follow training days")
    params = params.copy()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    best = params.copy()
    best_ic = validation_ic(params, data, val_days) if val_days else -np.inf
    if not np.isfinite(best_ic):
        best_ic = -np.inf
    best_epoch, since = 0, 0
    curve = []
    diverged = False
    rng = np.random.default_rng([cfg.seed, zlib.crc32(b"shuffle")])
    for epoch in range(1, cfg.epochs + 1):
        total, weight = 0.0, 0
        for days in minibatches(list(train_days), cfg.batch_days, rng):
            value, grads = train_step(params, data, days, cfg.loss)
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                diverged = True
                break
            opt.step(params, grads)
            n = int(data.targets(days)[1].sum())
            total, weight = total + value * n, weight + n
        if diverged:
            log.warning("non-finite loss at epoch %d; keeping last good parameters", epoch)
            break
        value = total / weight
        val_ic = validation_ic(params, data, val_days) if val_days else float("nan")
        curve.append({"epoch": epoch, "loss": value, "val_ic": val_ic})
        if val_days:
            if np.isfinite(val_ic) and val_ic > best_ic:
                best, best_ic, best_epoch, since = params.copy(), val_ic, epoch, 0
            else:
                since += 1
                if since >= cfg.patience:
                    break
        else:
            best, best_epoch = params.copy(), epoch
    return TrainResult(best, best_epoch, float(best_ic), curve, diverged)


# ---------------------------------------------------------------------------
# rolling retrain schedule


@dataclass(frozen=True)
class Fold:
    train: tuple[int, int]  # half-open day ranges
    val: tuple[int, int]
    test: tuple[int, int]

    def days(self, which: str) -> list[int]:
        lo, hi = getattr(self, which)
        return list(range(lo, hi))


def rolling_schedule(T: int, train_len: int, val_len: int, test_len: int,
                     partial_last: bool = False) -> list[Fold]:
    """Walk-forward folds stepping by ``test_len``.

    Each fold trains on ``train_len`` days, validates on the next ``val_len``
    and tests on the ``test_len`` after that. With ``partial_last`` a final
    fold whose test period runs past ``T`` is kept, truncated at ``T``.
    """
    if min(train_len, test_len) < 1 or val_len < 0:
        raise ScheduleError("train and test lengths must be >= 1, validation >= 0")
    span = train_len + val_len
    if T < span + (1 if partial_last else test_len):
        raise ScheduleError(f"T={T} too small for {train_len}/{val_len}/{test_len}")
    folds = []
    start = 0
    while True:
        t0 = start + span
        t1 = t0 + test_len
        if t1 > T:
            if partial_last and t0 < T:
                t1 = T
            else:
                break
        folds.append(Fold((start, start + train_len), (start + train_len, t0), (t0, t1)))
        if t1 == T:
            break
        start += test_len
    return folds


def check_no_leakage(fold: Fold) -> None:
    if fold.test[0] < fold.train[1] or fold.test[0] < fold.val[1]:
        raise LeakageError(f"test range {fold.test} starts before training data ends")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ParamStore, config: dict, epoch: int, val_ic: float) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params.save(path.with_suffix(".mdgp"))
    meta = {"config": config, "epoch": epoch,
            "val_ic": val_ic if np.isfinite(val_ic) else None}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    path = Path(path)
    return ParamStore.load(path.with_suffix(".mdgp")), json.loads(path.with_suffix(".json").read_text())


def config_dict(cfg) -> dict:
    return asdict(cfg)
