"""Seeded synthetic market with planted relational structure.

Daily stock returns follow a linear factor model::

    r[i,t] = scale * (industry_beta * F[ind(i), t]
                      + bank_beta * mean(G[b, t] for banks b holding i on day t)
                      + owner_beta * O[grp(i), t])
             + noise_sigma * eps[i,t]

Industry factors ``F`` are AR(1) and correlated within sectors (sectors become
II edges), bank flows ``G`` are persistent AR(1) processes and owner-group
factors ``O`` drive the static SS co-ownership edges. Because each factor is
autocorrelated, today's returns of a stock's relational neighbours predict its
excess return tomorrow. Bank holdings churn daily, so SB edges change over time.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .graph import DynamicGraph, EdgeRecord, GraphSnapshot


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MarketConfig:
    n_stocks: int = 10
    n_banks: int = 4
    n_industries: int = 3
    days: int = 40
    d_in: int = 42
    d_e: int = 4
    industry_beta: float = 0.6
    bank_beta: float = 0.6
    owner_beta: float = 0.3
    noise_sigma: float = 0.01
    holdings_churn: float = 0.05
    seed: int = 0
    window: int = 10
    factor_scale: float = 0.01
    industry_persistence: float = -0.5
    bank_persistence: float = 0.9
    owner_persistence: float = 0.6
    holding_prob: float = 0.3
    owner_group_size: int = 3
    n_sectors: int = 0          # 0: about one sector per three industries
    sector_share: float = 0.3   # variance share of the sector factor in F
    signal_dims: int = 4
    feature_noise: float = 1.0

    def check(self) -> None:
        for name in ("n_stocks", "n_banks", "n_industries", "d_in", "d_e", "owner_group_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.days < self.window + 2:
            raise ConfigError(f"days={self.days} must be >= window+2={self.window + 2}")
        for name in ("industry_beta", "bank_beta", "owner_beta", "noise_sigma", "factor_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("holdings_churn", "holding_prob", "sector_share"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name in ("industry_persistence", "bank_persistence", "owner_persistence"):
            if not -1.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (-1, 1)")
        if not 0 <= self.signal_dims <= self.d_in:
            raise ConfigError("signal_dims must lie in [0, d_in]")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    # node counts from the CSI100 column of the dataset statistics table
    "csi100-like": MarketConfig(n_stocks=100, n_banks=196, n_industries=97, days=260,
                                holding_prob=0.05),
    "toy": MarketConfig(n_stocks=10, n_banks=4, n_industries=3, days=40),
    "planted": MarketConfig(n_stocks=40, n_banks=8, n_industries=6, days=150,
                            holding_prob=0.2, owner_group_size=4),
}


def preset(name: str, **overrides) -> MarketConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


def _ar1(rng, phi: float, shape, days: int, shocks=None) -> np.ndarray:
    """Stationary unit-variance AR(1) paths, time on the last axis."""
    if shocks is None:
        shocks = rng.standard_normal(shape + (days,))
    out = np.empty(shape + (days,))
    out[..., 0] = shocks[..., 0]
    k = np.sqrt(1.0 - phi * phi)
    for t in range(1, days):
        out[..., t] = phi * out[..., t - 1] + k * shocks[..., t]
    return out


@dataclass
class MarketState:
    """Latent quantities behind a generated graph, for diagnostics and tests."""
    returns: np.ndarray      # n_S x T, return realised on day t (t=0 is 0)
    industry: np.ndarray     # length n_S
    owner_group: np.ndarray  # length n_S
    sector: np.ndarray       # length n_I
    holdings: np.ndarray     # T x n_B x n_S bool
    industry_factor: np.ndarray
    bank_flow: np.ndarray
    owner_factor: np.ndarray


def simulate(cfg: MarketConfig) -> tuple[DynamicGraph, MarketState]:
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    n_s, n_b, n_i, T = cfg.n_stocks, cfg.n_banks, cfg.n_industries, cfg.days

    # static structure
    industry = np.arange(n_s) % n_i
    rng.shuffle(industry)
    n_sec = cfg.n_sectors or max(1, round(n_i / 3))
    sector = np.arange(n_i) % n_sec
    rng.shuffle(sector)
    owner_group = np.arange(n_s) // cfg.owner_group_size
    rng.shuffle(owner_group)

    # latent factors
    sec_path = _ar1(rng, cfg.industry_persistence, (n_sec,), T)
    own_path = _ar1(rng, cfg.industry_persistence, (n_i,), T)
    c = np.sqrt(cfg.sector_share)
    F = c * sec_path[sector] + np.sqrt(1 - cfg.sector_share) * own_path
    G = _ar1(rng, cfg.bank_persistence, (n_b,), T)
    n_groups = int(owner_group.max()) + 1
    O = _ar1(rng, cfg.owner_persistence, (n_groups,), T)

    # holdings with stationary density holding_prob
    holdings = np.zeros((T, n_b, n_s), dtype=bool)
    holdings[0] = rng.random((n_b, n_s)) < cfg.holding_prob
    p = cfg.holding_prob
    on_rate = cfg.holdings_churn * p / (1 - p) if p < 1 else 0.0
    for t in range(1, T):
        u = rng.random((n_b, n_s))
        prev = holdings[t - 1]
        holdings[t] = np.where(prev, u >= cfg.holdings_churn, u < on_rate)

    n_held = holdings.sum(axis=1)  # T x n_S
    flow = np.einsum("tbs,bt->st", holdings, G) / np.maximum(n_held.T, 1)

    eps = rng.standard_normal((n_s, T))
    returns = cfg.factor_scale * (cfg.industry_beta * F[industry]
                                  + cfg.bank_beta * flow
                                  + cfg.owner_beta * O[owner_group]) + cfg.noise_sigma * eps
    returns[:, 0] = 0.0
    returns = np.maximum(returns, -0.9 + 1e-6)
    prices = 100.0 * np.cumprod(1.0 + returns, axis=1)
    nxt = prices[:, 1:] / prices[:, :-1] - 1.0
    benchmark = np.r_[nxt.mean(axis=0), 0.0]

    # static edge features
    d_e = cfg.d_e
    ss_pairs = [(i, j) for i in range(n_s) for j in range(i + 1, n_s)
                if owner_group[i] == owner_group[j]]
    ss_feat = {pr: rng.uniform(0, 1, d_e) for pr in ss_pairs}
    si_feat = rng.uniform(0, 1, (n_s, d_e))
    ii_pairs = [(a, b) for a in range(n_i) for b in range(a + 1, n_i) if sector[a] == sector[b]]
    ii_feat = {pr: rng.uniform(0, 1, d_e) for pr in ii_pairs}
    sb_size = rng.uniform(0, 1, (n_b, n_s))

    sd = cfg.signal_dims
    ret_std = returns[:, 1:] / max(cfg.factor_scale, 1e-12)
    snapshots = []
    tenure = np.zeros((n_b, n_s))
    for t in range(T):
        tenure = np.where(holdings[t], tenure + 1, 0)
        xs = rng.standard_normal((n_s, cfg.d_in))
        xb = rng.standard_normal((n_b, cfg.d_in))
        xi = rng.standard_normal((n_i, cfg.d_in))
        if sd and t > 0:
            xs[:, :sd] = ret_std[:, t - 1, None] + cfg.feature_noise * xs[:, :sd]
        if sd:
            xb[:, :sd] = G[:, t, None] + cfg.feature_noise * xb[:, :sd]
            xi[:, :sd] = F[:, t, None] + cfg.feature_noise * xi[:, :sd]
        edges = [EdgeRecord.make("SS", i, j, ss_feat[(i, j)]) for i, j in ss_pairs]
        for i, b in zip(*np.nonzero(holdings[t].T)):
            noise = rng.uniform(0, 1, d_e)
            noise[0] = sb_size[b, i]
            if d_e > 1:
                noise[1] = min(tenure[b, i], 20) / 20.0
            edges.append(EdgeRecord.make("SB", i, b, noise))
        edges += [EdgeRecord.make("SI", i, industry[i], si_feat[i]) for i in range(n_s)]
        edges += [EdgeRecord.make("II", a, b, ii_feat[(a, b)]) for a, b in ii_pairs]
        snapshots.append(GraphSnapshot(t, xs, xb, xi, edges))

    g = DynamicGraph(snapshots, prices, benchmark)
    state = MarketState(returns, industry, owner_group, sector, holdings, F, G, O)
    return g, state


def generate(cfg: MarketConfig) -> DynamicGraph:
    return simulate(cfg)[0]
