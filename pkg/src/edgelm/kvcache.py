"""Budgeted per-layer KV store and eviction policies.

Policies: attention-sink (positional), heavy-hitter (accumulated attention
mass), observation-window (pooled attention of the last W queries), a
weighted hybrid over all four signal types, and a random control.

Score state lives with the cache: an accumulated-mass vector and a ring
buffer of recent head-averaged attention rows, both maintained by
``append``/``append_block`` and pruned on eviction.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ConfigError


# --- policies ----------------------------------------------------------------

@dataclass(frozen=True)
class AttentionSink:
    sinks: int = 4
    window: int = 4

    def floor(self) -> int:
        return self.sinks + self.window


@dataclass(frozen=True)
class HeavyHitter:
    recent: int = 1

    def floor(self) -> int:
        return self.recent


@dataclass(frozen=True)
class ObsWindow:
    obs: int = 16
    pool_kernel: int = 5

    def __post_init__(self):
        if self.pool_kernel % 2 == 0 or self.pool_kernel < 1:
            raise ConfigError("pool_kernel must be odd and positive")

    def floor(self) -> int:
        return self.obs


@dataclass(frozen=True)
class Hybrid:
    lambda_sink: float = 0.25
    lambda_recent: float = 0.25
    lambda_acc: float = 0.25
    lambda_win: float = 0.25
    sinks: int = 4
    obs: int = 16
    pool_kernel: int = 5

    def __post_init__(self):
        lams = (self.lambda_sink, self.lambda_recent, self.lambda_acc, self.lambda_win)
        if any(l < 0 for l in lams):
            raise ConfigError("hybrid weights must be nonnegative")
        if sum(lams) == 0:
            raise ConfigError("hybrid weights must not all be zero")
        if self.pool_kernel % 2 == 0 or self.pool_kernel < 1:
            raise ConfigError("pool_kernel must be odd and positive")

    def floor(self) -> int:
        # observation window stays resident whenever it contributes a score
        return self.obs if self.lambda_win > 0 else 1


@dataclass(frozen=True)
class RandomPolicy:
    seed: int = 0

    def floor(self) -> int:
        return 1


EvictionPolicy = Union[AttentionSink, HeavyHitter, ObsWindow, Hybrid, RandomPolicy]


@dataclass
class LayerReport:
    kept_indices: list[int]
    evicted_count: int
    budget: int

    @property
    def eviction_ratio(self) -> float:
        total = len(self.kept_indices) + self.evicted_count
        return self.evicted_count / total


@dataclass
class EvictionReport:
    layers: list[LayerReport]


# --- cache -------------------------------------------------------------------

class _LayerStore:
    def __init__(self, n_kv_heads: int, head_dim: int, window: int):
        self.keys = np.zeros((0, n_kv_heads, head_dim))
        self.values = np.zeros((0, n_kv_heads, head_dim))
        self.positions = np.zeros(0, dtype=np.int64)
        self.acc = np.zeros(0)                       # accumulated attention mass
        self.rows: deque[np.ndarray] = deque(maxlen=window)

    @property
    def kept(self) -> int:
        return self.positions.size


class KvCache:
    def __init__(self, n_layers: int, n_kv_heads: int, head_dim: int, window: int = 32):
        self.n_layers = n_layers
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self.window = window
        self.layers = [_LayerStore(n_kv_heads, head_dim, window) for _ in range(n_layers)]

    @classmethod
    def for_model(cls, config, window: int = 32) -> "KvCache":
        return cls(config.n_layers, config.n_kv_heads, config.head_dim, window)

    def next_position(self) -> int:
        mx = -1
        for ls in self.layers:
            if ls.positions.size:
                mx = max(mx, int(ls.positions[-1]))
        return mx + 1

    def layer_kv(self, layer: int):
        ls = self.layers[layer]
        return ls.keys, ls.values, ls.positions

    def kept(self, layer: int) -> int:
        return self.layers[layer].kept

    def kept_positions(self, layer: int) -> np.ndarray:
        return self.layers[layer].positions.copy()

    def append(self, layer: int, k, v, position: int, attn_row=None):
        """Append one entry; if an attention row is given, update score state."""
        ls = self.layers[layer]
        if ls.positions.size and position <= ls.positions[-1]:
            raise ValueError(f"position {position} not beyond cached max "
                             f"{int(ls.positions[-1])}")
        if attn_row is not None:
            attn_row = np.asarray(attn_row, dtype=np.float64)
            if attn_row.size != ls.kept + 1:
                raise ValueError(f"attn_row length {attn_row.size} != kept+1 "
                                 f"({ls.kept + 1})")
        k = np.asarray(k, dtype=np.float64).reshape(1, self.n_kv_heads, self.head_dim)
        v = np.asarray(v, dtype=np.float64).reshape(1, self.n_kv_heads, self.head_dim)
        ls.keys = np.concatenate([ls.keys, k], axis=0)
        ls.values = np.concatenate([ls.values, v], axis=0)
        ls.positions = np.append(ls.positions, np.int64(position))
        ls.acc = np.append(ls.acc, 0.0)
        if attn_row is not None:
            ls.acc += attn_row
            ls.rows.append(attn_row.copy())

    def append_block(self, layer: int, k, v, positions, attn_rows=None):
        """Vectorized multi-entry append (prefill path)."""
        ls = self.layers[layer]
        positions = np.asarray(positions, dtype=np.int64)
        if ls.positions.size and positions[0] <= ls.positions[-1]:
            raise ValueError("block positions must continue beyond cached max")
        n = positions.size
        base = ls.kept
        ls.keys = np.concatenate([ls.keys, np.asarray(k, dtype=np.float64)], axis=0)
        ls.values = np.concatenate([ls.values, np.asarray(v, dtype=np.float64)], axis=0)
        ls.positions = np.concatenate([ls.positions, positions])
        ls.acc = np.concatenate([ls.acc, np.zeros(n)])
        if attn_rows is not None:
            if len(attn_rows) != n:
                raise ValueError("one attention row per appended entry expected")
            for i, row in enumerate(attn_rows):
                row = np.asarray(row, dtype=np.float64)
                if row.size != base + i + 1:
                    raise ValueError(f"attn_row length {row.size} != kept+1 "
                                     f"({base + i + 1})")
                ls.acc[: row.size] += row
                ls.rows.append(row.copy())

    def truncate(self, drop: int):
        """Drop the newest `drop` entries from every layer (speculative rollback)."""
        if drop <= 0:
            return
        for ls in self.layers:
            keep = ls.kept - drop
            ls.keys = ls.keys[:keep]
            ls.values = ls.values[:keep]
            ls.positions = ls.positions[:keep]
            ls.acc = ls.acc[:keep]
            rows = [r for r in ls.rows if r.size <= keep]
            ls.rows = deque(rows, maxlen=self.window)

    def total_kept(self) -> int:
        return sum(ls.kept for ls in self.layers)


def cache_bytes(cache: KvCache, bytes_per_element: int) -> int:
    """K + V storage: kept * n_kv_heads * head_dim * 2 * bytes, summed over layers."""
    if bytes_per_element <= 0:
        raise ValueError("bytes_per_element must be positive")
    per_entry = cache.n_kv_heads * cache.head_dim * 2 * bytes_per_element
    return cache.total_kept() * per_entry


# --- scoring -----------------------------------------------------------------

def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def score_hybrid(sink_ind, recency, acc, win, weights: Hybrid) -> np.ndarray:
    """Weighted sum of min-max normalized components (constant components -> 0)."""
    comps = [np.asarray(c, dtype=np.float64) for c in (sink_ind, recency, acc, win)]
    n = comps[0].size
    if any(c.size != n for c in comps):
        raise ValueError("component vectors must have equal length")
    lams = (weights.lambda_sink, weights.lambda_recent,
            weights.lambda_acc, weights.lambda_win)
    if sum(lams) == 0:
        raise ConfigError("hybrid weights must not all be zero")
    out = np.zeros(n)
    for lam, c in zip(lams, comps):
        if lam > 0:
            out += lam * _minmax(c)
    return out


def _pooled_window_score(ls: _LayerStore, obs: int, kernel: int) -> np.ndarray:
    """Mean attention over the last `obs` rows, then 1-D mean pooling."""
    n = ls.kept
    rows = list(ls.rows)[-obs:]
    m = np.zeros(n)
    if rows:
        for row in rows:
            sz = min(row.size, n)
            m[:sz] += row[:sz]
        m /= len(rows)
    if kernel <= 1:
        return m
    h = kernel // 2
    pooled = np.empty(n)
    for j in range(n):
        lo, hi = max(0, j - h), min(n, j + h + 1)
        pooled[j] = m[lo:hi].mean()
    return pooled


def _layer_kept_indices(ls: _LayerStore, policy: EvictionPolicy, budget: int,
                        layer: int) -> np.ndarray:
    n = ls.kept
    if n <= budget:
        return np.arange(n)
    idx = np.arange(n)

    if isinstance(policy, AttentionSink):
        mandatory = set(range(min(policy.sinks, n))) | set(range(n - policy.window, n))
        scores = idx.astype(np.float64)            # fill spare budget by recency
    elif isinstance(policy, HeavyHitter):
        mandatory = set(range(n - policy.recent, n))
        scores = ls.acc.copy()
    elif isinstance(policy, ObsWindow):
        mandatory = set(range(n - policy.obs, n))
        scores = _pooled_window_score(ls, policy.obs, policy.pool_kernel)
    elif isinstance(policy, Hybrid):
        mand_n = policy.obs if policy.lambda_win > 0 else 1
        mandatory = set(range(n - mand_n, n))
        sink_ind = (idx < policy.sinks).astype(np.float64)
        recency = idx.astype(np.float64)
        win = _pooled_window_score(ls, policy.obs, policy.pool_kernel)
        scores = score_hybrid(sink_ind, recency, ls.acc, win, policy)
    elif isinstance(policy, RandomPolicy):
        mandatory = {n - 1}
        rng = np.random.default_rng(
            np.random.SeedSequence([policy.seed & (2**64 - 1), layer, n]))
        scores = rng.random(n)
    else:
        raise ConfigError(f"unknown policy {policy!r}")

    mandatory = {i for i in mandatory if 0 <= i < n}
    free = budget - len(mandatory)
    kept = set(mandatory)
    if free > 0:
        cand = np.array([i for i in idx if i not in mandatory])
        # highest score first; ties toward more recent (larger index)
        order = np.lexsort((-cand, -scores[cand]))
        kept.update(int(c) for c in cand[order[:free]])
    return np.array(sorted(kept), dtype=np.int64)


def evict(cache: KvCache, policy: EvictionPolicy, budget: int) -> EvictionReport:
    """Shrink every layer to at most `budget` entries, per the policy."""
    if budget < 1:
        raise ConfigError("budget must be positive")
    if budget < policy.floor():
        raise ConfigError(
            f"budget {budget} below the policy's mandatory floor {policy.floor()}")
    reports = []
    for li, ls in enumerate(cache.layers):
        n = ls.kept
        kept = _layer_kept_indices(ls, policy, budget, li)
        evicted = n - kept.size
        if evicted > 0:
            ls.keys = ls.keys[kept]
            ls.values = ls.values[kept]
            ls.positions = ls.positions[kept]
            ls.acc = ls.acc[kept]
            new_rows = []
            for row in ls.rows:
                sel = kept[kept < row.size]
                new_rows.append(row[sel])
            ls.rows = deque(new_rows, maxlen=cache.window)
        reports.append(LayerReport(kept_indices=[int(i) for i in kept],
                                   evicted_count=evicted, budget=budget))
    return EvictionReport(layers=reports)


def eviction_ratio(report: EvictionReport) -> float:
    kept = sum(len(l.kept_indices) for l in report.layers)
    evicted = sum(l.evicted_count for l in report.layers)
    if kept + evicted == 0:
        raise ValueError("eviction ratio undefined for an empty cache")
    return evicted / (kept + evicted)


# --- attention trace export / replay ----------------------------------------

def export_trace(path, records):
    """JSON-lines trace: one record per (layer, step) with the attention row."""
    with open(path, "w") as f:
        for layer, step, row in records:
            f.write(json.dumps({"layer": layer, "step": step,
                                "row": [float(x) for x in row]}) + "\n")


def import_trace(path):
    records = []
    with open(path) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                records.append((d["layer"], d["step"], np.asarray(d["row"])))
    return records


def replay_trace(records, n_layers: int, policy: EvictionPolicy, budget: int,
                 window: int = 32) -> EvictionReport:
    """Rebuild score state from a trace (zero K/V) and run one eviction."""
    cache = KvCache(n_layers=n_layers, n_kv_heads=1, head_dim=1, window=window)
    by_layer: dict[int, list] = {l: [] for l in range(n_layers)}
    for layer, step, row in records:
        by_layer[layer].append((step, row))
    for layer, items in by_layer.items():
        for step, row in sorted(items, key=lambda t: t[0]):
            cache.append(layer, np.zeros((1, 1)), np.zeros((1, 1)), step, row)
    return evict(cache, policy, budget)
