"""Deterministic toy decoder-only transformer.

Grouped-query attention, rotary position embeddings, RMS pre-norm, SiLU-gated
MLP, optionally tied embeddings. Weights are stored as float32; all compute
runs in float64 so that blockwise and token-by-token decoding agree to well
inside the 1e-5 contract.

The forward pass can attach to a :class:`~edgelm.kvcache.KvCache`; attention
probability rows (head-averaged per layer) are fed to the cache so eviction
policies can score positions, and are optionally surfaced to the caller.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError


def slot_rng(seed: int, name: str) -> np.random.Generator:
    """Deterministic per-slot PRNG stream keyed by (seed, slot name)."""
    key = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), key]))


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 16
    ffn_mult: int = 4
    rope_theta: float = 10000.0
    tie_embeddings: bool = True
    max_seq: int = 4096

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads",
                     "n_kv_heads", "head_dim", "ffn_mult", "max_seq"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_heads ({self.n_heads}) must be divisible by n_kv_heads ({self.n_kv_heads})")
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model ({self.d_model}) != n_heads * head_dim ({self.n_heads * self.head_dim})")
        if self.rope_theta <= 0:
            raise ConfigError("rope_theta must be positive")

    @property
    def ffn_dim(self) -> int:
        return self.d_model * self.ffn_mult

    def slot_shapes(self) -> dict[str, tuple[int, ...]]:
        d, f = self.d_model, self.ffn_dim
        qd = self.n_heads * self.head_dim
        kd = self.n_kv_heads * self.head_dim
        shapes: dict[str, tuple[int, ...]] = {"token_embed": (self.vocab_size, d)}
        for i in range(self.n_layers):
            p = f"layers.{i}."
            shapes[p + "attn_norm"] = (d,)
            shapes[p + "wq"] = (d, qd)
            shapes[p + "wk"] = (d, kd)
            shapes[p + "wv"] = (d, kd)
            shapes[p + "wo"] = (qd, d)
            shapes[p + "ffn_norm"] = (d,)
            shapes[p + "w_gate"] = (d, f)
            shapes[p + "w_up"] = (d, f)
            shapes[p + "w_down"] = (f, d)
        shapes["final_norm"] = (d,)
        if not self.tie_embeddings:
            shapes["lm_head"] = (d, self.vocab_size)
        return shapes

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "d_model": self.d_model,
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads, "head_dim": self.head_dim,
            "ffn_mult": self.ffn_mult, "rope_theta": self.rope_theta,
            "tie_embeddings": self.tie_embeddings, "max_seq": self.max_seq,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TinyLM:
    config: ModelConfig
    weights: dict  # slot name -> np.ndarray (float32) or QuantTensor
    stats: dict = field(default_factory=lambda: {"forwards": 0})

    def weight(self, name: str) -> np.ndarray:
        """Resolve a slot to a dense float array, dequantizing if needed."""
        w = self.weights[name]
        if isinstance(w, np.ndarray):
            return w
        return w.dequantize()  # QuantTensor

    def reset_counters(self):
        self.stats["forwards"] = 0


@dataclass
class ForwardOutput:
    logits: np.ndarray                 # [new_positions, vocab]
    final_hidden: np.ndarray           # [new_positions, d_model], post final norm
    attn_rows: Optional[list] = None   # per layer: list of rows per new position


@dataclass
class PatchGrid:
    rows: int
    cols: int
    dim: int
    data: np.ndarray  # [rows, cols, dim]

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0 or self.dim <= 0:
            raise ShapeError("PatchGrid dimensions must be positive")
        self.data = np.asarray(self.data)
        if self.data.shape != (self.rows, self.cols, self.dim):
            raise ShapeError(
                f"data shape {self.data.shape} != ({self.rows}, {self.cols}, {self.dim})")


def init_model(config: ModelConfig, seed: int) -> TinyLM:
    """All weights ~ Normal(0, 0.02) from per-slot streams; norm scales = 1."""
    weights = {}
    for name, shape in config.slot_shapes().items():
        if name.endswith("norm"):
            weights[name] = np.ones(shape, dtype=np.float32)
        else:
            rng = slot_rng(seed, name)
            weights[name] = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
    return TinyLM(config=config, weights=weights)


def rms_norm(x: np.ndarray, scale: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return (x / rms) * scale


def apply_rope(vec: np.ndarray, position: int, theta: float) -> np.ndarray:
    """Rotate consecutive pairs of an even-length vector by position-scaled angles."""
    vec = np.asarray(vec, dtype=np.float64)
    d = vec.shape[-1]
    if d % 2 != 0:
        raise ShapeError("apply_rope requires an even-length vector")
    half = d // 2
    freqs = theta ** (-2.0 * np.arange(half) / d)
    ang = position * freqs
    cos, sin = np.cos(ang), np.sin(ang)
    x0, x1 = vec[..., 0::2], vec[..., 1::2]
    out = np.empty_like(vec)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def _rope_block(x: np.ndarray, positions: np.ndarray, theta: float) -> np.ndarray:
    """Vectorized rope over x[n, heads, head_dim] at absolute positions[n]."""
    d = x.shape[-1]
    half = d // 2
    freqs = theta ** (-2.0 * np.arange(half) / d)
    ang = positions[:, None] * freqs[None, :]          # [n, half]
    cos = np.cos(ang)[:, None, :]
    sin = np.sin(ang)[:, None, :]
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _proj(h: np.ndarray, model: TinyLM, slot: str, adapter=None) -> np.ndarray:
    y = h @ model.weight(slot).astype(np.float64)
    if adapter is not None and slot in adapter.target_slots:
        a = adapter.A[slot].astype(np.float64)   # [r, in]
        b = adapter.B[slot].astype(np.float64)   # [out, r]
        y = y + (adapter.alpha / adapter.r) * ((h @ a.T) @ b.T)
    return y


def forward(model: TinyLM, tokens, cache=None, capture_attn: bool = False,
            attn_per_head: bool = False, adapter=None) -> ForwardOutput:
    """Run the model over new tokens, optionally extending a KV cache.

    Positions continue from the cache's maximum position; keys are stored
    post-rotation, so evicted positions are never re-indexed.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("tokens must be a nonempty 1-D sequence")
    if np.any(tokens < 0) or np.any(tokens >= cfg.vocab_size):
        raise ValueError("token id out of range")
    n = tokens.size
    start = cache.next_position() if cache is not None else 0
    positions = np.arange(start, start + n)
    if positions[-1] >= cfg.max_seq:
        raise ValueError(f"sequence exceeds max_seq ({cfg.max_seq})")

    model.stats["forwards"] += 1
    group = cfg.n_heads // cfg.n_kv_heads
    inv_sqrt = 1.0 / np.sqrt(cfg.head_dim)

    x = model.weight("token_embed").astype(np.float64)[tokens]
    attn_out_rows: Optional[list] = [] if capture_attn else None

    for li in range(cfg.n_layers):
        p = f"layers.{li}."
        h = rms_norm(x, model.weight(p + "attn_norm").astype(np.float64))
        q = _proj(h, model, p + "wq", adapter).reshape(n, cfg.n_heads, cfg.head_dim)
        k = _proj(h, model, p + "wk", adapter).reshape(n, cfg.n_kv_heads, cfg.head_dim)
        v = _proj(h, model, p + "wv", adapter).reshape(n, cfg.n_kv_heads, cfg.head_dim)
        q = _rope_block(q, positions, cfg.rope_theta)
        k = _rope_block(k, positions, cfg.rope_theta)

        if cache is not None:
            past_k, past_v, past_pos = cache.layer_kv(li)
            m = past_k.shape[0]
            K = np.concatenate([past_k, k], axis=0) if m else k
            V = np.concatenate([past_v, v], axis=0) if m else v
        else:
            m = 0
            K, V = k, v

        # scores[h_q, i, j] with causal mask: query i sees keys j <= m + i
        kv_idx = np.arange(cfg.n_heads) // group
        k_exp = K.take(kv_idx, axis=1)                           # [m+n, H, hd]
        scores = np.einsum("nhd,mhd->hnm", q, k_exp) * inv_sqrt
        key_slot = np.arange(m + n)
        mask = key_slot[None, :] > (m + np.arange(n))[:, None]   # [n, m+n]
        scores = np.where(mask[None, :, :], -np.inf, scores)
        scores -= scores.max(axis=-1, keepdims=True)
        ex = np.exp(scores)
        probs = ex / ex.sum(axis=-1, keepdims=True)              # [H, n, m+n]

        out = np.einsum("hnm,mhd->nhd", probs, V.take(kv_idx, axis=1))
        attn = _proj(out.reshape(n, cfg.n_heads * cfg.head_dim), model, p + "wo", adapter)
        x = x + attn

        head_avg = probs.mean(axis=0)                            # [n, m+n]
        rows = []
        for i in range(n):
            r = head_avg[i, : m + i + 1]
            s = r.sum()
            rows.append(r / s if s > 0 else r)
        if cache is not None:
            cache.append_block(li, k, v, positions, rows)
        if capture_attn:
            if attn_per_head:
                attn_out_rows.append(
                    [probs[:, i, : m + i + 1].copy() for i in range(n)])
            else:
                attn_out_rows.append(rows)

        h2 = rms_norm(x, model.weight(p + "ffn_norm").astype(np.float64))
        gate = _silu(_proj(h2, model, p + "w_gate", adapter))
        up = _proj(h2, model, p + "w_up", adapter)
        x = x + _proj(gate * up, model, p + "w_down", adapter)

    fh = rms_norm(x, model.weight("final_norm").astype(np.float64))
    if cfg.tie_embeddings:
        logits = fh @ model.weight("token_embed").astype(np.float64).T
    else:
        logits = _proj(fh, model, "lm_head", adapter)
    return ForwardOutput(logits=logits, final_hidden=fh, attn_rows=attn_out_rows)


def greedy_decode(model: TinyLM, prompt, max_new: int, adapter=None) -> list[int]:
    """Argmax decoding with a full (non-evicting) cache; ties go to the lowest id."""
    from .kvcache import KvCache

    prompt = list(int(t) for t in prompt)
    if not prompt:
        raise ValueError("prompt must be nonempty")
    if max_new < 0:
        raise ValueError("max_new must be nonnegative")
    out = list(prompt)
    if max_new == 0:
        return out
    cache = KvCache.for_model(model.config)
    fo = forward(model, prompt, cache=cache, adapter=adapter)
    nxt = int(np.argmax(fo.logits[-1]))
    out.append(nxt)
    for _ in range(max_new - 1):
        fo = forward(model, [nxt], cache=cache, adapter=adapter)
        nxt = int(np.argmax(fo.logits[-1]))
        out.append(nxt)
    return out


def pixel_shuffle(grid: PatchGrid, r: int) -> PatchGrid:
    """Merge each r x r patch block into one patch of dim r^2 * dim.

    Blocks are concatenated in row-major block order, shrinking the sequence
    length by r^2 (r=2 gives the quarter-length reduction).
    """
    if r <= 0:
        raise ShapeError("r must be positive")
    if grid.rows % r != 0 or grid.cols % r != 0:
        raise ShapeError(f"grid {grid.rows}x{grid.cols} not divisible by r={r}")
    R, C, d = grid.rows // r, grid.cols // r, grid.dim
    x = grid.data.reshape(R, r, C, r, d)
    x = x.transpose(0, 2, 1, 3, 4).reshape(R, C, r * r * d)
    return PatchGrid(rows=R, cols=C, dim=r * r * d, data=x)


def pixel_unshuffle(grid: PatchGrid, r: int) -> PatchGrid:
    """Exact inverse of :func:`pixel_shuffle` with the same r."""
    if r <= 0:
        raise ShapeError("r must be positive")
    if grid.dim % (r * r) != 0:
        raise ShapeError(f"dim {grid.dim} not divisible by r^2={r * r}")
    d = grid.dim // (r * r)
    R, C = grid.rows, grid.cols
    x = grid.data.reshape(R, C, r, r, d).transpose(0, 2, 1, 3, 4)
    return PatchGrid(rows=R * r, cols=C * r, dim=d, data=x.reshape(R * r, C * r, d))


# --- weight manifest (little-endian float32, row-major) -----------------------

_MAGIC = b"EDGELM01"


def save_model(model: TinyLM, path):
    """Flat binary manifest: magic, JSON header (config + slot table), raw data."""
    slots = []
    blobs = []
    offset = 0
    for name in sorted(model.weights):
        w = model.weights[name]
        if not isinstance(w, np.ndarray):
            raise ValueError("save_model handles float models; use quant manifests "
                             "for quantized weights")
        raw = np.ascontiguousarray(w, dtype="<f4").tobytes()
        slots.append({"name": name, "shape": list(w.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": model.config.to_dict(), "slots": slots}).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_model(path) -> TinyLM:
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise ValueError("not an edgelm weight manifest")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        data = f.read()
    config = ModelConfig.from_dict(header["config"])
    weights = {}
    for slot in header["slots"]:
        shape = tuple(slot["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=slot["offset"])
        weights[slot["name"]] = arr.reshape(shape).copy()
    expected = set(config.slot_shapes())
    if set(weights) != expected:
        raise ValueError("manifest slots do not match config")
    return TinyLM(config=config, weights=weights)
