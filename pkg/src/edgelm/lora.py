"""1+N low-rank adapter registry over a frozen base, plus a fine-tuning demo
on a frozen quantized linear map with analytic gradients.

The base model (float or quantized) is never mutated: adapter deltas are
applied on the fly during forward, or materialized by `merge` into a separate
model. A cryptographic hash of the base weights is exposed so deployments can
assert the frozen contract.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, FrozenEncodingError
from .model import TinyLM, ForwardOutput, forward, slot_rng
from .quant import QuantTensor


@dataclass
class LoraAdapter:
    name: str
    r: int
    alpha: float
    target_slots: tuple[str, ...]
    A: dict[str, np.ndarray]  # slot -> [r, in_dim]
    B: dict[str, np.ndarray]  # slot -> [out_dim, r]

    def delta(self, slot: str) -> np.ndarray:
        """Effective delta, shaped like the stored [in_dim, out_dim] weight."""
        return (self.alpha / self.r) * (self.B[slot] @ self.A[slot]).T


def create_adapter(model: TinyLM, target_slots, r: int, alpha: float,
                   seed: int, name: str = "adapter") -> LoraAdapter:
    """A ~ Normal(0, 0.02) seeded per slot; B = 0 (identity at creation)."""
    shapes = model.config.slot_shapes()
    target_slots = tuple(target_slots)
    if r < 1:
        raise ConfigError("rank must be >= 1")
    A, B = {}, {}
    for slot in target_slots:
        if slot not in shapes:
            raise ConfigError(f"unknown slot {slot!r}")
        shape = shapes[slot]
        if len(shape) != 2:
            raise ConfigError(f"slot {slot!r} is not a matrix")
        in_dim, out_dim = shape
        if r > min(in_dim, out_dim):
            raise ConfigError(f"rank {r} exceeds slot {slot!r} dims {shape}")
        rng = slot_rng(seed, f"lora.{name}.{slot}")
        A[slot] = rng.normal(0, 0.02, (r, in_dim)).astype(np.float32)
        B[slot] = np.zeros((out_dim, r), dtype=np.float32)
    return LoraAdapter(name=name, r=r, alpha=alpha, target_slots=target_slots,
                       A=A, B=B)


def merge(base_weight, adapter: LoraAdapter, slot: str) -> np.ndarray:
    """W' = W + (alpha/r) * (B A)^T for our [in_dim, out_dim] storage."""
    w = base_weight.dequantize() if isinstance(base_weight, QuantTensor) \
        else np.asarray(base_weight)
    d = adapter.delta(slot)
    if d.shape != w.shape:
        raise ConfigError(f"delta shape {d.shape} != weight shape {w.shape}")
    return (w.astype(np.float64) + d).astype(np.float32)


class AdapterRegistry:
    """One frozen base, N named adapters, at most one active."""

    def __init__(self, base: TinyLM):
        self.base = base
        self.adapters: dict[str, LoraAdapter] = {}
        self.active: Optional[str] = None

    def register(self, adapter: LoraAdapter):
        self.adapters[adapter.name] = adapter

    def activate(self, name: Optional[str]):
        if name is not None and name not in self.adapters:
            raise KeyError(f"unknown adapter {name!r}")
        self.active = name

    def active_adapter(self) -> Optional[LoraAdapter]:
        return self.adapters[self.active] if self.active is not None else None

    def apply_forward(self, tokens, cache=None,
                      capture_attn: bool = False) -> ForwardOutput:
        """Forward with the active adapter's delta applied per use; the stored
        base weights are never touched."""
        return forward(self.base, tokens, cache=cache, capture_attn=capture_attn,
                       adapter=self.active_adapter())

    def merged_model(self) -> TinyLM:
        """Offline merge of the active adapter into a fresh float model."""
        adapter = self.active_adapter()
        weights = {}
        for name in self.base.config.slot_shapes():
            w = self.base.weight(name)
            if adapter is not None and name in adapter.target_slots:
                weights[name] = merge(self.base.weights[name], adapter, name)
            else:
                weights[name] = np.array(w, copy=True)
        return TinyLM(config=self.base.config, weights=weights)

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.base.weights):
            w = self.base.weights[name]
            h.update(name.encode())
            if isinstance(w, QuantTensor):
                h.update(w.encoding_bytes())
            else:
                h.update(np.ascontiguousarray(w, dtype="<f4").tobytes())
        return h.hexdigest()


# --- fine-tuning a low-rank delta over a frozen quantized linear map ---------

@dataclass
class LinearFit:
    A: np.ndarray          # [r, in_dim]
    B: np.ndarray          # [out_dim, r]
    r: int
    alpha: float
    losses: list[float] = field(default_factory=list)


def _fit_loss_and_grads(W, A, B, X, Y, alpha, r):
    n = X.shape[0]
    scale = alpha / r
    W_eff = W + scale * (B @ A)
    P = W_eff @ X.T - Y.T                       # [out, n]
    loss = float(np.sum(P * P) / n)
    G = (2.0 / n) * (P @ X)                      # dL/dW_eff, [out, in]
    gB = scale * (G @ A.T)
    gA = scale * (B.T @ G)
    return loss, gA, gB


def qalft_fit(w_q: QuantTensor, data, r: int, alpha: float, steps: int,
              learning_rate: float, seed: int = 0) -> LinearFit:
    """Fit a float low-rank delta over a frozen quantized [out, in] linear map.

    Full-batch gradient descent with analytic gradients and backtracking on
    the step size, minimizing mean squared error of (W + (alpha/r) B A) x vs y.
    The quantized encodings are never touched (and cannot be: frozen arrays
    reject writes).
    """
    if not w_q.frozen:
        raise FrozenEncodingError("qalft_fit requires a frozen quantized base")
    pairs = list(data)
    if not pairs:
        raise ValueError("data must be nonempty")
    X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in pairs])
    Y = np.stack([np.asarray(y, dtype=np.float64) for _, y in pairs])
    W = w_q.dequantize().astype(np.float64)      # [out, in]
    out_dim, in_dim = W.shape
    if r > min(in_dim, out_dim):
        raise ConfigError(f"rank {r} exceeds map dims {W.shape}")

    rng = slot_rng(seed, "qalft.A")
    A = rng.normal(0, 0.02, (r, in_dim))
    B = np.zeros((out_dim, r))

    loss, gA, gB = _fit_loss_and_grads(W, A, B, X, Y, alpha, r)
    losses = [loss]
    lr = learning_rate
    for _ in range(steps):
        while True:
            A2, B2 = A - lr * gA, B - lr * gB
            new_loss, ngA, ngB = _fit_loss_and_grads(W, A2, B2, X, Y, alpha, r)
            if new_loss <= loss:
                break
            if lr < 1e-12:
                return LinearFit(A=A, B=B, r=r, alpha=alpha, losses=losses)
            lr *= 0.5
        A, B, loss, gA, gB = A2, B2, new_loss, ngA, ngB
        losses.append(loss)
        lr = min(lr * 1.05, learning_rate)  # creep back toward the requested rate
    return LinearFit(A=A, B=B, r=r, alpha=alpha, losses=losses)


def qalft_gradient_check(w_q: QuantTensor, data, r: int, alpha: float,
                         seed: int = 0, h: float = 1e-4) -> float:
    """Max relative error of analytic gradients vs central finite differences."""
    pairs = list(data)
    X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in pairs])
    Y = np.stack([np.asarray(y, dtype=np.float64) for _, y in pairs])
    W = w_q.dequantize().astype(np.float64)
    out_dim, in_dim = W.shape
    rng = np.random.default_rng(seed)
    A = rng.normal(0, 0.5, (r, in_dim))
    B = rng.normal(0, 0.5, (out_dim, r))
    _, gA, gB = _fit_loss_and_grads(W, A, B, X, Y, alpha, r)

    def loss_at(Ax, Bx):
        l, _, _ = _fit_loss_and_grads(W, Ax, Bx, X, Y, alpha, r)
        return l

    max_rel = 0.0
    for M, g in ((A, gA), (B, gB)):
        it = np.nditer(M, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = M[ix]
            M[ix] = orig + h
            lp = loss_at(A, B)
            M[ix] = orig - h
            lm = loss_at(A, B)
            M[ix] = orig
            fd = (lp - lm) / (2 * h)
            denom = max(abs(fd), abs(g[ix]), 1e-8)
            max_rel = max(max_rel, abs(fd - g[ix]) / denom)
    return max_rel


# --- adapter / registry file formats -----------------------------------------

def save_adapter(adapter: LoraAdapter, path):
    """JSON header + row-major little-endian float32 A/B blobs."""
    slots = []
    blobs = []
    offset = 0
    for slot in adapter.target_slots:
        a = np.ascontiguousarray(adapter.A[slot], dtype="<f4").tobytes()
        b = np.ascontiguousarray(adapter.B[slot], dtype="<f4").tobytes()
        slots.append({"slot": slot,
                      "a_shape": list(adapter.A[slot].shape), "a_offset": offset,
                      "b_shape": list(adapter.B[slot].shape),
                      "b_offset": offset + len(a)})
        blobs += [a, b]
        offset += len(a) + len(b)
    header = json.dumps({"name": adapter.name, "r": adapter.r,
                         "alpha": adapter.alpha, "slots": slots}).encode()
    with open(path, "wb") as f:
        f.write(b"EDGELMA1")
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_adapter(path) -> LoraAdapter:
    with open(path, "rb") as f:
        if f.read(8) != b"EDGELMA1":
            raise ValueError("not an edgelm adapter file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        data = f.read()
    A, B = {}, {}
    for s in header["slots"]:
        a_shape = tuple(s["a_shape"])
        b_shape = tuple(s["b_shape"])
        a_count, b_count = int(np.prod(a_shape)), int(np.prod(b_shape))
        A[s["slot"]] = np.frombuffer(data, dtype="<f4", count=a_count,
                                     offset=s["a_offset"]).reshape(a_shape).copy()
        B[s["slot"]] = np.frombuffer(data, dtype="<f4", count=b_count,
                                     offset=s["b_offset"]).reshape(b_shape).copy()
    return LoraAdapter(name=header["name"], r=header["r"], alpha=header["alpha"],
                       target_slots=tuple(s["slot"] for s in header["slots"]),
                       A=A, B=B)


def save_registry_manifest(registry: AdapterRegistry, adapter_paths: dict, path):
    """Base-hash plus adapter file list, so a deployment can verify the pairing."""
    manifest = {"base_hash": registry.base_hash(),
                "adapters": [{"name": name, "path": str(p)}
                             for name, p in sorted(adapter_paths.items())]}
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
