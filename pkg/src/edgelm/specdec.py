"""Lossless chain speculative decoding with block-efficiency accounting.

Two draft kinds: an independent small model, and a feature-reuse head that
auto-regresses over the target's top-layer hidden states sharing the target's
embeddings and LM head. Verification is greedy prefix matching, so the output
stream is token-identical to plain greedy decoding regardless of draft quality.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .kvcache import KvCache
from .model import TinyLM, forward, slot_rng


@dataclass
class IndependentDraft:
    model: TinyLM


@dataclass
class FeatureReuseDraft:
    """Two-layer map [prev top hidden ++ last-token embedding] -> next hidden.

    The predicted hidden decodes through the target's tied LM head. Ships
    untrained (zero or seeded-random init); `load_head` accepts externally
    trained weights.
    """
    w1: np.ndarray  # [2*d_model, d_model]
    w2: np.ndarray  # [d_model, d_model]

    @classmethod
    def zero_init(cls, d_model: int) -> "FeatureReuseDraft":
        return cls(w1=np.zeros((2 * d_model, d_model), dtype=np.float32),
                   w2=np.zeros((d_model, d_model), dtype=np.float32))

    @classmethod
    def random_init(cls, d_model: int, seed: int) -> "FeatureReuseDraft":
        r1 = slot_rng(seed, "feature_head.w1")
        r2 = slot_rng(seed, "feature_head.w2")
        return cls(w1=r1.normal(0, 0.02, (2 * d_model, d_model)).astype(np.float32),
                   w2=r2.normal(0, 0.02, (d_model, d_model)).astype(np.float32))

    def load_head(self, w1, w2):
        w1 = np.asarray(w1, dtype=np.float32)
        w2 = np.asarray(w2, dtype=np.float32)
        if w1.shape != self.w1.shape or w2.shape != self.w2.shape:
            raise ValueError("head weight shapes do not match")
        self.w1, self.w2 = w1, w2


@dataclass
class DraftConfig:
    draft: Union[IndependentDraft, FeatureReuseDraft]
    k: int = 4

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("draft length k must be >= 1")


@dataclass
class SpecStats:
    rounds: int = 0
    proposed: int = 0
    accepted: int = 0
    emitted: int = 0

    def check(self):
        assert 0 <= self.accepted <= self.proposed
        assert self.emitted == self.accepted + self.rounds


def block_efficiency(stats: SpecStats) -> float:
    """Emitted tokens per target forward pass."""
    if stats.rounds == 0:
        raise ValueError("block efficiency undefined with zero rounds")
    return stats.emitted / stats.rounds


def propose(draft_cfg: DraftConfig, target: TinyLM, context, k: int,
            last_hidden: Optional[np.ndarray] = None) -> list[int]:
    """Greedy auto-regression of the draft for k tokens."""
    context = list(int(t) for t in context)
    if not context:
        raise ValueError("context must be nonempty")
    if k < 1:
        return []
    draft = draft_cfg.draft
    if isinstance(draft, IndependentDraft):
        cache = KvCache.for_model(draft.model.config)
        toks = list(context)
        fo = forward(draft.model, toks, cache=cache)
        out = [int(np.argmax(fo.logits[-1]))]
        for _ in range(k - 1):
            fo = forward(draft.model, [out[-1]], cache=cache)
            out.append(int(np.argmax(fo.logits[-1])))
        return out
    # feature reuse: roll the predicted hidden forward through the shared head
    d = target.config.d_model
    h = np.zeros(d) if last_hidden is None else np.asarray(last_hidden, dtype=np.float64)
    embed = target.weight("token_embed").astype(np.float64)
    w1 = draft.w1.astype(np.float64)
    w2 = draft.w2.astype(np.float64)
    tok = context[-1]
    out = []
    for _ in range(k):
        inp = np.concatenate([h, embed[tok]])
        h = np.tanh(inp @ w1) @ w2
        logits = h @ embed.T
        tok = int(np.argmax(logits))
        out.append(tok)
    return out


def verify(target: TinyLM, context, draft_tokens) -> tuple[int, int]:
    """One batched target pass over context+draft; longest matching prefix.

    Returns (accepted_len, next_token) where next_token is the target argmax
    at the first mismatch, or the bonus token when the whole draft matches.
    """
    context = list(int(t) for t in context)
    draft_tokens = list(int(t) for t in draft_tokens)
    if not draft_tokens:
        raise ValueError("draft must be nonempty")
    fo = forward(target, context + draft_tokens)
    preds = np.argmax(fo.logits, axis=-1)
    base = len(context) - 1
    acc = 0
    while acc < len(draft_tokens) and draft_tokens[acc] == int(preds[base + acc]):
        acc += 1
    return acc, int(preds[base + acc])


def decode_speculative(target: TinyLM, draft_cfg: DraftConfig, prompt,
                       max_new: int, trace: Optional[list] = None
                       ) -> tuple[list[int], SpecStats]:
    """Speculate with the draft, verify greedily; output equals greedy_decode.

    The target cache always lags one token behind the committed stream (the
    correction/bonus token is emitted before it is forwarded), so each round
    costs exactly one target forward.
    """
    prompt = list(int(t) for t in prompt)
    if not prompt:
        raise ValueError("prompt must be nonempty")
    if max_new < 1:
        raise ValueError("max_new must be >= 1")

    cache = KvCache.for_model(target.config)
    stats = SpecStats()
    out = list(prompt)
    pending = list(prompt)          # committed tokens not yet in the cache
    last_hidden: Optional[np.ndarray] = None
    emitted = 0
    while emitted < max_new:
        k = min(draft_cfg.k, max_new - emitted - 1)
        draft_tokens = propose(draft_cfg, target, out, k, last_hidden) if k > 0 else []
        block = pending + draft_tokens
        fo = forward(target, block, cache=cache)
        preds = np.argmax(fo.logits, axis=-1)
        base = len(pending) - 1
        acc = 0
        while acc < len(draft_tokens) and draft_tokens[acc] == int(preds[base + acc]):
            acc += 1
        next_tok = int(preds[base + acc])
        out.extend(draft_tokens[:acc])
        out.append(next_tok)
        emitted += acc + 1
        cache.truncate(len(draft_tokens) - acc)
        last_hidden = fo.final_hidden[base + acc]
        pending = [next_tok]
        stats.rounds += 1
        stats.proposed += len(draft_tokens)
        stats.accepted += acc
        stats.emitted = emitted
        if trace is not None:
            trace.append({"round": stats.rounds, "proposed": len(draft_tokens),
                          "accepted": acc, "emitted": acc + 1})
    stats.check()
    return out, stats
