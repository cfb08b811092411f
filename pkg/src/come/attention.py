"""Single multi-head self-attention block feeding clustering and routing.

Operates on unordered token sets: no positional encoding and no mask, so the
block is permutation-equivariant. Projections are bias-free; the D-wide
weight matrices hold the per-head projections as contiguous column blocks of
width D / heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import require_finite, softmax, softmax_backward

Array = np.ndarray


@dataclass
class AttentionParams:
    heads: int
    wq: Array  # (D, D)
    wk: Array  # (D, D)
    wv: Array  # (D, D)
    wo: Array  # (D, D)

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    def as_dict(self, prefix: str = "attn") -> dict:
        return {
            f"{prefix}.wq": self.wq,
            f"{prefix}.wk": self.wk,
            f"{prefix}.wv": self.wv,
            f"{prefix}.wo": self.wo,
        }


@dataclass
class AttentionCache:
    tokens: Array  # (B, T, D)
    q: Array  # (B, h, T, dh)
    k: Array
    v: Array
    probs: Array  # (B, h, T, T) row-stochastic
    merged: Array  # (B, T, D) concatenated head outputs


def init_attention(width: int, heads: int, rng: np.random.Generator) -> AttentionParams:
    if width % heads != 0:
        raise ValueError(f"width {width} not divisible by heads {heads}")
    scale = 1.0 / np.sqrt(width)
    return AttentionParams(
        heads=heads,
        wq=rng.normal(scale=scale, size=(width, width)),
        wk=rng.normal(scale=scale, size=(width, width)),
        wv=rng.normal(scale=scale, size=(width, width)),
        wo=rng.normal(scale=scale, size=(width, width)),
    )


def _split_heads(x: Array, heads: int) -> Array:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Array) -> Array:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attention_forward(tokens: Array, params: AttentionParams):
    """Self-attention over each sample's token set.

    Returns (output (B, T, D), cache). Rejects width mismatches.
    """
    x = require_finite("attention tokens", tokens)
    if x.ndim != 3 or x.shape[2] != params.width:
        raise ValueError(f"attention: expected (B, T, {params.width}) tokens, got {x.shape}")
    h = params.heads
    dh = params.width // h
    q = _split_heads(x @ params.wq, h)
    k = _split_heads(x @ params.wk, h)
    v = _split_heads(x @ params.wv, h)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
    probs = softmax(scores, axis=-1)
    merged = _merge_heads(probs @ v)
    out = merged @ params.wo
    cache = AttentionCache(tokens=x, q=q, k=k, v=v, probs=probs, merged=merged)
    return out, cache


def attention_backward(grad_out: Array, cache: AttentionCache, params: AttentionParams):
    """Gradients of the attention output w.r.t. tokens and parameters.

    Requires the forward cache; returns (d_tokens, grads dict keyed like
    ``AttentionParams.as_dict``).
    """
    if cache is None:
        raise ValueError("attention_backward: missing forward cache")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != cache.merged.shape:
        raise ValueError("attention_backward: upstream gradient shape mismatch")
    h = params.heads
    dh = params.width // h

    d_wo = np.einsum("btd,bte->de", cache.merged, g)
    d_merged = g @ params.wo.T
    d_headed = _split_heads(d_merged, h)

    d_probs = d_headed @ cache.v.transpose(0, 1, 3, 2)
    d_v = cache.probs.transpose(0, 1, 3, 2) @ d_headed
    d_scores = softmax_backward(cache.probs, d_probs, axis=-1) / np.sqrt(dh)
    d_q = d_scores @ cache.k
    d_k = d_scores.transpose(0, 1, 3, 2) @ cache.q

    d_qf = _merge_heads(d_q)
    d_kf = _merge_heads(d_k)
    d_vf = _merge_heads(d_v)
    x = cache.tokens
    grads = {
        "attn.wq": np.einsum("btd,bte->de", x, d_qf),
        "attn.wk": np.einsum("btd,bte->de", x, d_kf),
        "attn.wv": np.einsum("btd,bte->de", x, d_vf),
        "attn.wo": d_wo,
    }
    d_tokens = d_qf @ params.wq.T + d_kf @ params.wk.T + d_vf @ params.wv.T
    return d_tokens, grads
