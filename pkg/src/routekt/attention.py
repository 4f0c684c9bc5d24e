"""Monotonic attention with context-aware distance decay and relevance masking.

For a query position t and key position tau (within one head):

    gamma[t, t'] = softmax_{tau' allowed, tau' <= t}(q_t . k_tau' / sqrt(dk))
    dist[t, tau] = |t - tau| * prod_{t' in (tau, t], allowed} gamma[t, t']
    s[t, tau]    = exp(-theta * dist[t, tau]) * q_t . k_tau / sqrt(dk)
    alpha[t, :]  = softmax of s[t, :] over causal AND relevance-allowed keys

Rows whose allowed set is empty produce a zero output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import tensor as T
from .relevance import RelevanceMatrix
from .tensor import EXP_FLOOR, MaskCounter, ShapeError, Tensor


def causal_mask(t: int, strict: bool = False) -> np.ndarray:
    """Lower-triangular boolean mask; ``strict`` excludes the diagonal."""
    return np.tril(np.ones((t, t), dtype=bool), k=-1 if strict else 0)


def _relevance_array(F, t: int) -> np.ndarray:
    if F is None:
        return np.ones((t, t), dtype=bool)
    arr = F.entries if isinstance(F, RelevanceMatrix) else np.asarray(F)
    if arr.shape[-2:] != (t, t):
        raise ShapeError(f"relevance mask shape {arr.shape} does not match sequence length {t}")
    return arr.astype(bool)


def _distance_from_logits(logits: Tensor, allowed: np.ndarray) -> Tensor:
    t = logits.shape[-1]
    gamma = T.masked_softmax(logits, allowed)
    keep = np.broadcast_to(allowed, gamma.shape)
    # Positions outside the allowed set contribute a neutral factor of 1.
    factors = gamma * keep.astype(np.float64) + (~keep).astype(np.float64)
    prod = T.exclusive_suffix_prod(factors)
    idx = np.arange(t)
    gap = np.abs(idx[:, None] - idx[None, :]).astype(np.float64) * causal_mask(t)
    return prod * gap


def context_distance(q: Tensor, k: Tensor, allowed=None) -> Tensor:
    """Distances dist[..., t, tau] from per-head queries/keys of shape (..., t, dk).

    ``allowed`` restricts the gamma normalisation and product; by default it is
    the inclusive causal mask, which reproduces the unmasked formula.
    """
    q, k = T.as_tensor(q), T.as_tensor(k)
    if q.shape != k.shape:
        raise ShapeError(f"context_distance: q {q.shape} and k {k.shape} differ")
    t, dk = q.shape[-2], q.shape[-1]
    mask = causal_mask(t) if allowed is None else np.asarray(allowed, dtype=bool) & causal_mask(t)
    logits = T.scale(T.matmul(q, T.transpose(k, _swap_last(k.ndim))), 1.0 / np.sqrt(dk))
    return _distance_from_logits(logits, mask)


def monotonic_scores(q: Tensor, k: Tensor, dist: Tensor, theta) -> Tensor:
    """s = exp(-theta * dist) * q.k / sqrt(dk), exponent floored at -60."""
    q, k, dist, theta = T.as_tensor(q), T.as_tensor(k), T.as_tensor(dist), T.as_tensor(theta)
    if np.any(theta.data <= 0):
        raise ValueError("decay rate theta must be positive")
    dk = q.shape[-1]
    logits = T.scale(T.matmul(q, T.transpose(k, _swap_last(k.ndim))), 1.0 / np.sqrt(dk))
    return _decayed(logits, dist, theta)


def _decayed(logits: Tensor, dist: Tensor, theta: Tensor) -> Tensor:
    decay = T.exp(T.clip(T.scale(theta * dist, -1.0), lo=EXP_FLOOR))
    return decay * logits


def masked_attention(values: Tensor, scores: Tensor, causal: np.ndarray, F=None,
                     counter: MaskCounter | None = None) -> tuple[Tensor, Tensor]:
    """Weights from ``scores`` over causal AND F positions, applied to ``values``.

    Returns (output, weights).
    """
    t = scores.shape[-1]
    causal = np.asarray(causal, dtype=bool)
    if causal.shape[-2:] != (t, t):
        raise ShapeError(f"causal mask shape {causal.shape} does not match scores {scores.shape}")
    allowed = causal & _relevance_array(F, t)
    weights = T.masked_softmax(scores, allowed, counter)
    return T.matmul(weights, values), weights


def fused_attention_weights(logits: Tensor, theta: Tensor, relevance: np.ndarray, strict: bool) -> Tensor:
    """Distance, decay and masked softmax in one op over (B, H, T, T) logits.

    ``relevance`` is (B, T, T); ``theta`` holds one positive rate per head.
    Matches the composite path built from primitive ops.
    """
    b, h, t, _ = logits.shape
    rel = np.ascontiguousarray(np.broadcast_to(np.asarray(relevance, dtype=bool), (b, t, t)))
    th = np.ascontiguousarray(theta.data.reshape(h))
    lg = np.ascontiguousarray(logits.data)
    alpha, gamma, prod, dec = _kernels.attention_core_fwd(lg, rel, th, bool(strict))

    def backward(g):
        g_logits, g_theta = _kernels.attention_core_bwd(
            np.ascontiguousarray(g), lg, rel, th, bool(strict), alpha, gamma, prod, dec)
        return g_logits, g_theta.reshape(theta.shape)

    return T._make(alpha, (logits, theta), backward, "monotonic_attention")


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    theta_raw: Tensor  # (heads,), theta = softplus(theta_raw)
    num_heads: int

    @classmethod
    def init(cls, dim: int, num_heads: int, rng: np.random.Generator) -> "AttentionParams":
        if dim % num_heads:
            raise ValueError(f"dim {dim} is not divisible by heads {num_heads}")
        bound = np.sqrt(6.0 / (2 * dim))

        def w():
            return Tensor(rng.uniform(-bound, bound, size=(dim, dim)), requires_grad=True)

        return cls(w(), w(), w(), w(), Tensor(np.zeros(num_heads), requires_grad=True), num_heads)

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    def theta(self) -> Tensor:
        return T.softplus(self.theta_raw)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk, f"{prefix}.wv": self.wv,
                f"{prefix}.wo": self.wo, f"{prefix}.theta_raw": self.theta_raw}


@dataclass
class AttentionContext:
    """Masks for one attention call.

    ``relevance`` is (t, t) or (batch, t, t); ``strict`` excludes the query's
    own position from the attended set (the distance gamma always includes it).
    """
    relevance: np.ndarray | None
    strict: bool = False
    counter: MaskCounter | None = None
    valid: np.ndarray | None = None  # (batch, t) rows to count in diagnostics
    fused: bool = True


@dataclass
class AttentionOutput:
    out: Tensor
    weights: Tensor


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dk))


def multi_head_route_attention(x: Tensor, params: AttentionParams, ctx: AttentionContext,
                               keys: Tensor | None = None, values: Tensor | None = None) -> AttentionOutput:
    """Project, decay, mask and mix over all heads; input (t, D) or (batch, t, D)."""
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
        keys = None if keys is None else T.reshape(keys, (1,) + keys.shape)
        values = None if values is None else T.reshape(values, (1,) + values.shape)
    keys = x if keys is None else keys
    values = keys if values is None else values
    if keys.shape != x.shape or values.shape != x.shape:
        raise ShapeError(f"attention inputs differ: {x.shape}, {keys.shape}, {values.shape}")
    b, t, d = x.shape
    if d != params.dim:
        raise ShapeError(f"attention input width {d} does not match params {params.dim}")
    h, dk = params.num_heads, params.head_dim

    rel = _relevance_array(ctx.relevance, t)
    if rel.ndim == 3:
        rel = rel[:, None]
    incl = causal_mask(t) & rel
    attend = causal_mask(t, ctx.strict) & rel

    q = _split_heads(T.matmul(x, params.wq), h)
    k = _split_heads(T.matmul(keys, params.wk), h)
    v = _split_heads(T.matmul(values, params.wv), h)

    logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    if ctx.fused:
        rel3 = np.broadcast_to(rel[:, 0] if rel.ndim == 4 else rel, (b, t, t))
        weights = fused_attention_weights(logits, params.theta(), rel3, ctx.strict)
    else:
        dist = _distance_from_logits(logits, incl)
        scores = _decayed(logits, dist, T.reshape(params.theta(), (h, 1, 1)))
        weights = T.masked_softmax(scores, attend)
    if ctx.counter is not None:
        live = np.broadcast_to(attend, (b, h, t, t)).any(axis=-1)[:, 0]
        if ctx.valid is not None:
            live = live | ~np.asarray(ctx.valid, dtype=bool)
        ctx.counter.add(np.count_nonzero(~live))
    out = T.matmul(_merge_heads(T.matmul(weights, v)), params.wo)
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return AttentionOutput(out, weights)
