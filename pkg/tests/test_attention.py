import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routekt import tensor as T
from routekt.attention import (AttentionContext, AttentionParams, causal_mask, context_distance,
                               masked_attention, monotonic_scores, multi_head_route_attention)
from routekt.tensor import MaskCounter, ShapeError, Tensor, grad_close, numeric_grad


# ---------------------------------------------------------------- scalar-loop references


def loop_distance(q, k, allowed=None):
    t, dk = q.shape
    allowed = np.ones((t, t), dtype=bool) if allowed is None else allowed
    dist = np.zeros((t, t))
    for i in range(t):
        logits = [sum(q[i, a] * k[j, a] for a in range(dk)) / math.sqrt(dk) for j in range(t)]
        pool = [j for j in range(i + 1) if allowed[i, j]]
        top = max((logits[j] for j in pool), default=0.0)
        z = sum(math.exp(logits[j] - top) for j in pool)
        gamma = {j: math.exp(logits[j] - top) / z for j in pool}
        for tau in range(i + 1):
            prod = 1.0
            for tp in range(tau + 1, i + 1):
                if tp in gamma:
                    prod *= gamma[tp]
            dist[i, tau] = abs(i - tau) * prod
    return dist


def loop_scores(q, k, dist, theta):
    t, dk = q.shape
    s = np.zeros((t, t))
    for i in range(t):
        for j in range(t):
            dot = sum(q[i, a] * k[j, a] for a in range(dk)) / math.sqrt(dk)
            s[i, j] = math.exp(max(-theta * dist[i, j], -60.0)) * dot
    return s


def loop_attention(x, keys, values, wq, wk, wv, wo, thetas, F, strict):
    t, d = x.shape
    h = len(thetas)
    dk = d // h
    heads = []
    for hd in range(h):
        cols = slice(hd * dk, (hd + 1) * dk)
        q, k, v = (x @ wq)[:, cols], (keys @ wk)[:, cols], (values @ wv)[:, cols]
        incl = np.array([[j <= i and F[i, j] for j in range(t)] for i in range(t)])
        dist = loop_distance(q, k, incl)
        s = loop_scores(q, k, dist, thetas[hd])
        out = np.zeros((t, dk))
        for i in range(t):
            pool = [j for j in range(t) if (j < i if strict else j <= i) and F[i, j]]
            if not pool:
                continue
            top = max(s[i, j] for j in pool)
            z = sum(math.exp(s[i, j] - top) for j in pool)
            for j in pool:
                out[i] += math.exp(s[i, j] - top) / z * v[j]
        heads.append(out)
    return np.concatenate(heads, axis=1) @ wo


# ---------------------------------------------------------------- distance and scores


def test_single_step_distance_is_zero():
    assert context_distance(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3)))).data.tolist() == [[0.0]]


def test_uniform_two_step_distance():
    d = context_distance(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2)))).data
    assert d[1, 0] == 0.5 and d[1, 1] == 0.0 and d[0, 0] == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_distance_matches_loop(seed):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    d = context_distance(Tensor(q), Tensor(k)).data
    assert np.max(np.abs(np.tril(d) - loop_distance(q, k))) <= 1e-12
    assert np.all(d >= 0) and np.all(np.diag(d) == 0)


def test_masked_distance_matches_loop():
    rng = np.random.default_rng(7)
    q, k = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    F = rng.random((6, 6)) < 0.5
    F = F | F.T | np.eye(6, dtype=bool)
    d = context_distance(Tensor(q), Tensor(k), allowed=F).data
    assert np.max(np.abs(np.tril(d) - loop_distance(q, k, F))) <= 1e-12


def test_score_hand_value_and_small_theta_limit():
    q = Tensor([[2.0, 0.0]])
    k = Tensor([[2.0 * math.sqrt(2.0), 0.0]])
    s = monotonic_scores(q, k, Tensor([[1.0]]), Tensor(math.log(2.0))).data
    assert s[0, 0] == pytest.approx(2.0, rel=1e-15)
    rng = np.random.default_rng(0)
    qq, kk = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    dist = context_distance(Tensor(qq), Tensor(kk))
    s = monotonic_scores(Tensor(qq), Tensor(kk), dist, Tensor(1e-12)).data
    assert np.allclose(s, qq @ kk.T / 2.0, rtol=1e-10, atol=1e-12)


def test_scores_reject_non_positive_theta():
    with pytest.raises(ValueError):
        monotonic_scores(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))), Tensor(np.zeros((2, 2))), Tensor(0.0))


@pytest.mark.parametrize("seed", range(5))
def test_scores_match_loop(seed):
    rng = np.random.default_rng(100 + seed)
    q, k = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    theta = float(rng.uniform(0.05, 3.0))
    dist = context_distance(Tensor(q), Tensor(k))
    s = monotonic_scores(Tensor(q), Tensor(k), dist, Tensor(theta)).data
    assert np.max(np.abs(s - loop_scores(q, k, dist.data, theta))) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 5.0), st.lists(st.integers(0, 80), min_size=2, max_size=8, unique=True),
       st.floats(0.1, 5.0))
def test_scores_decrease_with_distance(theta, steps, dot):
    dists = np.sort(np.array(steps, dtype=float)) / 4.0
    n = len(dists)
    q = Tensor(np.full((n, 1), dot))
    k = Tensor(np.ones((n, 1)))
    s = monotonic_scores(q, k, Tensor(np.tile(dists, (n, 1))), Tensor(theta)).data[0]
    unfloored = dists[1:] * theta < 60
    assert np.all(np.diff(s)[unfloored] < 0)
    assert np.all(np.diff(s) <= 0)


def _weights(logits, dist, theta):
    s = Tensor(np.exp(-theta * dist) * logits)
    return T.masked_softmax(s, np.ones(s.shape, dtype=bool)).data


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.05, 4.0), min_size=2, max_size=7), st.floats(0.01, 3.0), st.floats(0.0, 3.0))
def test_larger_theta_never_raises_farthest_weight_relative_to_current(logits, theta, extra):
    logits = np.array(logits)
    n = logits.size
    dist = np.arange(n, dtype=float)[::-1]   # position n-1 is the query itself, distance 0
    lo, hi = _weights(logits, dist, theta), _weights(logits, dist, theta + extra)
    assert hi[0] / hi[-1] <= lo[0] / lo[-1] * (1 + 1e-12)


def test_farthest_weight_alone_can_rise_with_theta():
    # Nearer positions lose score faster than the far one here, so after
    # renormalisation the far weight grows; only the ratio above is monotone.
    logits = np.array([0.1, 3.0, 0.1])
    dist = np.array([5.0, 1.0, 0.0])
    assert _weights(logits, dist, 2.0)[0] > _weights(logits, dist, 0.1)[0]


# ---------------------------------------------------------------- masked attention


def test_masked_attention_singleton_allowed_set():
    scores = Tensor(np.zeros((3, 3)))
    F = np.array([[1, 0, 1], [0, 1, 0], [1, 0, 1]])
    values = Tensor(np.arange(6.0).reshape(3, 2))
    out, w = masked_attention(values, scores, causal_mask(3, strict=True), F)
    assert w.data[2].tolist() == [1.0, 0.0, 0.0]
    assert np.array_equal(out.data[2], values.data[0])


def test_fully_masked_row_is_zero_and_counted():
    counter = MaskCounter()
    F = np.eye(3, dtype=int)
    out, w = masked_attention(Tensor(np.ones((3, 2))), Tensor(np.zeros((3, 3))), causal_mask(3, strict=True), F,
                              counter)
    assert np.all(out.data == 0)
    assert counter.fully_masked_rows == 3


def test_all_ones_relevance_equals_no_mask():
    rng = np.random.default_rng(4)
    s, v = Tensor(rng.normal(size=(5, 5))), Tensor(rng.normal(size=(5, 3)))
    a, _ = masked_attention(v, s, causal_mask(5), np.ones((5, 5)))
    b, _ = masked_attention(v, s, causal_mask(5), None)
    assert np.array_equal(a.data, b.data)


def test_mask_shape_mismatch():
    with pytest.raises(ShapeError):
        masked_attention(Tensor(np.ones((3, 2))), Tensor(np.zeros((3, 3))), causal_mask(4), None)
    with pytest.raises(ShapeError):
        masked_attention(Tensor(np.ones((3, 2))), Tensor(np.zeros((3, 3))), causal_mask(3), np.ones((2, 2)))


# ---------------------------------------------------------------- multi-head


def _params(rng, d, h, theta=None):
    p = AttentionParams.init(d, h, rng)
    if theta is not None:
        p.theta_raw.data = np.asarray(theta, dtype=float)
    return p


def _theta_raw(theta):
    return np.log(np.expm1(theta))


@pytest.mark.parametrize("strict", [False, True])
@pytest.mark.parametrize("fused", [False, True])
def test_two_heads_match_loop_reference(strict, fused):
    rng = np.random.default_rng(11)
    t, d = 4, 6
    p = _params(rng, d, 2, _theta_raw(np.array([0.3, 1.7])))
    x, vals = rng.normal(size=(t, d)), rng.normal(size=(t, d))
    F = np.array([[1, 0, 1, 1], [0, 1, 0, 1], [1, 0, 1, 0], [1, 1, 0, 1]])
    out = multi_head_route_attention(Tensor(x), p, AttentionContext(F, strict=strict, fused=fused),
                                     values=Tensor(vals)).out.data
    ref = loop_attention(x, x, vals, p.wq.data, p.wk.data, p.wv.data, p.wo.data,
                         p.theta().data, F.astype(bool), strict)
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_single_head_tiny_theta_all_ones_is_scaled_dot_product():
    rng = np.random.default_rng(12)
    t, d = 5, 4
    p = _params(rng, d, 1, _theta_raw(np.array([1e-12])))
    x = rng.normal(size=(t, d))
    out = multi_head_route_attention(Tensor(x), p, AttentionContext(np.ones((t, t)))).out.data
    q, k, v = x @ p.wq.data, x @ p.wk.data, x @ p.wv.data
    s = q @ k.T / math.sqrt(d) + np.where(causal_mask(t), 0.0, -np.inf)
    a = np.exp(s - s.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    assert np.allclose(out, a @ v @ p.wo.data, rtol=1e-9, atol=1e-11)


@pytest.mark.parametrize("t", [1, 2, 7])
def test_output_shape(t):
    rng = np.random.default_rng(t)
    p = _params(rng, 8, 4)
    assert multi_head_route_attention(Tensor(rng.normal(size=(t, 8))), p,
                                      AttentionContext(None)).out.shape == (t, 8)
    assert multi_head_route_attention(Tensor(rng.normal(size=(3, t, 8))), p,
                                      AttentionContext(None)).out.shape == (3, t, 8)


@pytest.mark.parametrize("strict", [False, True])
def test_fused_and_composite_paths_agree_in_value_and_gradient(strict):
    rng = np.random.default_rng(5)
    b, t, d = 3, 7, 8
    F = (rng.random((b, t, t)) < 0.5)
    F = (F | F.transpose(0, 2, 1) | np.eye(t, dtype=bool)).astype(np.int8)
    x = rng.normal(size=(b, t, d))
    probe = rng.normal(size=(b, t, d))
    results = []
    for fused in (True, False):
        p = _params(np.random.default_rng(9), d, 2, np.array([0.2, -0.5]))
        xt = Tensor(x.copy(), requires_grad=True)
        out = multi_head_route_attention(xt, p, AttentionContext(F, strict=strict, fused=fused)).out
        T.sum_(out * Tensor(probe)).backward()
        results.append((out.data, xt.grad, p.wq.grad, p.wk.grad, p.theta_raw.grad))
    for a, c in zip(*results):
        assert np.allclose(a, c, rtol=1e-10, atol=1e-12)


def test_attention_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    t, d = 5, 4
    p = _params(rng, d, 2, np.array([0.4, -0.3]))
    F = np.array([[1, 1, 0, 1, 0], [1, 1, 1, 0, 0], [0, 1, 1, 1, 1], [1, 0, 1, 1, 0], [0, 0, 1, 0, 1]])
    x = Tensor(rng.normal(size=(t, d)), requires_grad=True)
    probe = Tensor(rng.normal(size=(t, d)))

    def loss():
        return T.sum_(multi_head_route_attention(x, p, AttentionContext(F, strict=True)).out * probe)
    for leaf in (x, p.wq, p.wk, p.wv, p.wo, p.theta_raw):
        leaf.grad = None
    loss().backward()
    for leaf in (x, p.wq, p.wk, p.wv, p.wo, p.theta_raw):
        assert grad_close(leaf.grad, numeric_grad(loss, leaf))


def test_counter_ignores_padding_rows():
    rng = np.random.default_rng(8)
    p = _params(rng, 4, 2)
    counter = MaskCounter()
    valid = np.array([[True, True, False]])
    multi_head_route_attention(Tensor(rng.normal(size=(1, 3, 4))), p,
                               AttentionContext(np.eye(3)[None], strict=True, counter=counter, valid=valid))
    assert counter.fully_masked_rows == 2


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        AttentionParams.init(6, 4, np.random.default_rng(0))
