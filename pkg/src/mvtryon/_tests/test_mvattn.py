import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mvtryon.camera import encode_camera_rotation
from mvtryon.exceptions import DimensionError, InvalidCorrelationError
from mvtryon.mvattn import (
    AttentionParams,
    MlpParams,
    build_condition_tokens,
    cross_attention,
    cross_attention_grad,
    modulation_matrix,
    mv_attention,
    mv_attention_grad,
    scaled_dot_product_attention,
)


def generator(seed=0):
    return torch.Generator().manual_seed(seed)


def randn(*shape, seed=0):
    return torch.randn(*shape, generator=generator(seed), dtype=torch.float64)


def random_correlation(m, seed=0):
    values = torch.rand(m, m, generator=generator(seed), dtype=torch.float64)
    C = (values + values.T) / 2
    C.fill_diagonal_(1.0)
    return C


def empty_garment(c):
    return torch.zeros(0, c, dtype=torch.float64)


def test_single_view_is_self_attention():
    params = AttentionParams.random(4, 3, generator=generator(1))
    features = randn(1, 5, 4)
    out = mv_attention(
        features,
        empty_garment(4),
        empty_garment(4),
        torch.ones(1, 1, dtype=torch.float64),
        params,
    )
    x = features[0]
    logits = (x @ params.W_Q) @ (x @ params.W_K).T / math.sqrt(3)
    expected = torch.softmax(logits, dim=-1) @ (x @ params.W_V)
    assert torch.equal(out[0], expected)


def test_all_ones_correlation_is_standard_attention():
    params = AttentionParams.random(4, 3, generator=generator(2))
    features = randn(3, 2, 4, seed=1)
    front, back = randn(2, 4, seed=2), randn(1, 4, seed=3)
    out = mv_attention(
        features, front, back, torch.ones(3, 3, dtype=torch.float64), params
    )
    tokens = features.reshape(6, 4)
    context = torch.cat([tokens, front, back])
    expected = scaled_dot_product_attention(
        tokens @ params.W_Q, context @ params.W_K, context @ params.W_V
    )
    assert torch.equal(out.reshape(6, -1), expected)


def test_zero_queries_average_values():
    params = AttentionParams.random(4, 3, generator=generator(3))
    params.W_Q.zero_()
    features = randn(2, 3, 4, seed=4)
    front = randn(1, 4, seed=5)
    out = mv_attention(
        features,
        front,
        empty_garment(4),
        torch.ones(2, 2, dtype=torch.float64),
        params,
    )
    context = torch.cat([features.reshape(6, 4), front])
    mean = (context @ params.W_V).mean(dim=0)
    torch.testing.assert_close(out, mean.expand_as(out))


def test_hand_computed_two_views():
    W_Q = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    W_K = torch.tensor([[1.0, 1.0], [0.0, 1.0]], dtype=torch.float64)
    W_V = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
    params = AttentionParams(W_Q, W_K, W_V)
    f1, f2, g = [1.0, 0.5], [-0.5, 2.0], [0.25, -1.0]
    features = torch.tensor([[f1], [f2]], dtype=torch.float64)
    garment = torch.tensor([g], dtype=torch.float64)
    c = 0.3
    C = torch.tensor([[1.0, c], [c, 1.0]], dtype=torch.float64)
    out = mv_attention(features, garment, empty_garment(2), C, params)

    def project(x, W):
        return [sum(x[a] * W[a][b] for a in range(2)) for b in range(2)]

    Wq, Wk, Wv = W_Q.tolist(), W_K.tolist(), W_V.tolist()
    keys = [project(x, Wk) for x in (f1, f2, g)]
    values = [project(x, Wv) for x in (f1, f2, g)]
    for i, x in enumerate((f1, f2)):
        q = project(x, Wq)
        weights = [1.0 if i == 0 else c, c if i == 0 else 1.0, 1.0]
        logits = [
            w * sum(q[a] * k[a] for a in range(2)) / math.sqrt(2)
            for w, k in zip(weights, keys)
        ]
        exps = [math.exp(v - max(logits)) for v in logits]
        total = sum(exps)
        expected = [
            sum(e / total * v[b] for e, v in zip(exps, values))
            for b in range(2)
        ]
        np.testing.assert_allclose(out[i, 0].numpy(), expected, rtol=1e-12)


def test_identity_correlation_decouples_views():
    params = AttentionParams.random(4, 4, generator=generator(4))
    features = randn(3, 2, 4, seed=6)
    front, back = randn(2, 4, seed=7), randn(2, 4, seed=8)
    together = mv_attention(
        features, front, back, torch.eye(3, dtype=torch.float64), params
    )
    for i in range(3):
        alone = mv_attention(
            features[i : i + 1],
            front,
            back,
            torch.ones(1, 1, dtype=torch.float64),
            params,
        )
        torch.testing.assert_close(together[i], alone[0], rtol=0, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 3))
def test_rows_sum_to_one(seed, m, n):
    params = AttentionParams.random(3, 2, generator=generator(seed))
    features = randn(m, n, 3, seed=seed)
    _, weights = mv_attention(
        features,
        randn(1, 3, seed=seed + 1),
        randn(2, 3, seed=seed + 2),
        random_correlation(m, seed),
        params,
        return_weights=True,
    )
    torch.testing.assert_close(
        weights.sum(dim=-1),
        torch.ones(m * n, dtype=torch.float64),
        rtol=0,
        atol=1e-9,
    )
    _, weights = cross_attention(
        features[0], randn(4, 3, seed=seed), params, return_weights=True
    )
    torch.testing.assert_close(
        weights.sum(dim=-1),
        torch.ones(n, dtype=torch.float64),
        rtol=0,
        atol=1e-9,
    )


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.permutations([0, 1, 2, 3]))
def test_view_permutation_equivariance(seed, permutation):
    params = AttentionParams.random(3, 3, generator=generator(seed))
    features = randn(4, 2, 3, seed=seed)
    front, back = randn(1, 3, seed=seed + 1), randn(1, 3, seed=seed + 2)
    C = random_correlation(4, seed)
    p = torch.tensor(permutation)
    out = mv_attention(features, front, back, C, params)
    permuted = mv_attention(features[p], front, back, C[p][:, p], params)
    torch.testing.assert_close(permuted, out[p], rtol=1e-12, atol=1e-12)


def test_modulation_is_monotone_in_correlation():
    params = AttentionParams.random(3, 3, generator=generator(5))
    features = randn(2, 2, 3, seed=9)
    q = features.reshape(4, 3) @ params.W_Q
    k = features.reshape(4, 3) @ params.W_K
    raw = q @ k.T / math.sqrt(3)
    logits = []
    for c in (0.2, 0.5, 0.9):
        C = torch.tensor([[1.0, c], [c, 1.0]], dtype=torch.float64)
        logits.append(raw * modulation_matrix(C, 2, 0))
    cross = raw[:2, 2:]
    for low, high in zip(logits, logits[1:]):
        lo, hi = low[:2, 2:], high[:2, 2:]
        assert torch.all(hi[cross > 0] > lo[cross > 0])
        assert torch.all(hi[cross < 0] < lo[cross < 0])


def test_correlation_validation():
    params = AttentionParams.random(3, 2, generator=generator(6))
    features = randn(2, 1, 3)
    garment = empty_garment(3)
    bad = [
        torch.tensor([[1.0, 0.5], [0.2, 1.0]]),
        torch.tensor([[1.0, 1.5], [1.5, 1.0]]),
        torch.tensor([[0.9, 0.5], [0.5, 1.0]]),
        torch.ones(3, 3),
    ]
    for C in bad:
        with pytest.raises(InvalidCorrelationError):
            mv_attention(features, garment, garment, C.double(), params)
    with pytest.raises(DimensionError):
        mv_attention(
            features, empty_garment(2), garment, torch.eye(2).double(), params
        )


def test_condition_tokens():
    embed = randn(4, 6)
    token = encode_camera_rotation(np.eye(3), 1)
    bias = randn(6, seed=1)
    mlp = MlpParams(
        torch.zeros(18, 5, dtype=torch.float64),
        torch.zeros(5, dtype=torch.float64),
        torch.zeros(5, 6, dtype=torch.float64),
        bias,
    )
    Y = build_condition_tokens(embed, token, mlp)
    assert Y.shape == (5, 6)
    assert torch.equal(Y[:4], embed)
    assert torch.equal(Y[4], bias)

    with pytest.raises(DimensionError):
        build_condition_tokens(randn(4, 7), token, mlp)


def test_condition_tokens_scalar_oracle():
    W1, b1 = randn(18, 3, seed=2), randn(3, seed=3)
    W2, b2 = randn(3, 2, seed=4), randn(2, seed=5)
    token = encode_camera_rotation(np.eye(3), 1)
    Y = build_condition_tokens(randn(1, 2), token, MlpParams(W1, b1, W2, b2))
    x = token.values
    hidden = [
        math.tanh(
            sum(x[a] * W1[a, h].item() for a in range(18)) + b1[h].item()
        )
        for h in range(3)
    ]
    expected = [
        sum(hidden[h] * W2[h, o].item() for h in range(3)) + b2[o].item()
        for o in range(2)
    ]
    np.testing.assert_allclose(Y[1].numpy(), expected, rtol=1e-12)


def test_cross_attention_examples():
    params = AttentionParams.random(3, 2, key_width=5, generator=generator(7))
    H = randn(4, 3)
    single = randn(1, 5, seed=1)
    out = cross_attention(H, single, params)
    torch.testing.assert_close(out, (single @ params.W_V).expand(4, -1))

    params.W_Q.zero_()
    pair = randn(2, 5, seed=2)
    out = cross_attention(H, pair, params)
    mean = (pair @ params.W_V).mean(dim=0)
    torch.testing.assert_close(out, mean.expand(4, -1))


def test_cross_attention_scalar_oracle():
    params = AttentionParams.random(2, 2, key_width=3, generator=generator(8))
    H, Y = randn(2, 2, seed=3), randn(3, 3, seed=4)
    out = cross_attention(H, Y, params)
    Wq, Wk, Wv = (w.tolist() for w in (params.W_Q, params.W_K, params.W_V))
    for i in range(2):
        h = H[i].tolist()
        q = [sum(h[a] * Wq[a][b] for a in range(2)) for b in range(2)]
        logits = []
        values = []
        for j in range(3):
            y = Y[j].tolist()
            k = [sum(y[a] * Wk[a][b] for a in range(3)) for b in range(2)]
            values.append(
                [sum(y[a] * Wv[a][b] for a in range(3)) for b in range(2)]
            )
            logits.append(sum(q[b] * k[b] for b in range(2)) / math.sqrt(2))
        exps = [math.exp(v) for v in logits]
        total = sum(exps)
        expected = [
            sum(e / total * v[b] for e, v in zip(exps, values))
            for b in range(2)
        ]
        np.testing.assert_allclose(out[i].numpy(), expected, rtol=1e-12)


def test_mv_attention_gradcheck():
    params = AttentionParams.random(2, 2, generator=generator(9))
    features = randn(2, 1, 2, seed=10).requires_grad_(True)
    front = randn(1, 2, seed=11).requires_grad_(True)
    C = torch.tensor([[1.0, 0.4], [0.4, 1.0]], dtype=torch.float64)
    leaves = [
        w.detach().clone().requires_grad_(True)
        for w in (params.W_Q, params.W_K, params.W_V)
    ]

    def fn(features, front, W_Q, W_K, W_V):
        return mv_attention(
            features,
            front,
            empty_garment(2),
            C,
            AttentionParams(W_Q, W_K, W_V),
        )

    assert torch.autograd.gradcheck(
        fn, (features, front, *leaves), eps=1e-6, atol=1e-8, rtol=1e-4
    )


def test_mv_attention_grad_matches_finite_differences():
    params = AttentionParams.random(2, 2, generator=generator(10))
    features = randn(2, 1, 2, seed=12)
    front = randn(1, 2, seed=13)
    back = empty_garment(2)
    C = torch.tensor([[1.0, 0.7], [0.7, 1.0]], dtype=torch.float64)
    upstream = randn(2, 1, 2, seed=14)
    grads = mv_attention_grad(features, front, back, C, params, upstream)

    def objective(x):
        return float(
            (mv_attention(x, front, back, C, params) * upstream).sum()
        )

    step = 1e-5
    numeric = torch.zeros_like(features)
    for index in np.ndindex(*features.shape):
        plus, minus = features.clone(), features.clone()
        plus[index] += step
        minus[index] -= step
        numeric[index] = (objective(plus) - objective(minus)) / (2 * step)
    torch.testing.assert_close(grads.features, numeric, rtol=1e-4, atol=1e-9)


def test_zero_upstream_gives_zero_gradients():
    params = AttentionParams.random(3, 2, generator=generator(11))
    features = randn(2, 2, 3)
    front = randn(1, 3, seed=1)
    upstream = torch.zeros(2, 2, 2, dtype=torch.float64)
    grads = mv_attention_grad(
        features, front, front, random_correlation(2), params, upstream
    )
    for name, value in grads.as_dict().items():
        assert torch.count_nonzero(value) == 0, name


def test_cross_attention_gradcheck():
    params = AttentionParams.random(3, 2, key_width=4, generator=generator(12))
    H = randn(2, 3, seed=15)
    Y = randn(3, 4, seed=16)
    upstream = randn(2, 2, seed=17)
    grads = cross_attention_grad(H, Y, params, upstream)
    leaves = [
        x.detach().clone().requires_grad_(True)
        for x in (H, Y, params.W_Q, params.W_K, params.W_V)
    ]
    out = cross_attention(leaves[0], leaves[1], AttentionParams(*leaves[2:]))
    expected = torch.autograd.grad((out * upstream).sum(), leaves)
    for value, reference in zip(grads.as_dict().values(), expected):
        torch.testing.assert_close(value, reference)
    assert torch.autograd.gradcheck(
        lambda H, Y: cross_attention(H, Y, params),
        (leaves[0], leaves[1]),
        eps=1e-6,
        atol=1e-8,
        rtol=1e-4,
    )
