import math

import pytest
import torch

from crossrec.attention import (
    ALL_STREAMS,
    StreamEncoder,
    StreamId,
    causal_mask,
    encode_stream,
    scaled_dot_attention,
)


def dense_attention(Q, K, V):
    """Position by position attention with explicit loops."""
    n, d_k = Q.shape
    out = torch.zeros_like(V)
    for i in range(n):
        scores = [float(Q[i] @ K[j]) / math.sqrt(d_k) for j in range(i + 1)]
        top = max(scores)
        weights = [math.exp(s - top) for s in scores]
        total = sum(weights)
        for j in range(i + 1):
            out[i] += weights[j] / total * V[j]
    return out


@pytest.mark.parametrize("n,d", [(1, 2), (3, 4), (6, 8)])
def test_matches_dense_oracle(n, d):
    g = torch.Generator().manual_seed(n * 10 + d)
    Q, K, V = (torch.randn(n, d, generator=g, dtype=torch.float64) for _ in range(3))
    assert torch.allclose(scaled_dot_attention(Q, K, V), dense_attention(Q, K, V), atol=1e-10)


def test_weights_are_causal_rows():
    g = torch.Generator().manual_seed(0)
    Q, K, V = (torch.randn(5, 4, generator=g) for _ in range(3))
    _, weights = scaled_dot_attention(Q, K, V, return_weights=True)
    assert torch.all(weights.masked_select(causal_mask(5)) == 0)
    assert torch.allclose(weights.sum(dim=-1), torch.ones(5))


def test_causal_mask():
    assert causal_mask(3).tolist() == [[False, True, True], [False, False, True], [False, False, False]]


def test_encoder_is_causal():
    """Changing a later token leaves the outputs at earlier positions alone."""
    encoder = StreamEncoder(4, heads=2, max_len=6, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    tokens = torch.randn(5, 4, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    changed = tokens.clone()
    changed[3] += 10.0
    before, after = encoder(tokens), encoder(changed)
    assert torch.allclose(before[:3], after[:3])
    assert not torch.allclose(before[3:], after[3:])


def test_encoder_batched_equals_single():
    encoder = StreamEncoder(4, heads=2, max_len=6, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    tokens = torch.randn(2, 5, 4, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    batched = encoder(tokens)
    assert torch.allclose(batched[1], encoder(tokens[1]))


def test_encoder_rejects_long_input():
    encoder = StreamEncoder(4, heads=2, max_len=3)
    with pytest.raises(ValueError, match="max_len"):
        encoder(torch.zeros(4, 4))


def test_encoder_heads_divide_dim():
    with pytest.raises(ValueError):
        StreamEncoder(5, heads=2)


def test_encode_stream_truncates():
    """Only the last `max_len` tokens reach the encoder."""
    encoder = StreamEncoder(4, heads=2, max_len=3, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    tokens = torch.randn(7, 4, generator=torch.Generator().manual_seed(6), dtype=torch.float64)
    stream = StreamId("X", "id")
    assert torch.allclose(encode_stream(stream, tokens, encoder), encode_stream(stream, tokens[-3:], encoder))


def test_encode_empty_stream():
    with pytest.raises(ValueError, match="empty stream"):
        encode_stream(StreamId("Y", "tag"), torch.zeros(0, 4), StreamEncoder(4))


def stepwise_last_output(encoder, tokens):
    """The final position's output, one head and one earlier position at a time."""
    n, d_k = tokens.shape[0], encoder.d_k
    x = tokens + encoder.pos[:n]
    q, k, v = x @ encoder.w_q, x @ encoder.w_k, x @ encoder.w_v
    merged = []
    for h in range(encoder.heads):
        cols = slice(h * d_k, (h + 1) * d_k)
        scores = [float(q[-1, cols] @ k[j, cols]) / math.sqrt(d_k) for j in range(n)]
        top = max(scores)
        weights = [math.exp(s - top) for s in scores]
        total = sum(weights)
        merged.append(sum(w / total * v[j, cols] for j, w in enumerate(weights)))
    return torch.cat(merged) @ encoder.w_o


@pytest.mark.parametrize("seed", range(50))
def test_encode_stream_matches_stepwise(seed):
    """Random streams of up to six tokens with one or two heads match the stepwise computation."""
    g = torch.Generator().manual_seed(seed)
    heads = 1 + seed % 2
    dim = (2, 4, 6, 8)[(seed // 2) % 4]
    n = 1 + (seed // 3) % 6
    encoder = StreamEncoder(dim, heads=heads, max_len=6, generator=g, dtype=torch.float64)
    tokens = torch.randn(n, dim, generator=g, dtype=torch.float64)
    stream = StreamId("merged", "id")
    with torch.no_grad():
        out = encode_stream(stream, tokens, encoder)
        assert torch.allclose(out, stepwise_last_output(encoder, tokens), atol=1e-6, rtol=0)
        full = encoder(tokens)
        for k in range(1, n + 1):
            changed = tokens.clone()
            changed[k:] += 5.0
            assert torch.allclose(encode_stream(stream, changed[:k], encoder), full[k - 1], atol=1e-12)
            assert torch.allclose(encoder(changed)[k - 1], full[k - 1], atol=1e-12)


def test_stream_ids():
    assert len(ALL_STREAMS) == 12
    assert len({s.key for s in ALL_STREAMS}) == 12
    assert str(StreamId("merged", "img")) == "merged_img"
    with pytest.raises(ValueError):
        StreamId("Z", "id")
    with pytest.raises(ValueError):
        StreamId("X", "audio")
