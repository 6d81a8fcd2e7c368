"""
Causal multi-head self attention per (sequence, modality) stream, the per-modality
next item distributions and the losses built from them.
"""
import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from crossrec.embedding import cosine_similarity_scores, uniform_

SEQUENCES = ("X", "Y", "merged")
MODALITIES = ("id", "img", "tex", "tag")
FUSED = "fused"
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class StreamId:
    """One of the twelve (sequence, modality) pairs, or the optional fused stream."""

    sequence: str
    modality: str

    def __post_init__(self):
        if self.sequence not in SEQUENCES:
            raise ValueError(f"`sequence` must be one of {list(SEQUENCES)}, got '{self.sequence}'.")
        if self.modality not in MODALITIES + (FUSED,):
            raise ValueError(
                f"`modality` must be one of {list(MODALITIES + (FUSED,))}, got '{self.modality}'."
            )

    @property
    def key(self):
        return f"{self.sequence}_{self.modality}"

    def __str__(self):
        return self.key


ALL_STREAMS = tuple(StreamId(s, m) for s in SEQUENCES for m in MODALITIES)
FUSED_STREAM = StreamId("merged", FUSED)


def causal_mask(n, device=None):
    """Boolean `n x n` mask that is `True` strictly above the diagonal."""
    return torch.ones(n, n, dtype=torch.bool, device=device).triu(1)


def scaled_dot_attention(Q, K, V, causal=True, dropout=0.0, training=False, return_weights=False):
    """
    `softmax(Q K^T / sqrt(d_k) + mask) V` over the last two axes. With `causal` every
    position only attends to itself and the positions before it.

    Arguments:
        Q: queries of shape `(..., len, d_k)`
        K: keys of shape `(..., len, d_k)`
        V: values of shape `(..., len, d_k)`
        causal: mask out attention to later positions
        dropout: dropout rate applied to the attention weights while training
        training: whether dropout is active
        return_weights: also return the attention weights

    Usage:

    ```python
    import torch
    from crossrec.attention import scaled_dot_attention

    eye = torch.eye(2, dtype=torch.float64)
    out = scaled_dot_attention(eye, eye, eye)
    assert torch.allclose(out[0], eye[0])
    assert abs(out[1, 1].item() - 0.6698) < 1e-4
    ```
    """
    if Q.shape[-2] < 1:
        raise ValueError("`scaled_dot_attention` needs at least one position.")
    d_k = Q.shape[-1]
    scores = Q @ K.transpose(-2, -1) / math.sqrt(d_k)
    if causal:
        scores = scores.masked_fill(causal_mask(scores.shape[-1], scores.device), float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    weights_used = F.dropout(weights, p=dropout, training=training) if dropout > 0 else weights
    out = weights_used @ V
    if return_weights:
        return out, weights
    return out


class StreamEncoder(nn.Module):
    """
    Single causal multi-head self-attention layer with learnable positional embeddings.
    Projections are `dim x dim` matrices applied as `x @ W`.
    """

    def __init__(self, dim, heads=2, max_len=50, generator=None, dtype=torch.float32):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"Stream dim {dim} is not divisible by {heads} heads.")
        self.dim, self.heads, self.max_len = dim, heads, max_len
        self.w_q = nn.Parameter(uniform_(torch.empty(dim, dim, dtype=dtype), generator))
        self.w_k = nn.Parameter(uniform_(torch.empty(dim, dim, dtype=dtype), generator))
        self.w_v = nn.Parameter(uniform_(torch.empty(dim, dim, dtype=dtype), generator))
        self.w_o = nn.Parameter(uniform_(torch.empty(dim, dim, dtype=dtype), generator))
        self.pos = nn.Parameter(uniform_(torch.empty(max_len, dim, dtype=dtype), generator))

    @property
    def d_k(self):
        return self.dim // self.heads

    def _split(self, x):
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.heads, self.d_k).transpose(1, 2)

    def forward(self, tokens, dropout=0.0, training=False):
        """Maps `(batch, len, dim)` token embeddings to `(batch, len, dim)` outputs."""
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
        length = tokens.shape[1]
        if length > self.max_len:
            raise ValueError(f"Sequence of length {length} exceeds `max_len` {self.max_len}.")
        x = tokens + self.pos[:length]
        if dropout > 0:
            x = F.dropout(x, p=dropout, training=training)
        heads = scaled_dot_attention(
            self._split(x @ self.w_q),
            self._split(x @ self.w_k),
            self._split(x @ self.w_v),
            causal=True,
            dropout=dropout,
            training=training,
        )
        out = heads.transpose(1, 2).reshape(tokens.shape[0], length, self.dim) @ self.w_o
        return out[0] if squeeze else out


def encode_stream(stream, token_embeddings, encoder: StreamEncoder, dropout=0.0, training=False):
    """
    Encodes the token embeddings of one stream and returns the output at the final
    position. Sequences longer than the encoder's `max_len` keep their last items.

    Arguments:
        stream: the `StreamId` being encoded, used in error messages
        token_embeddings: `len x dim` modality embeddings of the sequence items
        encoder: the `StreamEncoder` of this stream
        dropout: dropout rate
        training: whether dropout is active
    """
    if token_embeddings.shape[0] == 0:
        raise ValueError(f"empty stream `{stream}`")
    tokens = token_embeddings[-encoder.max_len:]
    return encoder(tokens, dropout=dropout, training=training)[-1]


@dataclass
class PredictionDistribution:
    """
    Next item probabilities over one candidate catalog: `X`, `Y` or the union
    catalog `merged`.
    """

    domain: str
    probs: torch.Tensor

    def __post_init__(self):
        probs = self.probs.detach()
        if probs.dim() != 1:
            raise ValueError(f"`probs` must be a vector, got shape {tuple(probs.shape)}.")
        if (probs < 0).any() or abs(probs.sum().item() - 1.0) > 1e-6:
            raise ValueError(f"`probs` of `{self.domain}` is not a distribution, sums to {probs.sum().item()}.")

    def __len__(self):
        return self.probs.shape[0]


def modality_prediction(h, candidates, domain="X"):
    """
    `softmax` of the cosine similarities between a stream output and the candidate rows.

    Usage:

    ```python
    import torch
    from crossrec.attention import modality_prediction

    dist = modality_prediction(torch.tensor([1.0, 0.0]), torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
    assert abs(dist.probs[0].item() - 0.7311) < 1e-4
    ```
    """
    return PredictionDistribution(domain, torch.softmax(cosine_similarity_scores(h, candidates), dim=-1))


def fusion_weights(alphas, use_tags=True):
    """
    The modality weights of the prediction fusion. The tag prediction gets the residual
    `1 - a1 - a2 - a3`; without tags the three backbone weights are renormalised.
    """
    a1, a2, a3 = alphas
    if min(alphas) < 0 or a1 + a2 + a3 > 1 + 1e-12:
        raise ValueError(f"`alphas` must be non-negative and sum to at most 1, got {tuple(alphas)}.")
    weights = {"id": a1, "img": a2, "tex": a3, "tag": max(0.0, 1.0 - a1 - a2 - a3)}
    if use_tags:
        return weights
    total = a1 + a2 + a3
    if total <= 0:
        raise ValueError("Without tags the `alphas` must not all be zero.")
    return {m: weights[m] / total for m in ("id", "img", "tex")}


def fuse_predictions(p_id, p_img, p_tex, p_tag, alphas):
    """
    Convex combination of the four modality predictions.

    Usage:

    ```python
    import torch
    from crossrec.attention import PredictionDistribution, fuse_predictions

    p = PredictionDistribution("X", torch.tensor([0.25, 0.75]))
    fused = fuse_predictions(p, p, p, p, alphas=(0.4, 0.2, 0.2))
    assert torch.allclose(fused.probs, p.probs)
    ```
    """
    parts = {"id": p_id, "img": p_img, "tex": p_tex, "tag": p_tag}
    domains = {p.domain for p in parts.values()}
    sizes = {len(p) for p in parts.values()}
    if len(domains) != 1 or len(sizes) != 1:
        raise ValueError(f"Predictions must share a catalog, got domains {sorted(domains)} and sizes {sorted(sizes)}.")
    weights = fusion_weights(alphas)
    probs = sum(weights[m] * parts[m].probs for m in MODALITIES)
    return PredictionDistribution(p_id.domain, probs)


def sequence_nll(distributions, targets: Sequence[int]):
    """
    Summed negative log-likelihood of the targets, one distribution per position.
    Probabilities are clamped at 1e-12 before the log.

    Arguments:
        distributions: list of `PredictionDistribution` or a `positions x catalog` tensor
        targets: catalog index of the true next item at every position
    """
    if isinstance(distributions, torch.Tensor):
        probs = distributions
    else:
        probs = torch.stack([d.probs for d in distributions]) if distributions else torch.zeros(0, 0)
    if probs.shape[0] != len(targets):
        raise ValueError(f"Got {probs.shape[0]} distributions for {len(targets)} targets.")
    if len(targets) == 0:
        return torch.zeros((), dtype=probs.dtype)
    index = torch.as_tensor(list(targets), dtype=torch.long)
    if (index < 0).any() or (index >= probs.shape[-1]).any():
        raise ValueError(f"Targets {list(targets)} are not all inside a catalog of {probs.shape[-1]} items.")
    picked = probs.gather(-1, index.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).sum()


def total_loss(L_X, L_Y, L_XY, lambdas):
    """`L_X + l1 * L_Y + l2 * L_XY`, the domain balanced training objective."""
    l1, l2 = lambdas
    if l1 < 0 or l2 < 0:
        raise ValueError(f"`lambdas` must be non-negative, got {tuple(lambdas)}.")
    return L_X + l1 * L_Y + l2 * L_XY
