import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crossrec.attention import (
    PredictionDistribution,
    fuse_predictions,
    fusion_weights,
    modality_prediction,
    sequence_nll,
    total_loss,
)


def dist(values, domain="X"):
    return PredictionDistribution(domain, torch.tensor(values, dtype=torch.float64))


def test_prediction_is_distribution():
    g = torch.Generator().manual_seed(0)
    p = modality_prediction(torch.randn(6, generator=g), torch.randn(9, 6, generator=g), domain="Y")
    assert len(p) == 9
    assert abs(p.probs.sum().item() - 1) < 1e-6
    assert (p.probs > 0).all()


def test_prediction_scale_invariant():
    """Cosine scores ignore the norm of the query and of the candidates."""
    g = torch.Generator().manual_seed(1)
    h, E = torch.randn(4, generator=g, dtype=torch.float64), torch.randn(5, 4, generator=g, dtype=torch.float64)
    base = modality_prediction(h, E).probs
    assert torch.allclose(modality_prediction(3 * h, 0.5 * E).probs, base)


@settings(max_examples=10000, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    dim=st.integers(1, 16),
    items=st.integers(1, 50),
    scale=st.floats(1e-3, 1e3),
    alphas=st.tuples(*[st.floats(0, 1 / 3)] * 3),
)
def test_random_predictions_are_distributions(seed, dim, items, scale, alphas):
    """Every modality prediction and their fusion are distributions, and rescaling `h` keeps the best item."""
    g = torch.Generator().manual_seed(seed)
    h = torch.randn(dim, generator=g, dtype=torch.float64)
    parts = [modality_prediction(h, torch.randn(items, dim, generator=g, dtype=torch.float64)) for _ in range(4)]
    for p in parts:
        assert abs(p.probs.sum().item() - 1) <= 1e-6
        assert (p.probs >= 0).all()
    fused = fuse_predictions(*parts, alphas=alphas)
    assert abs(fused.probs.sum().item() - 1) <= 1e-6
    assert (fused.probs >= 0).all()
    E = torch.randn(items, dim, generator=g, dtype=torch.float64)
    base, scaled = modality_prediction(h, E).probs, modality_prediction(scale * h, E).probs
    assert torch.allclose(scaled, base, atol=1e-12)
    assert scaled[base.argmax()] >= scaled.max() - 1e-12


@pytest.mark.parametrize("probs", [[0.5, 0.6], [1.2, -0.2], [[0.5, 0.5]]])
def test_invalid_distribution(probs):
    with pytest.raises(ValueError):
        dist(probs)


def test_fuse_examples():
    """Identical inputs fuse to themselves; distinct inputs mix with the modality weights."""
    p = dist([0.25, 0.75])
    assert torch.allclose(fuse_predictions(p, p, p, p, (0.4, 0.2, 0.2)).probs, p.probs)
    one, two = dist([1.0, 0.0]), dist([0.0, 1.0])
    fused = fuse_predictions(one, two, two, one, (0.4, 0.2, 0.2))
    assert torch.allclose(fused.probs, torch.tensor([0.6, 0.4], dtype=torch.float64))


def test_fuse_needs_same_catalog():
    with pytest.raises(ValueError):
        fuse_predictions(dist([1.0, 0.0]), dist([1.0, 0.0], "Y"), dist([1.0, 0.0]), dist([1.0, 0.0]), (0.4, 0.2, 0.2))
    with pytest.raises(ValueError):
        fuse_predictions(dist([1.0, 0.0]), dist([1.0]), dist([1.0, 0.0]), dist([1.0, 0.0]), (0.4, 0.2, 0.2))


@pytest.mark.parametrize(
    "alphas,use_tags,expected",
    [
        ((0.4, 0.2, 0.2), True, {"id": 0.4, "img": 0.2, "tex": 0.2, "tag": 0.2}),
        ((0.4, 0.2, 0.2), False, {"id": 0.5, "img": 0.25, "tex": 0.25}),
        ((0.5, 0.25, 0.25), True, {"id": 0.5, "img": 0.25, "tex": 0.25, "tag": 0.0}),
    ],
)
def test_fusion_weights(alphas, use_tags, expected):
    weights = fusion_weights(alphas, use_tags)
    assert weights == pytest.approx(expected)
    assert math.fsum(weights.values()) == pytest.approx(1.0)


@pytest.mark.parametrize("alphas", [(0.5, 0.5, 0.5), (-0.1, 0.5, 0.5)])
def test_fusion_weights_invalid(alphas):
    with pytest.raises(ValueError):
        fusion_weights(alphas)


def test_nll_uniform():
    """Uniform predictions over four items cost ln 4 per position."""
    uniform = dist([0.25] * 4)
    assert sequence_nll([uniform], [2]).item() == pytest.approx(math.log(4))
    assert sequence_nll([uniform, uniform], [0, 3]).item() == pytest.approx(2 * math.log(4))


def test_nll_clamps_zero():
    assert sequence_nll([dist([1.0, 0.0])], [1]).item() == pytest.approx(-math.log(1e-12))


def test_nll_empty_and_errors():
    assert sequence_nll([], []).item() == 0
    with pytest.raises(ValueError):
        sequence_nll([dist([0.5, 0.5])], [2])
    with pytest.raises(ValueError):
        sequence_nll([dist([0.5, 0.5])], [0, 1])


def test_total_loss():
    assert total_loss(1.0, 2.0, 3.0, (0.3, 0.1)) == pytest.approx(1.9)
    with pytest.raises(ValueError):
        total_loss(1.0, 2.0, 3.0, (-0.3, 0.1))
