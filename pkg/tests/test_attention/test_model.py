from dataclasses import replace

import pytest
import torch

from crossrec.attention import FUSED_STREAM, StreamId
from crossrec.errors import ConfigError, NonFiniteLossError
from crossrec.interactions import UserSequences
from crossrec.model import (
    CrossDomainModel,
    Hyperparams,
    assemble_batch,
    encode_all_streams,
    load_checkpoint,
    save_checkpoint,
    score_inference,
)


def build(hyper, features):
    return CrossDomainModel(hyper, features.catalog.sizes, len(features.vocabulary)).bind(features)


@pytest.mark.parametrize(
    "changes,streams",
    [
        ({}, 12),
        ({"use_tags": False}, 9),
        ({"fused_stream": True}, 13),
        ({"attention": "shared"}, 1),
    ],
)
def test_streams(toy_hyper, toy_features, changes, streams):
    model = build(replace(toy_hyper, **changes), toy_features)
    assert len(model.streams) == streams
    assert set(model.encoders) == {s.key for s in model.streams}


def test_registry(toy_model):
    """Only learnable tensors are registered, frozen vectors and tag weights are buffers."""
    names = list(toy_model.registry())
    assert names[:2] == ["E_id", "E_tag"]
    assert "encoders.merged_tag.pos" in names
    assert not any(n in names for n in ("img", "tex", "tag_w"))
    assert "img" not in toy_model.state_dict()


def test_bind_checks(toy_hyper, toy_features):
    with pytest.raises(ValueError, match="catalog sizes"):
        CrossDomainModel(toy_hyper, (3, 4), 4).bind(toy_features)
    with pytest.raises(ValueError, match="tags"):
        CrossDomainModel(toy_hyper, (4, 4), 5).bind(toy_features)
    with pytest.raises(ValueError, match="e="):
        CrossDomainModel(replace(toy_hyper, e=4), (4, 4), 4).bind(toy_features)


def test_unbound(toy_hyper, toy_users):
    with pytest.raises(RuntimeError, match="bind"):
        CrossDomainModel(toy_hyper, (4, 4), 4).objective(toy_users)


def test_assemble_batch_domain_targets(toy_catalog, toy_users):
    """Domain Y targets are local indices, merged targets are global ones."""
    batch = assemble_batch(toy_users[:1], "Y", toy_catalog)
    assert batch.items.tolist() == [[4, 5]]
    assert batch.targets.tolist() == [[1, 2]]
    merged = assemble_batch(toy_users[:1], "merged", toy_catalog)
    assert merged.targets[0, :3].tolist() == [4, 1, 5]
    assert merged.positions == 6


def test_assemble_batch_padding_and_truncation(toy_catalog):
    short = UserSequences.from_merged("s", [("a0", 0), ("a1", 0)])
    long = UserSequences.from_merged("l", [(f"a{i % 4}", 0) for i in range(6)])
    batch = assemble_batch([short, long], "X", toy_catalog, max_len=3)
    assert batch.lengths.tolist() == [1, 3]
    assert batch.items.tolist() == [[0, 0, 0], [2, 3, 0]]
    assert batch.targets.tolist() == [[1, -1, -1], [3, 0, 1]]
    inputs = assemble_batch([long], "X", toy_catalog, max_len=3, teacher_forcing=False)
    assert inputs.items.tolist() == [[3, 0, 1]]


def test_assemble_batch_bad_sequence(toy_catalog, toy_users):
    with pytest.raises(ValueError):
        assemble_batch(toy_users, "Z", toy_catalog)


@pytest.mark.parametrize("sequence,size", [("X", 4), ("Y", 4), ("merged", 8)])
def test_sequence_distributions(toy_model, toy_catalog, toy_users, sequence, size):
    batch = assemble_batch(toy_users, sequence, toy_catalog)
    probs = toy_model.sequence_distributions(sequence, batch.items)
    assert probs.shape == (3, batch.items.shape[1], size)
    assert torch.allclose(probs.sum(dim=-1), torch.ones(probs.shape[:2], dtype=torch.float64))
    assert (probs >= 0).all()


def test_objective_reductions(toy_model, toy_users):
    mean = toy_model.objective(toy_users, reduction="mean")
    total = toy_model.objective(toy_users, reduction="sum")
    assert torch.allclose(total, 3 * mean)
    assert total > 0


def test_objective_empty(toy_model):
    with pytest.raises(ValueError):
        toy_model.objective([])


def test_shared_objective_is_merged_term(toy_hyper, toy_features, toy_users):
    model = build(replace(toy_hyper, attention="shared"), toy_features)
    terms = model.loss_terms(toy_users)
    assert set(terms) == {"merged"}
    assert torch.allclose(model.objective(toy_users, reduction="sum"), terms["merged"].sum())


def test_inference_scores(toy_model, toy_users):
    """The own domain distribution plus l2 times the projected merged one."""
    scores = toy_model.inference_scores(toy_users, domain=1)
    assert scores.shape == (3, 4)
    expected = torch.full((3,), 1 + toy_model.hyper.lambdas[1], dtype=torch.float64)
    assert torch.allclose(scores.sum(dim=-1), expected)


def test_inference_needs_history(toy_model):
    only_x = UserSequences.from_merged("u", [("a0", 0), ("a1", 0)])
    with pytest.raises(ValueError, match="empty stream"):
        toy_model.inference_scores([only_x], domain=1)
    with pytest.raises(ValueError):
        toy_model.inference_scores([only_x], domain=2)


def test_score_inference(toy_model, toy_users):
    ranked = score_inference(toy_model, toy_users[0], target_domain=0)
    assert sorted(ranked) == ["a0", "a1", "a2", "a3"]


def test_encode_all_streams(toy_hyper, toy_features, toy_users):
    model = build(replace(toy_hyper, fused_stream=True), toy_features)
    outputs = encode_all_streams(model, toy_users[0])
    assert len(outputs) == 13
    assert outputs[StreamId("Y", "img")].shape == (toy_hyper.e,)
    assert outputs[FUSED_STREAM].shape == (toy_hyper.q,)


def test_image_vector_reaches_only_image_streams(toy_model, toy_users):
    """Changing the image vector of a0 moves the image streams that read a0 and nothing else."""
    before = encode_all_streams(toy_model, toy_users[0])
    img = toy_model.img.clone()
    img[0] += 1.0
    toy_model.img = img
    after = encode_all_streams(toy_model, toy_users[0])
    changed = {stream.key for stream in before if not torch.equal(before[stream], after[stream])}
    assert changed == {"X_img", "merged_img"}


def test_last_x_item_leaves_y_streams(toy_model, toy_users):
    """Swapping the final X item changes every X stream and no Y stream."""
    user = toy_users[0]
    swapped = UserSequences.from_merged(user.user, user.seq_merged[:-1] + [("a1", 0)])
    assert swapped.seq_y == user.seq_y
    before = encode_all_streams(toy_model, user)
    after = encode_all_streams(toy_model, swapped)
    for stream in before:
        same = torch.equal(before[stream], after[stream])
        if stream.sequence == "Y":
            assert same, stream
        else:
            assert not same, stream


def test_item_bundle(toy_model):
    bundle = toy_model.item_bundle("b0")
    assert bundle.index == 4
    assert bundle.e_item.shape == (toy_model.hyper.q,)
    expected = torch.tensor([0.0, 0.25, 0.75, 0.0], dtype=torch.float64) @ toy_model.E_tag
    assert torch.allclose(bundle.e_tag, expected)


def test_non_finite(toy_model, toy_users):
    with torch.no_grad():
        toy_model.E_id[0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError):
        toy_model.objective(toy_users)


def test_checkpoint_roundtrip(tmp_path, toy_model, toy_features, toy_users):
    """A reloaded checkpoint has the same parameters and the same scores."""
    path = tmp_path / "checkpoint.bin"
    save_checkpoint(toy_model, path)
    again = load_checkpoint(path).bind(toy_features)
    for (name, p), (other, q) in zip(toy_model.registry().items(), again.registry().items()):
        assert name == other
        assert torch.equal(p, q)
    assert again.hyper == toy_model.hyper
    with torch.no_grad():
        assert torch.equal(again.inference_scores(toy_users, 0), toy_model.inference_scores(toy_users, 0))
    save_checkpoint(again, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


@pytest.mark.parametrize(
    "kwargs,key",
    [
        (dict(alphas=(0.5, 0.5, 0.5)), "hyper.alphas"),
        (dict(lambdas=(-1.0, 0.1)), "hyper.lambdas"),
        (dict(dropout=1.0), "hyper.dropout"),
        (dict(batch_size=0), "hyper.batch_size"),
        (dict(d=7), "hyper.d"),
        (dict(strategy="best"), "hyper.strategy"),
        (dict(attention="none"), "hyper.attention"),
        (dict(reduction="max"), "hyper.reduction"),
        (dict(dtype="float16"), "hyper.dtype"),
        (dict(fused_weight=2.0), "hyper.fused_weight"),
    ],
)
def test_hyperparams_validation(kwargs, key):
    with pytest.raises(ConfigError) as info:
        Hyperparams(**kwargs)
    assert info.value.key == key


def test_hyperparams_defaults():
    hyper = Hyperparams()
    assert (hyper.batch_size, hyper.dropout, hyper.lr) == (256, 0.3, 1e-3)
    assert hyper.selection().mode == "hybrid"
    with pytest.raises(ConfigError):
        Hyperparams.from_dict({"depth": 3})
