import pytest
import torch

from crossrec.evaluation import (
    AblationCell,
    AblationConfig,
    AblationSpec,
    AblationTable,
    ablation_preset,
    evaluate,
    resolve_domain,
    run_ablation,
    split_targets,
)
from crossrec.metrics import MetricsReport


@pytest.mark.parametrize("domain,users,skipped", [(0, 2, 1), ("X", 2, 1), (1, 1, 2), ("Y", 1, 2)])
def test_evaluate_conservation(toy_model, toy_split, domain, users, skipped):
    """Every user is either ranked or skipped."""
    report = evaluate(toy_model, toy_split, domain=domain)
    assert (report.users, report.skipped) == (users, skipped)
    assert report.users + report.skipped == len(toy_split.users)
    assert 0 < report.mrr <= 1
    assert report.ndcg5 <= report.ndcg10


def test_evaluate_is_pure(toy_model, toy_split):
    """Evaluation leaves the parameters alone and gives the same answer twice."""
    before = {k: v.clone() for k, v in toy_model.registry().items()}
    first = evaluate(toy_model, toy_split, domain=0)
    second = evaluate(toy_model, toy_split, domain=0)
    assert first == second
    assert all(torch.equal(before[k], v) for k, v in toy_model.registry().items())


def test_evaluate_no_users(toy_model, toy_split):
    """All validation targets lie in domain Y."""
    with pytest.raises(ValueError, match="No valid users"):
        evaluate(toy_model, toy_split, domain="X", split="valid")


def test_evaluate_train_split(toy_model, toy_split):
    report = evaluate(toy_model, toy_split, domain="X", split="train")
    assert report.users + report.skipped == 3


def test_split_targets_train(toy_split):
    histories, targets = split_targets(toy_split, "train")
    assert targets["u1"].item == "a2"
    assert [i for i, _ in histories["u1"].seq_merged] == ["a0", "b0", "a1", "b1"]


def test_bad_domain_and_split(toy_split):
    with pytest.raises(ValueError):
        resolve_domain(toy_split, "Z")
    with pytest.raises(ValueError):
        split_targets(toy_split, "holdout")


@pytest.mark.parametrize("name,size", [("tableIV", 4), ("tableV", 3), ("table_vi", 3), ("TABLEv", 3)])
def test_presets(name, size):
    spec = ablation_preset(name, seeds=(0, 1))
    assert len(spec.configs) == size
    assert spec.seeds == (0, 1)


def test_unknown_preset():
    with pytest.raises(ValueError):
        ablation_preset("tableVII")


def test_spec_validation():
    with pytest.raises(ValueError):
        AblationSpec("x", configs=())
    with pytest.raises(ValueError):
        AblationSpec("x", configs=(AblationConfig("a"), AblationConfig("a")))
    with pytest.raises(ValueError):
        AblationSpec("x", configs=(AblationConfig("a"),), seeds=())
    with pytest.raises(ValueError):
        AblationConfig("a", representation="two_hot")
    assert [c.name for c in ablation_preset("tableV").drop("one-hot").configs] == [
        "unweighted multi-hot",
        "weighted multi-hot",
    ]


def test_run_ablation_marks_failures(tmp_path, toy_split, toy_features, toy_hyper):
    """A config that cannot build its tag vectors is a failed cell, the others still run."""
    spec = AblationSpec(
        "demo",
        configs=(AblationConfig("keyword", tag_source="keyword"), AblationConfig("matched", tag_source="llm")),
        seeds=(0, 1),
    )
    titles = {item: f"red {item}" for item in toy_features.catalog.all_items()}
    table = run_ablation(spec, toy_split, toy_features, toy_hyper, titles=titles)
    assert len(table.cells) == 4
    assert not table.cell("keyword", 1).failed
    assert table.cell("matched", 0).failed
    rows = table.rows()
    assert rows[1] == ("matched", "FAILED", "FAILED", "FAILED", 2)
    assert isinstance(rows[0][1], float)
    table.write(tmp_path)
    assert "FAILED" in (tmp_path / "ablation-demo.txt").read_text()
    assert (tmp_path / "ablation-demo.csv").read_text().count("\n") == 5


def test_table_mean():
    spec = AblationSpec("t", configs=(AblationConfig("a"),), seeds=(0, 1, 2))
    report = MetricsReport("X", 0.5, 0.5, 0.5, users=1)
    table = AblationTable(
        spec,
        [
            AblationCell("a", 0, report=report),
            AblationCell("a", 1, report=MetricsReport("X", 0.25, 0.5, 0.5, users=1)),
            AblationCell("a", 2, error="boom"),
        ],
    )
    assert table.mean("a") == 0.375
    assert table.rows()[0][-1] == 1
