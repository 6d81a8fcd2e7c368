"""
Full catalog ranking evaluation and the ablation harness that trains and evaluates a
grid of model variants.
"""
import csv
import logging
import math
import pathlib
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

from crossrec.interactions import Target, UserSequences
from crossrec.metrics import MetricsReport, format_table
from crossrec.model import Hyperparams, can_rank, rank_targets
from crossrec.tags import REPRESENTATIONS, STRATEGIES, catalog_tag_vectors, keyword_tag_vectors
from crossrec.training import train

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
TAG_SOURCES = ("llm", "keyword")


def resolve_domain(dataset, domain):
    """Accepts a domain index or name and returns the index."""
    for d in dataset.domains:
        if domain in (d.index, d.name):
            return d.index
    raise ValueError(f"`domain` must be one of {[d.name for d in dataset.domains]}, got '{domain}'.")


def split_targets(dataset, split="test"):
    """
    The histories and held-out items of a split. For `train` the held-out item is the
    last training item and the history is everything before it.
    """
    if split not in SPLITS:
        raise ValueError(f"`split` must be one of {list(SPLITS)}, got '{split}'.")
    if split != "train":
        targets = dataset.valid if split == "valid" else dataset.test
        return {u: dataset.history(u, split) for u in dataset.users}, dict(targets)
    histories, targets = {}, {}
    for user in dataset.users:
        merged = dataset.train[user].seq_merged
        if len(merged) < 2:
            continue
        histories[user] = UserSequences.from_merged(user, merged[:-1])
        targets[user] = Target(*merged[-1])
    return histories, targets


def evaluate(model, dataset, features=None, domain=0, split="test", fingerprint=""):
    """
    Ranks the held-out item of every user whose target lies in `domain` against the
    whole catalog of that domain and aggregates MRR and NDCG@5/10. Users with a target
    in the other domain, or without any history in the needed sequences, are skipped.

    Arguments:
        model: a trained `CrossDomainModel`
        dataset: the `DatasetSplit`
        features: a `FeatureSet` to bind, leave out when the model is bound already
        domain: domain index or name
        split: `train`, `valid` or `test`
        fingerprint: config fingerprint stored in the report
    """
    if features is not None:
        model.bind(features)
    d = resolve_domain(dataset, domain)
    histories, targets = split_targets(dataset, split)
    kept = {u: t for u, t in targets.items() if t.domain == d and can_rank(model, histories[u], d)}
    total = len(dataset.users)
    skipped = total - len(kept)
    name = dataset.domains[d].name
    logger.info("evaluating %s on %d users of domain %s, skipped %d", split, len(kept), name, skipped)
    if not kept:
        raise ValueError(f"No {split} users have a target in domain `{name}`.")
    scored = rank_targets(model, histories, kept, batch_size=model.hyper.batch_size)
    return MetricsReport.from_ranks(name, [s.result for s in scored], skipped=skipped, fingerprint=fingerprint)


@dataclass(frozen=True)
class AblationConfig:
    """
    One named model variant. `tag_source` picks LLM matched tags or static keyword
    tags, `strategy` overrides the selection strategy of the template hyperparameters.
    """

    name: str
    use_tags: bool = True
    tag_source: str = "llm"
    attention: str = "multi"
    representation: str = "weighted_multi_hot"
    strategy: Optional[str] = None

    def __post_init__(self):
        if self.tag_source not in TAG_SOURCES:
            raise ValueError(f"`tag_source` must be one of {list(TAG_SOURCES)}, got '{self.tag_source}'.")
        if self.representation not in REPRESENTATIONS:
            raise ValueError(
                f"`representation` must be one of {list(REPRESENTATIONS)}, got '{self.representation}'."
            )
        if self.strategy is not None and self.strategy not in STRATEGIES:
            raise ValueError(f"`strategy` must be one of {list(STRATEGIES)}, got '{self.strategy}'.")

    def hyperparams(self, template: Hyperparams):
        return replace(
            template,
            use_tags=self.use_tags,
            attention=self.attention,
            strategy=self.strategy or template.strategy,
        )

    def tag_vectors(self, hyper, catalog, vocabulary, raw_scores=None, titles=None):
        items = catalog.all_items()
        if self.tag_source == "keyword":
            if titles is None:
                raise ValueError(f"Config `{self.name}` uses keyword tags and needs item titles.")
            return keyword_tag_vectors(titles, items, vocabulary)
        if raw_scores is None:
            raise ValueError(f"Config `{self.name}` uses matched tags and needs raw item scores.")
        return catalog_tag_vectors(raw_scores, items, hyper.selection(), vocabulary, self.representation)


@dataclass
class AblationSpec:
    name: str
    configs: Tuple[AblationConfig, ...]
    seeds: Tuple[int, ...] = (0,)

    def __post_init__(self):
        self.configs, self.seeds = tuple(self.configs), tuple(self.seeds)
        names = [c.name for c in self.configs]
        if not names:
            raise ValueError("An `AblationSpec` needs at least one config.")
        if len(set(names)) != len(names):
            raise ValueError(f"Ablation config names must be unique, got {names}.")
        if not self.seeds:
            raise ValueError("An `AblationSpec` needs at least one seed.")

    def drop(self, name):
        return replace(self, configs=tuple(c for c in self.configs if c.name != name))


PRESETS = {
    "table_iv": (
        AblationConfig("baseline", use_tags=False, attention="shared"),
        AblationConfig("+tag embedding", tag_source="keyword", attention="shared"),
        AblationConfig("+llm matching", attention="shared"),
        AblationConfig("+multi-attention"),
    ),
    "table_v": (
        AblationConfig("one-hot", representation="one_hot"),
        AblationConfig("unweighted multi-hot", representation="unweighted_multi_hot"),
        AblationConfig("weighted multi-hot", representation="weighted_multi_hot"),
    ),
    "table_vi": (
        AblationConfig("top-r", strategy="top_r"),
        AblationConfig("threshold", strategy="threshold"),
        AblationConfig("hybrid", strategy="hybrid"),
    ),
}


def ablation_preset(name, seeds=(0,)):
    """
    One of the preset grids: module toggles (`tableIV`), tag representations
    (`tableV`) or tag selection strategies (`tableVI`).

    Usage:

    ```python
    from crossrec.evaluation import ablation_preset

    spec = ablation_preset("tableV", seeds=(0, 1))
    assert [c.name for c in spec.configs][-1] == "weighted multi-hot"
    ```
    """
    key = name.lower().replace("_", "").replace("table", "table_")
    if key not in PRESETS:
        raise ValueError(f"Unknown ablation grid `{name}`, expected one of {['tableIV', 'tableV', 'tableVI']}.")
    return AblationSpec(name=key, configs=PRESETS[key], seeds=seeds)


@dataclass
class AblationCell:
    config: str
    seed: int
    report: Optional[MetricsReport] = None
    error: Optional[str] = None

    @property
    def failed(self):
        return self.report is None


@dataclass
class AblationTable:
    spec: AblationSpec
    cells: List[AblationCell] = field(default_factory=list)

    def mean(self, config, metric="mrr"):
        values = [getattr(c.report, metric) for c in self.cells if c.config == config and not c.failed]
        return math.fsum(values) / len(values) if values else float("nan")

    def cell(self, config, seed):
        return next(c for c in self.cells if c.config == config and c.seed == seed)

    def rows(self):
        rows = []
        for config in self.spec.configs:
            failed = sum(c.failed for c in self.cells if c.config == config.name)
            if failed == len(self.spec.seeds):
                rows.append((config.name, "FAILED", "FAILED", "FAILED", failed))
                continue
            rows.append(
                (
                    config.name,
                    self.mean(config.name, "mrr"),
                    self.mean(config.name, "ndcg5"),
                    self.mean(config.name, "ndcg10"),
                    failed,
                )
            )
        return rows

    def to_text(self):
        return format_table(self.rows(), headers=["config", "MRR", "NDCG@5", "NDCG@10", "failed"])

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["config", "seed", "mrr", "ndcg5", "ndcg10", "status"])
            for c in self.cells:
                if c.failed:
                    writer.writerow([c.config, c.seed, "", "", "", f"failed: {c.error}"])
                else:
                    writer.writerow([c.config, c.seed, c.report.mrr, c.report.ndcg5, c.report.ndcg10, "ok"])

    def write(self, out_dir):
        out_dir = pathlib.Path(out_dir)
        self.write_csv(out_dir / f"ablation-{self.spec.name}.csv")
        (out_dir / f"ablation-{self.spec.name}.txt").write_text(self.to_text())


def run_ablation(spec: AblationSpec, dataset, features, hyper: Hyperparams, raw_scores=None, titles=None, domain=0, **kwargs):
    """
    Trains and tests every config of `spec` once per seed. Each cell starts from the
    template `hyper` with the cell's seed, so cells do not influence each other. A cell
    that raises is logged and marked as failed.

    Arguments:
        spec: the `AblationSpec`
        dataset: the `DatasetSplit`
        features: the `FeatureSet`, its tag vectors are replaced per config
        hyper: template `Hyperparams`
        raw_scores: raw item match scores, needed by configs with matched tags
        titles: item titles, needed by configs with keyword tags
        domain: domain index or name that is evaluated
        kwargs: passed on to `train`
    """
    table = AblationTable(spec)
    for config in spec.configs:
        for seed in spec.seeds:
            try:
                cell_hyper = config.hyperparams(replace(hyper, seed=seed))
                vectors = config.tag_vectors(cell_hyper, features.catalog, features.vocabulary, raw_scores, titles)
                report = train(dataset, features.with_tag_vectors(vectors), cell_hyper, **kwargs)
                if report.aborted:
                    raise RuntimeError(report.aborted)
                metrics = evaluate(report.model, dataset, domain=domain, split="test")
                table.cells.append(AblationCell(config.name, seed, report=metrics))
                logger.info("ablation %s seed %d test mrr %.4f", config.name, seed, metrics.mrr)
            except Exception as err:
                logger.error("ablation cell %s seed %d failed: %s", config.name, seed, err)
                table.cells.append(AblationCell(config.name, seed, error=str(err)))
    return table
