"""
A planted two-domain dataset. Every user has one hidden item group that drives their
choices in both domains, and every item has hidden affinities for three tags that a
planted provider reports back as match scores.

Groups come in pairs that share the same three tags with the two secondary tags in
swapped order. One-hot and unweighted multi-hot tag vectors are identical within a
pair, only weighted multi-hot vectors tell the two groups apart.
"""
import json
import logging
import pathlib
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from crossrec.embedding import synthetic_vectors, write_frozen_embeddings

logger = logging.getLogger(__name__)

TAG_WORDS = (
    "crimson",
    "velvet",
    "rustic",
    "amber",
    "silver",
    "harbor",
    "meadow",
    "granite",
    "willow",
    "cobalt",
    "ember",
    "lunar",
)
AFFINITY_WEIGHTS = (0.5, 0.3, 0.2)
NOUNS = {0: "novel", 1: "film"}


@dataclass(frozen=True)
class SynthConfig:
    users: int = 60
    items_per_domain: int = 80
    tags: int = 12
    seed: int = 7
    min_len: int = 5
    max_len: int = 8
    jump: float = 0.1
    e: int = 32
    domains: Tuple[str, str] = ("X", "Y")

    def __post_init__(self):
        if not 2 <= self.tags <= len(TAG_WORDS) or self.tags % 2:
            raise ValueError(f"`tags` must be an even number between 2 and {len(TAG_WORDS)}, got {self.tags}.")
        if self.items_per_domain < self.tags:
            raise ValueError(f"`items_per_domain` must be >= `tags`, got {self.items_per_domain}.")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"Need 1 <= `min_len` <= `max_len`, got {self.min_len} and {self.max_len}.")
        if not 0 <= self.jump <= 1:
            raise ValueError(f"`jump` must be in [0, 1], got {self.jump}.")


@dataclass
class SynthDataset:
    config: SynthConfig
    interactions: List[Tuple[str, str, str, int]]
    items: List[Dict]
    groups: Dict[str, int]

    @property
    def affinities(self):
        return {r["item"]: r["affinity"] for r in self.items}

    @property
    def item_domains(self):
        return {r["item"]: r["domain"] for r in self.items}


def group_tags(group, n_tags=12):
    """
    The `(primary, secondary, tertiary)` tag indices of a group. Groups `2j` and
    `2j + 1` share their tags and swap the last two.

    Usage:

    ```python
    from crossrec.synth import group_tags

    assert group_tags(0) == (0, 1, 2)
    assert group_tags(1) == (0, 2, 1)
    assert group_tags(11) == (10, 0, 11)
    ```
    """
    j = group // 2
    a, b, c = (2 * j) % n_tags, (2 * j + 1) % n_tags, (2 * j + 2) % n_tags
    return (a, b, c) if group % 2 == 0 else (a, c, b)


def item_id(domain, index):
    return f"{'xy'[domain]}{index:03d}"


def _items(config):
    records = []
    for d, name in enumerate(config.domains):
        for i in range(config.items_per_domain):
            tags = [TAG_WORDS[t] for t in group_tags(i % config.tags, config.tags)]
            records.append(
                {
                    "item": item_id(d, i),
                    "domain": name,
                    "title": f"{tags[0].title()} {tags[1]} {NOUNS[d]} {i}",
                    "description": f"A {NOUNS[d]} with notes of {tags[0]}, {tags[1]} and {tags[2]}.",
                    "affinity": dict(zip(tags, AFFINITY_WEIGHTS)),
                }
            )
    return records


def _walk(rng, cycle, length, jump):
    position = int(rng.integers(len(cycle)))
    walk = []
    for _ in range(length):
        walk.append(cycle[position])
        if rng.random() < jump:
            position = int(rng.integers(len(cycle)))
        else:
            position = (position + 1) % len(cycle)
    return walk


def generate(config: SynthConfig = SynthConfig()):
    """
    Builds the planted dataset. The same config always gives the same dataset.

    Usage:

    ```python
    from crossrec.synth import SynthConfig, generate

    data = generate(SynthConfig(users=4, items_per_domain=12, seed=1))
    again = generate(SynthConfig(users=4, items_per_domain=12, seed=1))
    assert data.interactions == again.interactions
    assert len({row[2] for row in data.interactions}) == 2
    ```
    """
    rng = np.random.default_rng(config.seed)
    items = _items(config)
    interactions, groups = [], {}
    for u in range(config.users):
        user = f"u{u:04d}"
        group = int(rng.integers(config.tags))
        groups[user] = group
        walks = []
        for d in (0, 1):
            cycle = [item_id(d, i) for i in range(group, config.items_per_domain, config.tags)]
            length = int(rng.integers(config.min_len, config.max_len + 1))
            walks.append(_walk(rng, cycle, length, config.jump))
        order = rng.permutation([0] * len(walks[0]) + [1] * len(walks[1]))
        cursors, timestamp = [0, 0], 1_000_000 + int(rng.integers(10_000))
        for d in order:
            interactions.append((user, walks[d][cursors[d]], config.domains[d], timestamp))
            cursors[d] += 1
            timestamp += 60 + int(rng.integers(3_600))
    logger.info("generated %d interactions for %d users", len(interactions), config.users)
    return SynthDataset(config, interactions, items, groups)


def write_dataset(data: SynthDataset, out_dir):
    """
    Writes `interactions.tsv`, `items.jsonl`, frozen `image.bin` and `text.bin` with
    their `.ids` sidecars and a `config.json` that runs the pipeline on these files.
    Returns the paths written.
    """
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = data.config
    paths = {
        "interactions": out / "interactions.tsv",
        "items": out / "items.jsonl",
        "image": out / "image.bin",
        "text": out / "text.bin",
        "config": out / "config.json",
    }
    paths["interactions"].write_text("".join(f"{u}\t{i}\t{d}\t{t}\n" for u, i, d, t in data.interactions))
    paths["items"].write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in data.items))
    ids = [r["item"] for r in data.items]
    write_frozen_embeddings(paths["image"], "image", synthetic_vectors(len(ids), config.e, config.seed + 101), ids)
    write_frozen_embeddings(paths["text"], "text", synthetic_vectors(len(ids), config.e, config.seed + 202), ids)
    run_config = {
        "domains": list(config.domains),
        "paths": {
            "interactions": paths["interactions"].name,
            "items": paths["items"].name,
            "image": paths["image"].name,
            "text": paths["text"].name,
            "tag_cache": "tag_cache.jsonl",
            "out_dir": "run",
        },
        "filter": {"min_total": 10, "min_per_domain": 3, "min_item_interactions": 1},
        "tagging": {"provider": "planted", "seed": config.seed},
        "hyper": {"q": config.e, "e": config.e, "d": config.e, "d_t": config.e, "hidden": config.e, "max_epochs": 200, "seed": config.seed},
        "mode": {"mode": "reference"},
    }
    paths["config"].write_text(json.dumps(run_config, sort_keys=True, indent=2) + "\n")
    logger.info("wrote synthetic dataset to %s", out)
    return paths
