"""
Prompt templates for the two kinds of questions we ask a language model: which tags
describe a domain, and how well each tag of a vocabulary matches a single item.
"""
import json
import math
import re
import string
from dataclasses import dataclass, field
from typing import Dict, Tuple

KINDS = ("domain_tags", "item_match")

REQUIRED_PLACEHOLDERS = {
    "domain_tags": {"domain", "N"},
    "item_match": {"item_title", "tag_list"},
}

DOMAIN_TAGS_TEMPLATE = (
    "You are building a tag vocabulary for a recommender system.\n"
    "List exactly {N} short semantic tags that describe items in the {domain} domain.\n"
    "Give every tag a relevance score between 0 and 1.\n"
    "Answer with one `tag: score` pair per line and nothing else."
)

ITEM_MATCH_TEMPLATE = (
    "Item title: {item_title}\n"
    "Item description: {item_description}\n"
    "Candidate tags: {tag_list}\n"
    "For every candidate tag that fits the item, give a matching score from 1 to 100.\n"
    "Answer with one `tag: score` pair per line and leave out tags that do not fit."
)

ITEM_MATCH_TITLE_ONLY_TEMPLATE = (
    "Item title: {item_title}\n"
    "Candidate tags: {tag_list}\n"
    "For every candidate tag that fits the item, give a matching score from 1 to 100.\n"
    "Answer with one `tag: score` pair per line and leave out tags that do not fit."
)


def canonical_tag(tag):
    """Tags are compared after lowercasing and trimming, this is the only place that does it."""
    return " ".join(str(tag).strip().lower().split())


@dataclass(frozen=True)
class PromptTemplate:
    """
    A prompt with named placeholders. The placeholders a `kind` needs are checked
    when the template is created.

    Usage:

    ```python
    from crossrec.prompts import PromptTemplate, DOMAIN_TAGS_TEMPLATE

    template = PromptTemplate(DOMAIN_TAGS_TEMPLATE, kind="domain_tags")
    request = template.render(domain="movie", N=3)
    assert "movie" in request.text
    assert request.fields["N"] == 3
    ```
    """

    template_text: str
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"`kind` must be one of {list(KINDS)}, got '{self.kind}'.")
        missing = REQUIRED_PLACEHOLDERS[self.kind] - self.placeholders
        if missing:
            raise ValueError(
                f"The `{self.kind}` template is missing placeholders: {sorted(missing)}."
            )

    @property
    def placeholders(self):
        return {name for _, name, _, _ in string.Formatter().parse(self.template_text) if name}

    def render(self, **fields):
        values = dict(fields)
        if "tag_list" in values and not isinstance(values["tag_list"], str):
            values["tag_list"] = ", ".join(values["tag_list"])
        text = self.template_text.format(**values)
        return PromptRequest(kind=self.kind, text=text, fields=fields)


@dataclass(frozen=True)
class PromptRequest:
    """A rendered prompt. Real providers only read `text`, offline providers may read `fields`."""

    kind: str
    text: str
    fields: Dict = field(default_factory=dict, compare=False, hash=False)


def default_template(kind, title_only=False):
    if kind == "domain_tags":
        return PromptTemplate(DOMAIN_TAGS_TEMPLATE, kind)
    if title_only:
        return PromptTemplate(ITEM_MATCH_TITLE_ONLY_TEMPLATE, kind)
    return PromptTemplate(ITEM_MATCH_TEMPLATE, kind)


@dataclass(frozen=True)
class TagResponse:
    """
    Ordered `(tag, score)` pairs returned by a provider. Domain tag scores live in
    [0, 1], item matching scores are integers in [1, 100].
    """

    pairs: Tuple[Tuple[str, float], ...]
    kind: str = "domain_tags"

    def __post_init__(self):
        pairs = tuple((canonical_tag(t), s) for t, s in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        tags = [t for t, _ in pairs]
        if len(set(tags)) != len(tags):
            raise ValueError(f"A `TagResponse` cannot repeat tags, got {tags}.")
        for t, s in pairs:
            if not t:
                raise ValueError("A `TagResponse` cannot contain an empty tag.")
            if not math.isfinite(s):
                raise ValueError(f"Score for tag '{t}' is not finite: {s}.")
            if self.kind == "domain_tags" and not 0.0 <= s <= 1.0:
                raise ValueError(f"Domain tag scores must be in [0, 1], got {t}: {s}.")
            if self.kind == "item_match" and not (1 <= s <= 100 and float(s).is_integer()):
                raise ValueError(f"Item match scores must be integers in [1, 100], got {t}: {s}.")

    def __len__(self):
        return len(self.pairs)

    @property
    def tags(self):
        return [t for t, _ in self.pairs]

    def to_json(self):
        return json.dumps({"kind": self.kind, "pairs": [[t, s] for t, s in self.pairs]})

    @classmethod
    def from_json(cls, text):
        blob = json.loads(text) if isinstance(text, str) else text
        return cls(tuple((t, s) for t, s in blob["pairs"]), kind=blob["kind"])


_LINE = re.compile(r"^\s*(?:[-*]|\d+[.)])?\s*(?P<tag>[^:=]+?)\s*[:=]\s*(?P<score>-?\d+(?:\.\d+)?)\s*$")


def parse_tag_lines(text, kind):
    """
    Parses free text in the `tag: score` format into a `TagResponse`. Lines that do not
    look like a pair, repeated tags and out-of-range scores are skipped.
    """
    pairs, seen = [], set()
    for line in str(text).splitlines():
        match = _LINE.match(line)
        if not match:
            continue
        tag, score = canonical_tag(match.group("tag")), float(match.group("score"))
        if kind == "item_match":
            score = float(round(score))
            if not 1 <= score <= 100:
                continue
        elif not 0.0 <= score <= 1.0:
            continue
        if tag and tag not in seen:
            seen.add(tag)
            pairs.append((tag, score))
    return TagResponse(tuple(pairs), kind=kind)
