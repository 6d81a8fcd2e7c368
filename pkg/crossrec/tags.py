import json
import logging
import math
import pathlib
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from crossrec.decorators import non_empty
from crossrec.errors import ProviderError
from crossrec.prompts import TagResponse, canonical_tag, default_template
from crossrec.providers import item_fields

logger = logging.getLogger(__name__)

UNKNOWN_TAG = "<unknown>"
STRATEGIES = ("top_r", "threshold", "hybrid")
REPRESENTATIONS = ("one_hot", "unweighted_multi_hot", "weighted_multi_hot")


@dataclass(frozen=True)
class TagVocabulary:
    """The voted tag list of one domain, in rank order."""

    domain: str
    tags: Tuple[str, ...]

    def __post_init__(self):
        tags = tuple(canonical_tag(t) for t in self.tags)
        if len(set(tags)) != len(tags):
            raise ValueError(f"A `TagVocabulary` cannot repeat tags, got {list(tags)}.")
        object.__setattr__(self, "tags", tags)

    def __len__(self):
        return len(self.tags)

    @property
    def tag_index(self):
        return {t: i for i, t in enumerate(self.tags)}


class SharedVocabulary:
    """
    The tag vocabularies of both domains concatenated in domain order with duplicate
    tags merged, followed by the reserved `<unknown>` tag. Row `i` of the tag
    embedding table belongs to `tags[i]`.

    Usage:

    ```python
    from crossrec.tags import SharedVocabulary, TagVocabulary

    shared = SharedVocabulary.from_domains([
        TagVocabulary("movie", ("war", "romance")),
        TagVocabulary("book", ("romance", "poetry")),
    ])
    assert shared.tags == ["war", "romance", "poetry", "<unknown>"]
    assert shared.index("poetry") == 2
    ```
    """

    def __init__(self, tags):
        tags = [canonical_tag(t) for t in tags if t != UNKNOWN_TAG]
        self.tags = list(dict.fromkeys(tags)) + [UNKNOWN_TAG]
        self._index = {t: i for i, t in enumerate(self.tags)}

    @classmethod
    def from_domains(cls, vocabularies: Sequence[TagVocabulary]):
        return cls([t for vocab in vocabularies for t in vocab.tags])

    def __len__(self):
        return len(self.tags)

    def __contains__(self, tag):
        return canonical_tag(tag) in self._index

    def __repr__(self):
        return f"<SharedVocabulary len={len(self)}>"

    @property
    def unknown_index(self):
        return self._index[UNKNOWN_TAG]

    @property
    def matchable_tags(self):
        """All tags a provider may be asked about, so everything but `<unknown>`."""
        return self.tags[:-1]

    def index(self, tag):
        return self._index[tag if tag == UNKNOWN_TAG else canonical_tag(tag)]


@dataclass(frozen=True)
class TagScoreVector:
    """
    Sparse soft tag vector of an item, the weights form a convex combination. When
    `M` is given the vector holds at most `M` entries.
    """

    item: str
    entries: Tuple[Tuple[int, float], ...]
    M: Optional[int] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        entries = tuple((int(i), float(w)) for i, w in self.entries)
        object.__setattr__(self, "entries", entries)
        if self.M is not None and len(entries) > self.M:
            raise ValueError(f"`{self.item}` has {len(entries)} tags, at most M={self.M} are allowed.")
        if entries:
            if any(w < 0 or w > 1 for _, w in entries):
                raise ValueError(f"Tag weights of `{self.item}` must lie in [0, 1], got {entries}.")
            if abs(math.fsum(w for _, w in entries) - 1.0) > 1e-9:
                raise ValueError(f"Tag weights of `{self.item}` must sum to 1, got {entries}.")

    def __len__(self):
        return len(self.entries)

    def dense(self, size):
        weights = [0.0] * size
        for i, w in self.entries:
            if not 0 <= i < size:
                raise IndexError(f"Tag index {i} of `{self.item}` is outside [0, {size}).")
            weights[i] += w
        return weights


@dataclass(frozen=True)
class SelectionStrategy:
    """
    How many of the matched tags an item keeps. `top_r` keeps the `R` best tags,
    `threshold` keeps every tag scoring at least `theta`, `hybrid` keeps the union of
    both truncated to the `M` best.
    """

    mode: str = "hybrid"
    R: int = 5
    theta: float = 70
    M: int = 10

    def __post_init__(self):
        if self.mode not in STRATEGIES:
            raise ValueError(f"`mode` must be one of {list(STRATEGIES)}, got '{self.mode}'.")
        if self.R < 1:
            raise ValueError(f"`R` must be >= 1, got {self.R}.")
        if not 1 <= self.theta <= 100:
            raise ValueError(f"`theta` must be in [1, 100], got {self.theta}.")
        if self.M < self.R:
            raise ValueError(f"`M` must be >= `R`, got M={self.M} and R={self.R}.")


@non_empty("responses")
def vote(responses: Sequence[TagResponse], N, domain=""):
    """
    Frequency based majority vote over repeated tag list answers. Tags are ranked by
    how many responses mention them, then by their mean score, then alphabetically,
    and the first `N` are kept.

    Arguments:
        responses: the collected `TagResponse`s
        N: number of tags to keep
        domain: name of the domain the vocabulary belongs to

    Usage:

    ```python
    from crossrec.prompts import TagResponse
    from crossrec.tags import vote

    responses = [
        TagResponse((("a", .5), ("b", .5), ("c", .5))),
        TagResponse((("a", .5), ("b", .5), ("d", .5))),
        TagResponse((("a", .5), ("c", .5), ("d", .5))),
    ]
    assert vote(responses, N=2).tags == ("a", "b")
    ```
    """
    if N < 1:
        raise ValueError(f"`N` must be >= 1, got {N}.")
    scores = defaultdict(list)
    for response in responses:
        for tag, score in response.pairs:
            scores[canonical_tag(tag)].append(score)
    if not scores:
        raise ValueError("no candidate tags")
    ranked = sorted(
        scores, key=lambda t: (-len(scores[t]), -math.fsum(scores[t]) / len(scores[t]), t)
    )
    return TagVocabulary(domain=domain, tags=tuple(ranked[:N]))


def generate_domain_tags(provider, domain, template=None, R=5, N=30, transcript_path=None):
    """
    Asks the provider `R` times at temperature 0 for `N` tags of a domain and votes
    over the answers. When the provider gives up, the answers collected so far are
    written to `transcript_path` before a `ProviderError` is raised.

    Arguments:
        provider: a provider, usually a `CachedProvider`
        domain: name of the domain
        template: `PromptTemplate` of kind `domain_tags`, defaults to the built-in one
        R: number of queries
        N: number of tags to keep
        transcript_path: where to dump the raw answers on failure
    """
    if R < 1:
        raise ValueError(f"`R` must be >= 1, got {R}.")
    if N < 1:
        raise ValueError(f"`N` must be >= 1, got {N}.")
    template = template or default_template("domain_tags")
    request = template.render(domain=domain, N=N)
    responses = []
    for r in range(R):
        try:
            response = provider.complete(request, temperature=0.0)
        except Exception as e:
            if transcript_path is not None:
                _write_transcript(transcript_path, domain, request.text, responses)
            raise ProviderError(
                f"tag generation for `{domain}` failed at query {r + 1} of {R}: {e}",
                transcript_path=transcript_path,
            ) from e
        logger.info("domain %s query %d: %s", domain, r + 1, response.to_json())
        responses.append(response)
    return vote(responses, N, domain=domain)


def _write_transcript(path, domain, prompt, responses):
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {"domain": domain, "prompt": prompt, "responses": [json.loads(r.to_json()) for r in responses]}
    path.write_text(json.dumps(blob, indent=2, sort_keys=True))


def match_item_tags(provider, item_id, title, description, vocabulary: SharedVocabulary):
    """
    Asks the provider how well every vocabulary tag fits an item. Tags the provider
    leaves out are dropped, tags it invents are logged and dropped.

    Arguments:
        provider: a provider, usually a `CachedProvider`
        item_id: id of the item
        title: item title, must not be empty
        description: item description, an empty one uses the title-only prompt
        vocabulary: the `SharedVocabulary`

    Returns:
        list of `(tag_index, raw_score)` in vocabulary order
    """
    if len(vocabulary.matchable_tags) == 0:
        raise ValueError("`match_item_tags` needs a non-empty vocabulary.")
    if not title or not str(title).strip():
        raise ValueError(f"Item `{item_id}` needs a non-empty title to be matched.")
    template = default_template("item_match", title_only=not (description or "").strip())
    request = template.render(**item_fields(item_id, title, description, vocabulary.matchable_tags))
    response = provider.complete(request, temperature=0.0)
    scores = {}
    for tag, score in response.pairs:
        if tag not in vocabulary or tag == UNKNOWN_TAG:
            logger.warning("dropping unknown tag '%s' returned for item %s", tag, item_id)
            continue
        scores[vocabulary.index(tag)] = int(score)
    return sorted(scores.items())


def match_catalog(provider, items: Sequence[Dict], vocabulary, workers=1):
    """
    Runs `match_item_tags` for a list of item records (`item`, `title`, `description`).
    With `workers > 1` the queries run in a thread pool, the result is the same
    dictionary as the sequential run.
    """
    def one(record):
        return record["item"], match_item_tags(
            provider, record["item"], record["title"], record.get("description", ""), vocabulary
        )

    ordered = sorted(items, key=lambda r: r["item"])
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(one, ordered))
    else:
        pairs = [one(r) for r in ordered]
    return dict(pairs)


def _by_score(raw_scores, vocabulary=None):
    def tag_name(i):
        return vocabulary.tags[i] if vocabulary is not None else f"{i:012d}"

    return sorted(raw_scores, key=lambda p: (-p[1], tag_name(p[0])))


def select_tags(raw_scores, strategy: SelectionStrategy, vocabulary=None):
    """
    Selects the tags an item keeps. Ties in score are broken alphabetically by tag
    when a vocabulary is given and by tag index otherwise.

    Arguments:
        raw_scores: list of `(tag_index, raw_score)` with distinct indices
        strategy: a `SelectionStrategy`
        vocabulary: optional `SharedVocabulary` used for tie-breaking

    Usage:

    ```python
    from crossrec.tags import SelectionStrategy, select_tags

    raw = [(0, 90), (1, 85), (2, 75), (3, 72), (4, 68), (5, 40)]
    picked = select_tags(raw, SelectionStrategy("hybrid", R=3, theta=70, M=5))
    assert [s for _, s in picked] == [90, 85, 75, 72]
    ```
    """
    indices = [i for i, _ in raw_scores]
    if len(set(indices)) != len(indices):
        raise ValueError(f"`raw_scores` must have distinct tag indices, got {indices}.")
    ranked = _by_score(raw_scores, vocabulary)
    if strategy.mode == "top_r":
        return ranked[: strategy.R]
    above = [p for p in ranked if p[1] >= strategy.theta]
    if strategy.mode == "threshold":
        return above
    chosen = {i for i, _ in ranked[: strategy.R]} | {i for i, _ in above}
    return [p for p in ranked if p[0] in chosen][: strategy.M]


@non_empty("selected")
def normalize_scores(selected, item="", M=None):
    """
    Turns selected raw scores into soft weights by dividing by their sum. `M` caps
    the number of entries of the result.

    Usage:

    ```python
    from crossrec.tags import normalize_scores

    vector = normalize_scores([(3, 80), (7, 20)], item="i1")
    assert vector.entries == ((3, 0.8), (7, 0.2))
    ```
    """
    total = math.fsum(s for _, s in selected)
    if total <= 0:
        raise ValueError(f"Selected scores of `{item}` must have a positive sum, got {selected}.")
    return TagScoreVector(item=item, entries=tuple((i, s / total) for i, s in selected), M=M)


def unknown_vector(item, vocabulary):
    return TagScoreVector(item=item, entries=((vocabulary.unknown_index, 1.0),))


def tag_vector(item, raw_scores, strategy, vocabulary, representation="weighted_multi_hot"):
    """
    Builds the soft tag vector of an item from its raw match scores. Items without any
    selected tag fall back to the `<unknown>` tag.

    Arguments:
        item: item id
        raw_scores: list of `(tag_index, raw_score)`
        strategy: a `SelectionStrategy`
        vocabulary: the `SharedVocabulary`
        representation: `one_hot`, `unweighted_multi_hot` or `weighted_multi_hot`
    """
    if representation not in REPRESENTATIONS:
        raise ValueError(
            f"`representation` must be one of {list(REPRESENTATIONS)}, got '{representation}'."
        )
    selected = select_tags(raw_scores, strategy, vocabulary)
    if not selected:
        return unknown_vector(item, vocabulary)
    cap = strategy.M if strategy.mode == "hybrid" else None
    if representation == "one_hot":
        return TagScoreVector(item=item, entries=((selected[0][0], 1.0),), M=cap)
    if representation == "unweighted_multi_hot":
        return normalize_scores([(i, 1) for i, _ in selected], item=item, M=cap)
    return normalize_scores(selected, item=item, M=cap)


def keyword_tag_vector(item, title, vocabulary):
    """
    Static keyword assignment: every vocabulary tag that occurs literally in the
    lowercased title gets an equal share of the weight.
    """
    text = canonical_tag(title)
    hits = [i for i, t in enumerate(vocabulary.matchable_tags) if t and t in text]
    if not hits:
        return unknown_vector(item, vocabulary)
    return TagScoreVector(item=item, entries=tuple((i, 1.0 / len(hits)) for i in hits))


def catalog_tag_vectors(raw_scores: Dict[str, Sequence], items, strategy, vocabulary, representation="weighted_multi_hot"):
    """`tag_vector` for every item id in `items`, items without raw scores get `<unknown>`."""
    return {
        item: tag_vector(item, raw_scores.get(item, []), strategy, vocabulary, representation)
        for item in items
    }


def keyword_tag_vectors(titles: Dict[str, str], items, vocabulary):
    """`keyword_tag_vector` for every item id in `items`."""
    return {item: keyword_tag_vector(item, titles.get(item, ""), vocabulary) for item in items}


def write_vocabularies(vocabularies, path):
    lines = [json.dumps({"domain": v.domain, "tags": list(v.tags)}) for v in vocabularies]
    pathlib.Path(path).write_text("".join(line + "\n" for line in lines))


def read_vocabularies(path) -> List[TagVocabulary]:
    rows = [json.loads(line) for line in pathlib.Path(path).read_text().splitlines() if line]
    return [TagVocabulary(domain=r["domain"], tags=tuple(r["tags"])) for r in rows]


def write_item_entries(entries: Dict[str, Sequence], path):
    """Writes `{item, entries}` JSON lines sorted by item, used for raw scores and weights alike."""
    lines = [
        json.dumps({"item": item, "entries": [[i, w] for i, w in entries[item]]})
        for item in sorted(entries)
    ]
    pathlib.Path(path).write_text("".join(line + "\n" for line in lines))


def read_item_entries(path):
    rows = [json.loads(line) for line in pathlib.Path(path).read_text().splitlines() if line]
    return {r["item"]: [(int(i), w) for i, w in r["entries"]] for r in rows}


def write_tag_vectors(vectors: Dict[str, TagScoreVector], path):
    write_item_entries({item: v.entries for item, v in vectors.items()}, path)


def read_tag_vectors(path):
    return {item: TagScoreVector(item, tuple(e)) for item, e in read_item_entries(path).items()}
