"""
Providers answer rendered prompts with a `TagResponse`. The offline providers in this
module (`MockProvider`, `ScriptedProvider`) are what the tests and the synthetic
pipeline use, `OpenAIProvider` is a thin adapter for a real chat completion endpoint.
"""
import hashlib
import json
import logging
import pathlib
import random
import threading
import time
from typing import Dict, Mapping, Optional, Protocol, Sequence

from crossrec.errors import ProviderError
from crossrec.prompts import PromptRequest, TagResponse, canonical_tag, parse_tag_lines

logger = logging.getLogger(__name__)

DOMAIN_POOLS = {
    "movie": [
        "war", "romance", "history", "comedy", "thriller", "horror", "drama", "animation",
        "documentary", "science fiction", "fantasy", "crime", "musical", "western",
        "family", "mystery", "adventure", "biography", "sports", "superhero",
        "noir", "coming of age", "satire", "disaster", "heist", "spy", "martial arts",
        "independent", "classic", "foreign language",
    ],
    "book": [
        "war", "romance", "history", "fantasy", "mystery", "biography", "poetry",
        "science fiction", "self help", "philosophy", "thriller", "young adult",
        "classic literature", "cookbook", "travel", "memoir", "horror", "graphic novel",
        "religion", "science", "business", "children", "humor", "true crime", "essays",
        "short stories", "drama", "politics", "art", "economics",
    ],
    "food": [
        "snack", "organic", "gluten free", "sweet", "spicy", "beverage", "coffee", "tea",
        "baking", "breakfast", "vegan", "sauce", "candy", "chocolate", "healthy",
        "protein", "dairy free", "seasoning", "canned", "frozen", "gourmet", "nuts",
        "dried fruit", "pasta", "rice", "oil", "cereal", "low sugar", "gift", "bulk",
    ],
    "kitchen": [
        "cookware", "bakeware", "utensil", "knife", "storage", "appliance", "coffee maker",
        "blender", "cutlery", "nonstick", "stainless steel", "cast iron", "glassware",
        "dinnerware", "gadget", "cleaning", "organizer", "measuring", "grill", "tea kettle",
        "mixing bowl", "food prep", "dishwasher safe", "silicone", "wooden", "compact",
        "professional", "gift set", "barware", "thermometer",
    ],
}

GENERIC_POOL = [
    "quality", "popular", "budget", "premium", "classic", "modern", "compact", "gift",
    "everyday", "novelty", "durable", "lightweight", "colorful", "minimal", "vintage",
    "handmade", "eco friendly", "family", "professional", "travel",
]


class Provider(Protocol):
    provider_id: str

    def complete(self, request: PromptRequest, temperature: float = 0.0) -> TagResponse:
        ...


def _unit_hash(*parts):
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") / 2 ** 64


def cache_key(provider_id, prompt_text):
    return hashlib.sha256(f"{provider_id}\n{prompt_text}".encode("utf-8")).hexdigest()


class MockProvider:
    """
    Deterministic stand-in for a language model.

    Domain tag prompts are answered with a seeded shuffle of a built-in tag pool for
    the domain with hash-derived scores. Item matching prompts are answered with a
    seeded hash of `(item id, tag)` mapped into [1, 100]; tags scoring below
    `mention_floor` are left out. When `affinities` are given (planted mode) the
    answers come from those hidden item-tag affinities instead: the score of a tag
    is `affinity * 100`.

    Arguments:
        seed: seed for the shuffle and the hashes
        affinities: optional mapping of item id to a `{tag: affinity}` dictionary
        item_domains: optional mapping of item id to domain name, used in planted mode
        mention_floor: lowest item matching score the mock bothers to mention

    Usage:

    ```python
    from crossrec.prompts import default_template
    from crossrec.providers import MockProvider

    provider = MockProvider(seed=1)
    request = default_template("domain_tags").render(domain="movie", N=5)
    first = provider.complete(request)
    assert first == provider.complete(request)
    assert len(first) == 5
    ```
    """

    def __init__(self, seed=0, affinities=None, item_domains=None, mention_floor=30):
        self.seed = seed
        self.affinities = None
        if affinities is not None:
            self.affinities = {
                item: {canonical_tag(t): float(a) for t, a in tags.items()}
                for item, tags in affinities.items()
            }
        self.item_domains = dict(item_domains or {})
        self.mention_floor = mention_floor
        self.calls = 0
        self._lock = threading.Lock()

    @property
    def provider_id(self):
        return f"mock-{self.seed}" + ("-planted" if self.affinities is not None else "")

    def pool(self, domain):
        if self.affinities is not None:
            tags = {
                tag
                for item, aff in self.affinities.items()
                if not self.item_domains or self.item_domains.get(item) == domain
                for tag, a in aff.items()
                if a > 0
            }
            return sorted(tags)
        return list(DOMAIN_POOLS.get(canonical_tag(domain), GENERIC_POOL))

    def complete(self, request, temperature=0.0):
        with self._lock:
            self.calls += 1
            call_nr = self.calls
        if request.kind == "domain_tags":
            response = self._domain_tags(request.fields["domain"], int(request.fields["N"]))
        else:
            response = self._item_match(request.fields["item_id"], request.fields["tag_list"])
        if temperature > 0:
            rng = random.Random(f"{self.seed}:{call_nr}:{request.text}")
            kept = tuple(p for p in response.pairs if rng.random() >= 0.3 * min(temperature, 1.0))
            response = TagResponse(kept or response.pairs[:1], kind=response.kind)
        return response

    def _domain_tags(self, domain, n):
        pool = self.pool(domain)
        random.Random(f"{self.seed}:{canonical_tag(domain)}").shuffle(pool)
        pairs = [
            (tag, round(0.3 + 0.7 * _unit_hash(self.seed, "domain", domain, tag), 3))
            for tag in pool[:n]
        ]
        return TagResponse(tuple(pairs), kind="domain_tags")

    def _item_match(self, item_id, tag_list):
        pairs = []
        for tag in tag_list:
            tag = canonical_tag(tag)
            if self.affinities is not None:
                affinity = self.affinities.get(item_id, {}).get(tag, 0.0)
                if affinity <= 0:
                    continue
                score = min(100, max(1, int(round(affinity * 100))))
            else:
                score = 1 + min(99, int(_unit_hash(self.seed, "item", item_id, tag) * 100))
                if score < self.mention_floor:
                    continue
            pairs.append((tag, float(score)))
        return TagResponse(tuple(pairs), kind="item_match")


class ScriptedProvider:
    """
    Provider that replays prepared answers, useful to pin down exact behavior in tests.

    Arguments:
        domain_responses: list of `TagResponse` (or lists of pairs) handed out in order
        item_responses: mapping of item id to `{tag: score}`
        failures: number of calls that raise before answers are handed out
    """

    provider_id = "scripted"

    def __init__(self, domain_responses=(), item_responses=None, failures=0):
        self.domain_responses = [
            r if isinstance(r, TagResponse) else TagResponse(tuple(r), kind="domain_tags")
            for r in domain_responses
        ]
        self.item_responses = dict(item_responses or {})
        self.failures = failures
        self.calls = 0

    def complete(self, request, temperature=0.0):
        self.calls += 1
        if self.failures > 0:
            self.failures -= 1
            raise RuntimeError("scripted provider failure")
        if request.kind == "domain_tags":
            if not self.domain_responses:
                raise RuntimeError("scripted provider ran out of domain responses")
            return self.domain_responses.pop(0)
        scores = self.item_responses.get(request.fields["item_id"], {})
        return TagResponse(tuple((t, float(s)) for t, s in scores.items()), kind="item_match")


class OpenAIProvider:
    """
    Adapter for an OpenAI compatible chat completion endpoint. Needs the `llm` extra.

    Arguments:
        model: model name passed to the endpoint
        base_url: optional base url of the endpoint
        api_key: optional key, the SDK falls back to its environment variables
    """

    def __init__(self, model, base_url=None, api_key=None):
        from openai import OpenAI

        self.client = OpenAI(base_url=base_url, api_key=api_key)
        self.model = model

    @property
    def provider_id(self):
        return f"openai-{self.model}"

    def complete(self, request, temperature=0.0):
        response = self.client.chat.completions.create(
            model=self.model,
            messages=[{"role": "user", "content": request.text}],
            temperature=temperature,
        )
        content = response.choices[0].message.content or ""
        logger.debug("raw %s response: %r", self.provider_id, content)
        return parse_tag_lines(content, request.kind)


class TagCache:
    """
    Append-only JSON lines cache of provider answers. Every line holds the `key`,
    the `response` and a `created_at` unix timestamp. Writes are serialised with a lock.
    """

    def __init__(self, path=None):
        self.path = pathlib.Path(path) if path is not None else None
        self._entries: Dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line:
                    row = json.loads(line)
                    self._entries[row["key"]] = json.dumps(row["response"])

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._entries

    def get(self, key) -> Optional[TagResponse]:
        blob = self._entries.get(key)
        return None if blob is None else TagResponse.from_json(blob)

    def put(self, key, response):
        with self._lock:
            if key in self._entries:
                return
            blob = response.to_json()
            self._entries[key] = blob
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                row = {"key": key, "response": json.loads(blob), "created_at": int(time.time())}
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(row, sort_keys=True) + "\n")


class CachedProvider:
    """
    Wraps a provider with a `TagCache` and a retry loop. Only deterministic calls
    (temperature 0) are cached.

    Usage:

    ```python
    from crossrec.prompts import default_template
    from crossrec.providers import CachedProvider, MockProvider, TagCache

    inner = MockProvider(seed=3)
    provider = CachedProvider(inner, TagCache())
    request = default_template("domain_tags").render(domain="book", N=4)
    provider.complete(request)
    provider.complete(request)
    assert inner.calls == 1
    ```
    """

    def __init__(self, provider, cache=None, retries=2):
        if retries < 0:
            raise ValueError(f"`retries` must be >= 0, got {retries}.")
        self.provider = provider
        self.cache = cache if cache is not None else TagCache()
        self.retries = retries

    @property
    def provider_id(self):
        return self.provider.provider_id

    def complete(self, request, temperature=0.0):
        key = cache_key(self.provider_id, request.text)
        if temperature == 0:
            hit = self.cache.get(key)
            if hit is not None:
                logger.debug("cache hit %s", key[:12])
                return hit
            logger.debug("cache miss %s", key[:12])
        last_error = None
        for attempt in range(self.retries + 1):
            try:
                response = self.provider.complete(request, temperature=temperature)
                break
            except Exception as e:
                last_error = e
                logger.warning(
                    "provider %s failed (attempt %d of %d): %s",
                    self.provider_id, attempt + 1, self.retries + 1, e,
                )
        else:
            raise ProviderError(
                f"provider `{self.provider_id}` failed {self.retries + 1} times: {last_error}"
            )
        logger.debug("raw response from %s: %s", self.provider_id, response.to_json())
        if temperature == 0:
            self.cache.put(key, response)
        return response


def mock_provider(seed=0, affinities=None, item_domains=None):
    """The deterministic offline provider, planted when `affinities` are given."""
    return MockProvider(seed=seed, affinities=affinities, item_domains=item_domains)


def make_provider(kind, seed=0, affinities=None, item_domains=None, model=None):
    """Builds a provider from the `tagging.provider` config value."""
    if kind == "mock":
        return mock_provider(seed)
    if kind == "planted":
        if affinities is None:
            raise ValueError("The `planted` provider needs item affinities.")
        return mock_provider(seed, affinities=affinities, item_domains=item_domains)
    if kind == "openai":
        if not model:
            raise ValueError("The `openai` provider needs a `model`.")
        return OpenAIProvider(model=model)
    raise ValueError(f"`provider` must be one of ['mock', 'planted', 'openai'], got '{kind}'.")


def item_fields(item_id, title, description, tags: Sequence[str]) -> Mapping:
    return {
        "item_id": item_id,
        "item_title": title,
        "item_description": description,
        "tag_list": list(tags),
    }
