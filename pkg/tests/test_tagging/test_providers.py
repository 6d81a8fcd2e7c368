import json

import pytest

from crossrec.errors import ProviderError
from crossrec.prompts import TagResponse, default_template
from crossrec.providers import CachedProvider, MockProvider, ScriptedProvider, TagCache, make_provider, mock_provider
from crossrec.tags import SharedVocabulary, generate_domain_tags, match_catalog, match_item_tags


@pytest.fixture
def request_():
    return default_template("domain_tags").render(domain="movie", N=6)


def test_mock_is_deterministic(request_):
    assert MockProvider(seed=4).complete(request_) == MockProvider(seed=4).complete(request_)


def test_mock_seed_matters(request_):
    assert MockProvider(seed=1).complete(request_) != MockProvider(seed=2).complete(request_)


def test_mock_provider_factory(request_):
    """The factory gives the same answers as a provider built by hand."""
    provider = mock_provider(4)
    assert provider.provider_id == "mock-4"
    assert provider.complete(request_).to_json() == MockProvider(seed=4).complete(request_).to_json()
    assert mock_provider(4, affinities={"i1": {"red": 1.0}}).provider_id == "mock-4-planted"


def test_planted_scores():
    """Planted answers are the hidden affinities times 100."""
    provider = MockProvider(affinities={"i1": {"red": 0.5, "blue": 0.3}})
    request = default_template("item_match").render(
        item_id="i1", item_title="t", item_description="d", tag_list=["red", "blue", "green"]
    )
    assert provider.complete(request).pairs == (("red", 50.0), ("blue", 30.0))


def test_cache_hits(tmp_path, request_):
    """A cached deterministic prompt reaches the inner provider once, also after a reload."""
    inner = MockProvider(seed=0)
    path = tmp_path / "cache.jsonl"
    first = CachedProvider(inner, TagCache(path)).complete(request_)
    second = CachedProvider(inner, TagCache(path)).complete(request_)
    assert first == second
    assert inner.calls == 1
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == 1
    assert set(rows[0]) == {"key", "response", "created_at"}


def test_no_cache_above_zero_temperature(request_):
    inner = MockProvider(seed=0)
    provider = CachedProvider(inner, TagCache())
    provider.complete(request_, temperature=0.7)
    provider.complete(request_, temperature=0.7)
    assert inner.calls == 2
    assert len(provider.cache) == 0


def test_retries(request_):
    inner = ScriptedProvider(domain_responses=[[("war", 0.5)]], failures=2)
    response = CachedProvider(inner, retries=2).complete(request_)
    assert response.tags == ["war"]
    assert inner.calls == 3


def test_retries_exhausted(request_):
    inner = ScriptedProvider(failures=5)
    with pytest.raises(ProviderError):
        CachedProvider(inner, retries=1).complete(request_)
    assert inner.calls == 2


def test_generation_failure_writes_transcript(tmp_path):
    """Answers collected before the failure end up in the transcript."""
    inner = ScriptedProvider(domain_responses=[[("war", 0.5)]])
    path = tmp_path / "transcript-movie.json"
    with pytest.raises(ProviderError) as info:
        generate_domain_tags(inner, "movie", R=3, N=2, transcript_path=path)
    assert info.value.transcript_path == path
    blob = json.loads(path.read_text())
    assert blob["domain"] == "movie"
    assert len(blob["responses"]) == 1


def test_generate_votes():
    responses = [[("war", 0.9), ("romance", 0.4)], [("romance", 0.8), ("war", 0.3)], [("war", 0.2), ("drama", 1.0)]]
    vocab = generate_domain_tags(ScriptedProvider(domain_responses=responses), "movie", R=3, N=2)
    assert vocab.tags == ("war", "romance")
    assert vocab.domain == "movie"


@pytest.mark.parametrize("R,N", [(0, 5), (5, 0)])
def test_generate_bad_counts(R, N):
    with pytest.raises(ValueError):
        generate_domain_tags(MockProvider(), "movie", R=R, N=N)


def test_match_drops_unknown_tags():
    vocabulary = SharedVocabulary(["war", "romance"])
    provider = ScriptedProvider(item_responses={"i1": {"romance": 70, "pirates": 90}})
    assert match_item_tags(provider, "i1", "A title", "", vocabulary) == [(1, 70)]


@pytest.mark.parametrize("title", ["", "   "])
def test_match_needs_title(title):
    with pytest.raises(ValueError):
        match_item_tags(MockProvider(), "i1", title, "", SharedVocabulary(["war"]))


def test_match_needs_vocabulary():
    with pytest.raises(ValueError):
        match_item_tags(MockProvider(), "i1", "t", "", SharedVocabulary([]))


def test_match_catalog_workers():
    """The thread pool gives the same result as the sequential run."""
    vocabulary = SharedVocabulary(["war", "romance", "history", "comedy"])
    items = [{"item": f"i{k}", "title": f"Title {k}", "description": "d"} for k in range(12)]
    sequential = match_catalog(MockProvider(seed=5), items, vocabulary)
    parallel = match_catalog(CachedProvider(MockProvider(seed=5)), items, vocabulary, workers=4)
    assert parallel == sequential
    assert list(parallel) == sorted(parallel)


def test_make_provider():
    assert make_provider("mock", seed=3).provider_id == "mock-3"
    assert make_provider("planted", affinities={}).provider_id.endswith("planted")
    with pytest.raises(ValueError):
        make_provider("planted")
    with pytest.raises(ValueError):
        make_provider("openai")
    with pytest.raises(ValueError):
        make_provider("scripted")


def test_tag_response_roundtrip_via_cache():
    cache = TagCache()
    response = TagResponse((("war", 0.5),))
    cache.put("k", response)
    cache.put("k", TagResponse((("other", 0.5),)))
    assert cache.get("k") == response
    assert "k" in cache
    assert cache.get("missing") is None
