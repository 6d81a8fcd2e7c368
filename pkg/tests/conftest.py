import pytest

from crossrec.embedding import synthetic_features
from crossrec.interactions import ItemCatalog, UserSequences, chronological_split, make_domains
from crossrec.model import CrossDomainModel, Hyperparams
from crossrec.tags import SharedVocabulary, TagScoreVector, TagVocabulary


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="also run the slow end-to-end tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long running end-to-end runs, need --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


TOY_SEQUENCES = {
    "u1": [("a0", 0), ("b0", 1), ("a1", 0), ("b1", 1), ("a2", 0), ("b2", 1), ("a3", 0)],
    "u2": [("a1", 0), ("a2", 0), ("b1", 1), ("b3", 1), ("a3", 0), ("b0", 1), ("a0", 0)],
    "u3": [("b2", 1), ("a0", 0), ("a3", 0), ("b3", 1), ("a1", 0), ("b0", 1), ("b1", 1)],
}


@pytest.fixture
def domains():
    return make_domains(["X", "Y"])


@pytest.fixture
def toy_catalog(domains):
    return ItemCatalog([["a0", "a1", "a2", "a3"], ["b0", "b1", "b2", "b3"]], domains)


@pytest.fixture
def toy_users():
    return [UserSequences.from_merged(u, merged) for u, merged in sorted(TOY_SEQUENCES.items())]


@pytest.fixture
def toy_split(domains):
    sequences = {u: UserSequences.from_merged(u, m) for u, m in TOY_SEQUENCES.items()}
    return chronological_split(sequences, domains)


@pytest.fixture
def toy_vocabulary():
    return SharedVocabulary.from_domains(
        [TagVocabulary("X", ("red", "blue")), TagVocabulary("Y", ("blue", "green"))]
    )


@pytest.fixture
def toy_features(toy_catalog, toy_vocabulary):
    vectors = {
        "a0": TagScoreVector("a0", ((0, 0.6), (1, 0.4))),
        "a1": TagScoreVector("a1", ((1, 1.0),)),
        "b0": TagScoreVector("b0", ((1, 0.25), (2, 0.75))),
        "b2": TagScoreVector("b2", ((2, 1.0),)),
    }
    return synthetic_features(toy_catalog, toy_vocabulary, vectors, e=8, seed=3)


@pytest.fixture
def toy_hyper():
    return Hyperparams(
        q=8, e=8, d=8, d_t=8, hidden=8, H=2, max_len=10, dropout=0.0, dtype="float64",
        batch_size=2, max_epochs=3, patience=2, seed=11,
    )


@pytest.fixture
def toy_model(toy_hyper, toy_features):
    return CrossDomainModel(toy_hyper, toy_features.catalog.sizes, len(toy_features.vocabulary)).bind(toy_features)
