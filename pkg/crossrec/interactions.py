import json
import logging
import pathlib
import itertools as it
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

from crossrec.decorators import two_domains_only
from crossrec.errors import InteractionParseError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DomainId:
    """One of the two item domains of a dataset, `index` is 0 for X and 1 for Y."""

    name: str
    index: int


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    domain: DomainId
    timestamp: int


@dataclass(frozen=True)
class Target:
    """A held-out item together with the index of its domain."""

    item: str
    domain: int


@dataclass
class UserSequences:
    """
    The three chronological views on the behavior of a single user. The merged
    sequence holds `(item, domain_index)` pairs, the other two are projections of it.
    """

    user: str
    seq_x: List[str] = field(default_factory=list)
    seq_y: List[str] = field(default_factory=list)
    seq_merged: List[Tuple[str, int]] = field(default_factory=list)

    @classmethod
    def from_merged(cls, user, merged):
        merged = [(item, int(d)) for item, d in merged]
        return cls(
            user=user,
            seq_x=[item for item, d in merged if d == 0],
            seq_y=[item for item, d in merged if d == 1],
            seq_merged=merged,
        )

    def domain_sequence(self, domain):
        return self.seq_x if domain == 0 else self.seq_y

    def append(self, target):
        return UserSequences.from_merged(
            self.user, self.seq_merged + [(target.item, target.domain)]
        )

    def is_consistent(self):
        """Checks the projection and conservation properties of the three views."""
        if len(self.seq_merged) != len(self.seq_x) + len(self.seq_y):
            return False
        projected = UserSequences.from_merged(self.user, self.seq_merged)
        return projected.seq_x == self.seq_x and projected.seq_y == self.seq_y


class ItemCatalog:
    """
    Maps item ids to dense indices. Every domain gets its own contiguous range
    of local indices starting at 0, assigned in lexicographic order of the item ids.
    The global index of an item is the local index shifted by the sizes of the
    domains before it, which is the row layout of every item-level table.

    Usage:

    ```python
    from crossrec.interactions import ItemCatalog, DomainId

    catalog = ItemCatalog([["c", "a"], ["b"]], (DomainId("food", 0), DomainId("kitchen", 1)))
    assert catalog.items(0) == ["a", "c"]
    assert catalog.local_index("c") == 1
    assert catalog.global_index("b") == 2
    ```
    """

    def __init__(self, items_per_domain, domains):
        self.domains = tuple(domains)
        self._items = [sorted(set(items)) for items in items_per_domain]
        self._lookup = {}
        for d, items in enumerate(self._items):
            for i, item in enumerate(items):
                if item in self._lookup:
                    raise ValueError(
                        f"Item `{item}` appears in more than one domain of the catalog."
                    )
                self._lookup[item] = (d, i)

    def __len__(self):
        return len(self._lookup)

    def __contains__(self, item):
        return item in self._lookup

    def __repr__(self):
        return f"<ItemCatalog sizes={self.sizes}>"

    @property
    def sizes(self):
        return tuple(len(items) for items in self._items)

    @property
    def offsets(self):
        return (0, self.sizes[0])

    def items(self, domain):
        return list(self._items[domain])

    def domain_of(self, item):
        return self._lookup[item][0]

    def local_index(self, item):
        return self._lookup[item][1]

    def global_index(self, item):
        d, i = self._lookup[item]
        return self.offsets[d] + i

    def all_items(self):
        """All item ids in global index order."""
        return self._items[0] + self._items[1]

    def write(self, path):
        lines = [
            json.dumps(
                {"item": item, "domain": self.domains[d].name, "domain_index": d, "index": i},
                sort_keys=True,
            )
            for d, items in enumerate(self._items)
            for i, item in enumerate(items)
        ]
        pathlib.Path(path).write_text("".join(line + "\n" for line in lines))

    @classmethod
    def read(cls, path):
        rows = [json.loads(line) for line in pathlib.Path(path).read_text().splitlines() if line]
        names = {}
        items = [[], []]
        for row in rows:
            names[row["domain_index"]] = row["domain"]
            items[row["domain_index"]].append(row["item"])
        if sorted(names) != [0, 1]:
            raise ValueError(f"Catalog at `{path}` does not describe two domains.")
        return cls(items, (DomainId(names[0], 0), DomainId(names[1], 1)))


@dataclass
class DatasetSplit:
    """
    Leave-last-out split of the merged sequences. `train` holds the sequences with the
    last two merged interactions removed, `valid` and `test` hold those two targets.
    """

    train: Dict[str, UserSequences]
    valid: Dict[str, Target]
    test: Dict[str, Target]
    item_catalog: ItemCatalog

    @property
    def domains(self):
        return self.item_catalog.domains

    @property
    def users(self):
        return sorted(self.train)

    def history(self, user, split="test"):
        """
        The sequences a prediction for `split` may look at: the training sequences
        for validation, the training sequences plus the validation target for test.
        """
        if split not in ("valid", "test"):
            raise ValueError(f"`split` must be 'valid' or 'test', got '{split}'.")
        sequences = self.train[user]
        if split == "test":
            sequences = sequences.append(self.valid[user])
        return sequences

    def write(self, path, catalog_path):
        """
        Writes one JSON line per user, sorted by user id. The `domains` key lists
        the domain name of every train item followed by the validation and test targets.
        """
        names = [d.name for d in self.domains]
        lines = []
        for user in self.users:
            train = self.train[user].seq_merged
            valid, test = self.valid[user], self.test[user]
            row = {
                "user": user,
                "train_items": [item for item, _ in train],
                "valid_target": valid.item,
                "test_target": test.item,
                "domains": [names[d] for _, d in train] + [names[valid.domain], names[test.domain]],
            }
            lines.append(json.dumps(row, sort_keys=True))
        pathlib.Path(path).write_text("".join(line + "\n" for line in lines))
        self.item_catalog.write(catalog_path)

    @classmethod
    def read(cls, path, catalog_path):
        catalog = ItemCatalog.read(catalog_path)
        index_of = {d.name: d.index for d in catalog.domains}
        train, valid, test = {}, {}, {}
        for line in pathlib.Path(path).read_text().splitlines():
            if not line:
                continue
            row = json.loads(line)
            doms = [index_of[name] for name in row["domains"]]
            user = row["user"]
            train[user] = UserSequences.from_merged(user, zip(row["train_items"], doms[:-2]))
            valid[user] = Target(row["valid_target"], doms[-2])
            test[user] = Target(row["test_target"], doms[-1])
        return cls(train=train, valid=valid, test=test, item_catalog=catalog)


def make_domains(names):
    names = tuple(names)
    if len(names) != 2 or names[0] == names[1]:
        raise ValueError(f"`domains` must be two distinct names, got {list(names)}.")
    return tuple(DomainId(name, i) for i, name in enumerate(names))


class Interactions:
    """
    This object wraps a list of interactions from two domains and adds the verbs
    that turn a raw behavior log into per-user sequences and a split.

    Usage:

    ```python
    from crossrec.interactions import Interactions

    rows = [("u1", "a", "food", 1), ("u1", "b", "kitchen", 2), ("u1", "c", "food", 3)]
    log = Interactions.from_records(rows, domains=("food", "kitchen"))

    sequences = log.sequences()
    assert sequences["u1"].seq_x == ["a", "c"]
    assert sequences["u1"].seq_y == ["b"]
    ```
    """

    def __init__(self, blob, domains):
        self.blob = list(blob)
        self.domains = tuple(domains)

    def __len__(self):
        return len(self.blob)

    def __iter__(self):
        return self.blob.__iter__()

    def __repr__(self):
        names = [d.name for d in self.domains]
        return f"<Interactions domains={names} len={len(self)} @{hex(id(self))}>"

    @classmethod
    def from_records(cls, rows, domains):
        """
        Builds a collection from `(user, item, domain_name, timestamp)` tuples.

        Arguments:
            rows: iterable of 4-tuples
            domains: the two domain names, the first one becomes domain X
        """
        doms = make_domains(domains)
        by_name = {d.name: d for d in doms}
        blob = []
        for user, item, name, timestamp in rows:
            if name not in by_name:
                raise ValueError(f"Unknown domain `{name}`, expected one of {list(by_name)}.")
            blob.append(Interaction(str(user), str(item), by_name[name], int(timestamp)))
        return cls(blob, doms)

    @classmethod
    def read_tsv(cls, path, domains, n=None):
        """
        Reads a tab separated interactions file with the columns user, item,
        domain name and timestamp. Blank lines are ignored.

        Arguments:
            path: filename
            domains: the two domain names, the first one becomes domain X
            n: Number of rows to read in. If `None`, all rows are read.
        """
        if n is not None and n <= 0:
            raise ValueError("Number of lines to read must be > 0.")
        doms = make_domains(domains)
        by_name = {d.name: d for d in doms}
        blob = []
        with open(path, encoding="utf-8") as f:
            lines = (line.rstrip("\n").rstrip("\r") for line in f)
            for line_nr, line in enumerate(it.islice(lines, 0, n), start=1):
                if not line.strip():
                    continue
                fields = line.split("\t")
                if len(fields) != 4:
                    raise InteractionParseError(
                        f"expected 4 tab separated fields, got {len(fields)}", line_nr
                    )
                user, item, name, raw_ts = fields
                if name not in by_name:
                    raise InteractionParseError(f"unknown domain name `{name}`", line_nr)
                try:
                    timestamp = int(raw_ts)
                except ValueError:
                    raise InteractionParseError(f"timestamp `{raw_ts}` is not an integer", line_nr)
                if timestamp < 0:
                    raise InteractionParseError(f"timestamp `{raw_ts}` is negative", line_nr)
                blob.append(Interaction(user, item, by_name[name], timestamp))
        logger.info("parsed %d interactions from %s", len(blob), path)
        return cls(blob, doms)

    def _create_new(self, blob):
        return Interactions(blob, domains=self.domains)

    def keep(self, *funcs):
        """
        Allows you to select which interactions to keep.

        Arguments:
            funcs: functions that indicate which interactions to keep
        """
        data = self.blob
        for func in funcs:
            data = [d for d in data if func(d)]
        return self._create_new(data)

    def users(self):
        return sorted({d.user for d in self})

    def items(self):
        return sorted({d.item for d in self})

    def drop_rare_items(self, min_count=5):
        """
        Removes the interactions with items that occur fewer than `min_count` times.

        Arguments:
            min_count: minimum number of interactions an item needs to survive
        """
        if min_count < 1:
            raise ValueError(f"`min_count` must be >= 1, got {min_count}.")
        counts = Counter(d.item for d in self)
        result = self.keep(lambda d: counts[d.item] >= min_count)
        logger.info(
            "dropped %d of %d items with fewer than %d interactions",
            sum(1 for c in counts.values() if c < min_count),
            len(counts),
            min_count,
        )
        return result

    @two_domains_only
    def filter_users(self, min_total=10, min_per_domain=3):
        """
        Keeps the users that have at least `min_total` interactions and at least
        `min_per_domain` interactions in both domains. This is a single pass.

        Arguments:
            min_total: minimum number of interactions over both domains
            min_per_domain: minimum number of interactions within each domain

        Usage:

        ```python
        from crossrec.interactions import Interactions

        rows = [("u1", f"x{i}", "food", i) for i in range(9)]
        rows += [("u1", f"y{i}", "kitchen", 10 + i) for i in range(3)]
        rows += [("u2", f"x{i}", "food", i) for i in range(10)]
        rows += [("u2", f"y{i}", "kitchen", 10 + i) for i in range(2)]

        kept = Interactions.from_records(rows, domains=("food", "kitchen")).filter_users()
        assert kept.users() == ["u1"]
        ```
        """
        if min_total < 1 or min_per_domain < 1:
            raise ValueError(
                f"`min_total` and `min_per_domain` must be >= 1, got {min_total} and {min_per_domain}."
            )
        totals = Counter(d.user for d in self)
        per_domain = Counter((d.user, d.domain.index) for d in self)

        def ok(user):
            return totals[user] >= min_total and all(
                per_domain[(user, dom.index)] >= min_per_domain for dom in self.domains
            )

        keep_users = {u for u in totals if ok(u)}
        logger.info("kept %d of %d users", len(keep_users), len(totals))
        return self.keep(lambda d: d.user in keep_users)

    def sequences(self):
        """
        Builds the per-user sequences. Interactions are ordered by timestamp, ties keep
        the order of the input. Users are returned sorted by id.
        """
        grouped = defaultdict(list)
        for d in self:
            grouped[d.user].append(d)
        result = {}
        for user in sorted(grouped):
            ordered = sorted(grouped[user], key=lambda d: d.timestamp)
            result[user] = UserSequences.from_merged(
                user, [(d.item, d.domain.index) for d in ordered]
            )
        return result

    @two_domains_only
    def split(self):
        return chronological_split(self.sequences(), self.domains)


def parse_interactions(path, domains=("X", "Y"), format="tsv"):
    """
    Reads an interactions file into a list of `Interaction` in file order.

    Arguments:
        path: tab separated file with user, item, domain name and timestamp
        domains: the two domain names
        format: layout of the file, only `tsv` is read
    """
    if format != "tsv":
        raise ValueError(f"Unknown interactions format `{format}`, only 'tsv' is supported.")
    return list(Interactions.read_tsv(path, domains=domains))


def filter_users(interactions: Sequence[Interaction], min_total=10, min_per_domain=3, domains=None):
    """
    List based variant of `Interactions.filter_users`. The domains are taken from
    the interactions unless given.
    """
    interactions = list(interactions)
    if domains is None:
        seen = sorted({d.domain for d in interactions}, key=lambda d: d.index)
        domains = seen if len(seen) == 2 else _fill_domains(seen)
    clump = Interactions(interactions, domains)
    return list(clump.filter_users(min_total=min_total, min_per_domain=min_per_domain))


def _fill_domains(seen):
    # a log that only touches one domain still needs two domains to be judged
    names = {d.index: d for d in seen}
    return tuple(names.get(i, DomainId(f"<missing-{i}>", i)) for i in (0, 1))


def build_sequences(interactions: Sequence[Interaction]):
    """List based variant of `Interactions.sequences`."""
    return Interactions(interactions, domains=()).sequences()


def chronological_split(sequences, domains=None):
    """
    Turns per-user sequences into a leave-last-out `DatasetSplit`. The last merged
    interaction of every user becomes the test target, the one before that the
    validation target.

    Arguments:
        sequences: dictionary of user id to `UserSequences`
        domains: the two `DomainId`s (or names), defaults to `("X", "Y")`

    Usage:

    ```python
    from crossrec.interactions import UserSequences, chronological_split

    merged = [("a", 0), ("b", 1), ("c", 0), ("d", 0), ("e", 1)]
    split = chronological_split({"u": UserSequences.from_merged("u", merged)})
    assert [i for i, _ in split.train["u"].seq_merged] == ["a", "b", "c"]
    assert split.valid["u"].item == "d"
    assert split.test["u"].item == "e"
    ```
    """
    if domains is None:
        domains = ("X", "Y")
    if all(isinstance(d, str) for d in domains):
        domains = make_domains(domains)
    train, valid, test = {}, {}, {}
    items = [set(), set()]
    for user in sorted(sequences):
        merged = sequences[user].seq_merged
        if len(merged) < 3:
            raise ValueError(
                f"User `{user}` has {len(merged)} merged interactions, a split needs at least 3."
            )
        for item, d in merged:
            items[d].add(item)
        train[user] = UserSequences.from_merged(user, merged[:-2])
        valid[user] = Target(*merged[-2])
        test[user] = Target(*merged[-1])
    return DatasetSplit(train, valid, test, ItemCatalog(items, domains))


def read_items(path):
    """
    Reads item metadata, one JSON object per line with the keys `item`, `domain`,
    `title` and optionally `description` and `affinity`. Returns the records sorted by item.
    """
    records = []
    for line_nr, line in enumerate(pathlib.Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        record = json.loads(line)
        for key in ("item", "title"):
            if key not in record:
                raise InteractionParseError(f"item record misses `{key}`", line_nr)
        record.setdefault("description", "")
        records.append(record)
    logger.info("read %d item records from %s", len(records), path)
    return sorted(records, key=lambda r: r["item"])
