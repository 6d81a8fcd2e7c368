import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from crossrec.decorators import non_empty


@dataclass(frozen=True)
class RankResult:
    """Position of a held-out item in a full catalog ranking, 1 is the top."""

    user: str
    item: str
    rank: int

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"`rank` must be >= 1, got {self.rank}.")


def rank_of(scores, target):
    """
    1-based rank of `target` when `scores` are sorted descending and ties keep index
    order, the same order a stable sort produces.

    Usage:

    ```python
    from crossrec.metrics import rank_of

    assert rank_of([0.1, 0.5, 0.5, 0.2], target=2) == 2
    assert rank_of([0.3, 0.3], target=0) == 1
    ```
    """
    scores = np.asarray(scores)
    value = scores[target]
    return int(1 + (scores > value).sum() + (scores[:target] == value).sum())


@non_empty("ranks")
def mrr(ranks: Sequence[RankResult]):
    """
    Mean reciprocal rank.

    Usage:

    ```python
    from crossrec.metrics import RankResult, mrr

    ranks = [RankResult("a", "x", 1), RankResult("b", "y", 2), RankResult("c", "z", 4)]
    assert abs(mrr(ranks) - 0.5833333333) < 1e-9
    ```
    """
    return math.fsum(1.0 / r.rank for r in ranks) / len(ranks)


@non_empty("ranks")
def ndcg_at_k(ranks: Sequence[RankResult], k):
    """
    NDCG@k with a single relevant item per user, so the ideal DCG is 1 and a user
    contributes `1/log2(rank + 1)` when the item is in the top `k`.

    Usage:

    ```python
    from crossrec.metrics import RankResult, ndcg_at_k

    assert ndcg_at_k([RankResult("a", "x", 3)], k=5) == 0.5
    assert ndcg_at_k([RankResult("a", "x", 6)], k=5) == 0.0
    ```
    """
    if k < 1:
        raise ValueError(f"`k` must be >= 1, got {k}.")
    return math.fsum(1.0 / math.log2(r.rank + 1) if r.rank <= k else 0.0 for r in ranks) / len(ranks)


@dataclass
class MetricsReport:
    domain: str
    mrr: float
    ndcg5: float
    ndcg10: float
    users: int
    skipped: int = 0
    fingerprint: str = ""

    @classmethod
    def from_ranks(cls, domain, ranks, skipped=0, fingerprint=""):
        return cls(
            domain=domain,
            mrr=mrr(ranks),
            ndcg5=ndcg_at_k(ranks, 5),
            ndcg10=ndcg_at_k(ranks, 10),
            users=len(ranks),
            skipped=skipped,
            fingerprint=fingerprint,
        )

    def to_dict(self):
        return asdict(self)


def format_table(rows, headers):
    """Renders rows of values as a left aligned plain text table, floats with 4 decimals."""

    def cell(value):
        if isinstance(value, float):
            return f"{value:.4f}"
        return str(value)

    body = [[cell(v) for v in row] for row in rows]
    widths = [max([len(h)] + [len(r[i]) for r in body]) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in body)
    return "\n".join(lines) + "\n"
