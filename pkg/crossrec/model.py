"""
The cross-domain model: hyperparameters, the parameter registry, batch assembly over
the three sequences, the training objective, inference scores and checkpoints.
"""
import io
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import List, Tuple

import numpy as np
import torch
from torch import nn

from crossrec.attention import (
    FUSED_STREAM,
    MODALITIES,
    PROB_FLOOR,
    SEQUENCES,
    StreamEncoder,
    StreamId,
    encode_stream,
    fusion_weights,
    total_loss,
)
from crossrec.embedding import (
    PARAM_F32,
    PARAM_F64,
    cosine_matrix,
    fuse_item_embedding,
    init_tables,
    read_tensor_block,
    torch_dtype,
    write_tensor_block,
)
from crossrec.errors import ConfigError, NonFiniteLossError
from crossrec.metrics import RankResult, rank_of
from crossrec.tags import STRATEGIES, SelectionStrategy

logger = logging.getLogger(__name__)

ATTENTION_MODES = ("multi", "shared")
REDUCTIONS = ("mean", "sum")


@dataclass
class Hyperparams:
    """
    Every number the model and its training loop depend on. Defaults follow the
    reference setup: 256 dimensional learnable embeddings, 512 dimensional frozen
    vectors, batches of 256 and dropout 0.3.

    Usage:

    ```python
    from crossrec.model import Hyperparams

    hyper = Hyperparams(q=8, e=8, d=8, d_t=8, hidden=8)
    assert hyper.tag_weight == 0.2
    assert Hyperparams.from_dict(hyper.to_dict()) == hyper
    ```
    """

    q: int = 256
    e: int = 512
    d: int = 256
    d_t: int = 256
    hidden: int = 256
    H: int = 2
    max_len: int = 50
    alphas: Tuple[float, float, float] = (0.4, 0.2, 0.2)
    lambdas: Tuple[float, float] = (0.3, 0.1)
    dropout: float = 0.3
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    R: int = 5
    N: int = 30
    strategy: str = "hybrid"
    theta: float = 70.0
    M: int = 10
    use_tags: bool = True
    attention: str = "multi"
    fused_stream: bool = False
    fused_weight: float = 0.5
    reduction: str = "mean"
    dtype: str = "float32"

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.betas = tuple(float(b) for b in self.betas)
        if len(self.alphas) != 3:
            raise ConfigError("hyper.alphas", f"`alphas` needs three weights, got {self.alphas}.")
        if len(self.lambdas) != 2 or min(self.lambdas) < 0:
            raise ConfigError("hyper.lambdas", f"`lambdas` must be two non-negative numbers, got {self.lambdas}.")
        if min(self.alphas) < 0 or sum(self.alphas) > 1 + 1e-12:
            raise ConfigError("hyper.alphas", f"`alphas` must be non-negative and sum to at most 1, got {self.alphas}.")
        if not 0 <= self.dropout < 1:
            raise ConfigError("hyper.dropout", f"`dropout` must be in [0, 1), got {self.dropout}.")
        for name in ("q", "e", "d", "d_t", "hidden", "H", "max_len", "batch_size", "max_epochs", "patience"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"hyper.{name}", f"`{name}` must be a positive integer, got {value}.")
        for name in ("q", "e", "d", "d_t"):
            if getattr(self, name) % self.H:
                raise ConfigError(f"hyper.{name}", f"`{name}`={getattr(self, name)} is not divisible by H={self.H}.")
        if self.strategy not in STRATEGIES:
            raise ConfigError("hyper.strategy", f"`strategy` must be one of {list(STRATEGIES)}, got '{self.strategy}'.")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError("hyper.attention", f"`attention` must be one of {list(ATTENTION_MODES)}, got '{self.attention}'.")
        if self.reduction not in REDUCTIONS:
            raise ConfigError("hyper.reduction", f"`reduction` must be one of {list(REDUCTIONS)}, got '{self.reduction}'.")
        if not 0 <= self.fused_weight <= 1:
            raise ConfigError("hyper.fused_weight", f"`fused_weight` must be in [0, 1], got {self.fused_weight}.")
        if not self.use_tags and sum(self.alphas) <= 0:
            raise ConfigError("hyper.alphas", "Without tags the `alphas` must not all be zero.")
        try:
            torch_dtype(self.dtype)
        except ValueError as err:
            raise ConfigError("hyper.dtype", str(err)) from None

    @property
    def tag_weight(self):
        return round(1.0 - sum(self.alphas), 12)

    @property
    def torch_dtype(self):
        return torch_dtype(self.dtype)

    def selection(self):
        return SelectionStrategy(mode=self.strategy, R=self.R, theta=self.theta, M=self.M)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, blob, prefix="hyper"):
        known = {f.name for f in fields(cls)}
        for key in blob:
            if key not in known:
                raise ConfigError(f"{prefix}.{key}", f"Unknown key `{key}`.")
        return cls(**blob)


@dataclass
class ItemFeatureBundle:
    """The four modality embeddings of a single item and their fused embedding."""

    index: int
    e_id: torch.Tensor
    e_img: torch.Tensor
    e_tex: torch.Tensor
    e_tag: torch.Tensor
    e_item: torch.Tensor


@dataclass
class SequenceBatch:
    """
    Right padded global item indices of one sequence for a batch of users. `targets`
    holds the candidate index of the next item per position and -1 where there is none.
    """

    sequence: str
    items: torch.Tensor
    lengths: torch.Tensor
    targets: torch.Tensor

    def __len__(self):
        return self.items.shape[0]

    @property
    def positions(self):
        return int((self.targets >= 0).sum())


def _global_indices(user, sequence, catalog):
    if sequence == "X":
        return [catalog.global_index(i) for i in user.seq_x]
    if sequence == "Y":
        return [catalog.global_index(i) for i in user.seq_y]
    return [catalog.global_index(i) for i, _ in user.seq_merged]


def assemble_batch(users, sequence, catalog, max_len=50, teacher_forcing=True):
    """
    Builds a `SequenceBatch` for one of the sequences `X`, `Y` or `merged`.

    With `teacher_forcing` the inputs are every item but the last and the targets are
    the items that follow them. Without it the inputs are the whole sequence. Inputs
    longer than `max_len` keep their last `max_len` items. Targets are indices into the
    candidate catalog of the sequence: local indices for a domain, global indices for
    the merged sequence.

    Arguments:
        users: list of `UserSequences`
        sequence: `X`, `Y` or `merged`
        catalog: the `ItemCatalog`
        max_len: longest input kept
        teacher_forcing: shift the sequence into inputs and next item targets

    Usage:

    ```python
    from crossrec.interactions import ItemCatalog, UserSequences, make_domains
    from crossrec.model import assemble_batch

    catalog = ItemCatalog([["a", "b"], ["c"]], make_domains(["X", "Y"]))
    user = UserSequences.from_merged("u", [("a", 0), ("c", 1), ("b", 0)])
    batch = assemble_batch([user], "merged", catalog)
    assert batch.items.tolist() == [[0, 2]]
    assert batch.targets.tolist() == [[2, 1]]
    ```
    """
    if sequence not in SEQUENCES:
        raise ValueError(f"`sequence` must be one of {list(SEQUENCES)}, got '{sequence}'.")
    offset = catalog.offsets[1] if sequence == "Y" else 0
    rows, targets = [], []
    for user in users:
        g = _global_indices(user, sequence, catalog)
        if teacher_forcing:
            rows.append(g[:-1][-max_len:])
            targets.append([t - offset for t in g[1:]][-max_len:])
        else:
            rows.append(g[-max_len:])
            targets.append([])
    width = max([len(r) for r in rows] + [1])
    items = torch.zeros(len(rows), width, dtype=torch.long)
    target_tensor = torch.full((len(rows), width), -1, dtype=torch.long)
    for b, (row, target) in enumerate(zip(rows, targets)):
        items[b, : len(row)] = torch.as_tensor(row, dtype=torch.long)
        target_tensor[b, : len(target)] = torch.as_tensor(target, dtype=torch.long)
    lengths = torch.as_tensor([len(r) for r in rows], dtype=torch.long)
    return SequenceBatch(sequence, items, lengths, target_tensor)


class CrossDomainModel(nn.Module):
    """
    Item tables, fusion MLP and one `StreamEncoder` per active stream. The frozen image
    and text vectors and the soft tag weights are attached with `bind` as non-persistent
    buffers, so they never reach the optimizer or the checkpoint.

    Arguments:
        hyper: the `Hyperparams`
        sizes: number of items in domain X and in domain Y
        n_tags: size of the shared tag vocabulary
    """

    def __init__(self, hyper: Hyperparams, sizes, n_tags):
        super().__init__()
        self.hyper = hyper
        self.sizes = tuple(int(s) for s in sizes)
        self.n_tags = int(n_tags)
        if len(self.sizes) != 2 or min(self.sizes) < 1:
            raise ValueError(f"`sizes` must be two positive catalog sizes, got {self.sizes}.")
        dtype = hyper.torch_dtype
        tables = init_tables(
            hyper.seed,
            n_items=sum(self.sizes),
            n_tags=self.n_tags,
            d=hyper.d,
            d_t=hyper.d_t,
            q=hyper.q,
            hidden=hyper.hidden,
            e=hyper.e,
            dtype=dtype,
        )
        self.E_id = nn.Parameter(tables["E_id"])
        self.E_tag = nn.Parameter(tables["E_tag"])
        self.fusion = tables["fusion"]
        generator = torch.Generator().manual_seed(hyper.seed + 1)
        self.encoders = nn.ModuleDict(
            {
                s.key: StreamEncoder(self.stream_dim(s), hyper.H, hyper.max_len, generator, dtype)
                for s in self.streams
            }
        )
        self.catalog = None

    def __repr__(self):
        return f"<CrossDomainModel sizes={self.sizes} tags={self.n_tags} streams={len(self.streams)}>"

    @property
    def streams(self) -> List[StreamId]:
        if self.hyper.attention == "shared":
            return [FUSED_STREAM]
        modalities = MODALITIES if self.hyper.use_tags else ("id", "img", "tex")
        streams = [StreamId(s, m) for s in SEQUENCES for m in modalities]
        if self.hyper.fused_stream:
            streams.append(FUSED_STREAM)
        return streams

    def stream_dim(self, stream):
        return {
            "id": self.hyper.d,
            "img": self.hyper.e,
            "tex": self.hyper.e,
            "tag": self.hyper.d_t,
            "fused": self.hyper.q,
        }[stream.modality]

    def registry(self):
        """Every trainable tensor by name, in registration order."""
        return OrderedDict(self.named_parameters())

    def bind(self, features):
        """Attaches the frozen stores and tag weights of a `FeatureSet`."""
        if tuple(features.catalog.sizes) != self.sizes:
            raise ValueError(f"Features describe catalog sizes {features.catalog.sizes}, the model {self.sizes}.")
        if features.e != self.hyper.e:
            raise ValueError(f"Frozen vectors have dim {features.e}, the model expects e={self.hyper.e}.")
        if len(features.vocabulary) != self.n_tags:
            raise ValueError(f"Vocabulary has {len(features.vocabulary)} tags, the model expects {self.n_tags}.")
        dtype = self.hyper.torch_dtype
        for name, tensor in features.frozen(dtype).items():
            self.register_buffer(name, tensor, persistent=False)
        self.register_buffer("tag_w", features.tag_weights(dtype), persistent=False)
        self.catalog = features.catalog
        return self

    def _require_bound(self):
        if self.catalog is None:
            raise RuntimeError("Call `bind(features)` before using the model.")

    def item_tables(self):
        """Per modality `items x dim` tables in global catalog order."""
        self._require_bound()
        if self.hyper.use_tags:
            tag = self.tag_w @ self.E_tag
        else:
            tag = torch.zeros(sum(self.sizes), self.hyper.d_t, dtype=self.E_tag.dtype)
        tables = {"id": self.E_id, "img": self.img, "tex": self.tex, "tag": tag}
        if FUSED_STREAM in self.streams:
            tables["fused"] = self.fusion(torch.cat([self.E_id, self.img, self.tex, tag], dim=-1))
        return tables

    def item_bundle(self, item):
        """The `ItemFeatureBundle` of an item id, `e_item` recomputed from the other four."""
        self._require_bound()
        g = self.catalog.global_index(item)
        tables = self.item_tables()
        e_id, e_img, e_tex, e_tag = (tables[m][g] for m in MODALITIES)
        return ItemFeatureBundle(g, e_id, e_img, e_tex, e_tag, fuse_item_embedding(e_id, e_img, e_tex, e_tag, self.fusion))

    def candidates(self, sequence, table):
        nx = self.sizes[0]
        if sequence == "X":
            return table[:nx]
        if sequence == "Y":
            return table[nx:]
        return table

    def encode(self, stream, items, tables, training=False):
        """Per position outputs `(batch, len, dim)` of one stream."""
        dropout = self.hyper.dropout if training else 0.0
        out = self.encoders[stream.key](tables[stream.modality][items], dropout=dropout, training=training)
        if not torch.isfinite(out).all():
            raise NonFiniteLossError(stream.key, "attention output is not finite")
        return out

    def _stream_probs(self, stream, items, tables, training):
        out = self.encode(stream, items, tables, training)
        rows = self.candidates(stream.sequence, tables[stream.modality])
        return torch.softmax(cosine_matrix(out, rows), dim=-1)

    def sequence_distributions(self, sequence, items, tables=None, training=False):
        """
        Fused next item distributions `(batch, len, catalog)` for one sequence. Domain
        sequences predict over their own domain, the merged sequence over both.
        """
        tables = self.item_tables() if tables is None else tables
        if self.hyper.attention == "shared":
            if sequence != "merged":
                raise ValueError(f"Shared attention only encodes the merged sequence, got '{sequence}'.")
            return self._stream_probs(FUSED_STREAM, items, tables, training)
        weights = fusion_weights(self.hyper.alphas, use_tags=self.hyper.use_tags)
        probs = sum(
            w * self._stream_probs(StreamId(sequence, m), items, tables, training) for m, w in weights.items()
        )
        if sequence == "merged" and self.hyper.fused_stream:
            beta = self.hyper.fused_weight
            probs = (1 - beta) * probs + beta * self._stream_probs(FUSED_STREAM, items, tables, training)
        return probs

    @property
    def loss_sequences(self):
        return ("merged",) if self.hyper.attention == "shared" else SEQUENCES

    def loss_terms(self, users, training=False):
        """Summed next item NLL per user for every sequence the objective uses."""
        self._require_bound()
        tables = self.item_tables()
        terms = {}
        for sequence in self.loss_sequences:
            batch = assemble_batch(users, sequence, self.catalog, self.hyper.max_len)
            if batch.positions == 0:
                terms[sequence] = torch.zeros(len(batch), dtype=self.E_id.dtype)
                continue
            probs = self.sequence_distributions(sequence, batch.items, tables, training)
            valid = batch.targets >= 0
            picked = probs.gather(-1, batch.targets.clamp_min(0).unsqueeze(-1)).squeeze(-1)
            nll = torch.where(valid, -torch.log(picked.clamp_min(PROB_FLOOR)), torch.zeros_like(picked))
            terms[sequence] = nll.sum(dim=-1)
            if not torch.isfinite(terms[sequence]).all():
                raise NonFiniteLossError(sequence, "sequence loss is not finite")
        return terms

    def objective(self, users, training=False, reduction=None):
        """
        The training loss of a batch of users. Per user it is `L_X + l1 L_Y + l2 L_XY`
        (only the merged term under shared attention), reduced by mean or sum over users.
        """
        if not users:
            raise ValueError("`objective` needs a non-empty batch of users.")
        reduction = reduction or self.hyper.reduction
        terms = self.loss_terms(users, training)
        if self.hyper.attention == "shared":
            per_user = terms["merged"]
        else:
            per_user = total_loss(terms["X"], terms["Y"], terms["merged"], self.hyper.lambdas)
        return per_user.mean() if reduction == "mean" else per_user.sum()

    def _last(self, histories, sequence, tables):
        batch = assemble_batch(histories, sequence, self.catalog, self.hyper.max_len, teacher_forcing=False)
        if (batch.lengths == 0).any():
            raise ValueError(f"empty stream: a history has no `{sequence}` items")
        probs = self.sequence_distributions(sequence, batch.items, tables, training=False)
        return probs[torch.arange(len(batch)), batch.lengths - 1]

    def inference_scores(self, histories, domain):
        """
        Scores `(users, items of domain)` for the next item of a domain. The domain's own
        fused distribution is added to `l2` times the merged distribution projected onto
        the domain and renormalised. The other domain's distribution has no mass on
        these items and adds nothing.
        """
        self._require_bound()
        if domain not in (0, 1):
            raise ValueError(f"`domain` must be 0 or 1, got {domain}.")
        tables = self.item_tables()
        nx = self.sizes[0]
        merged = self._last(histories, "merged", tables)
        projected = merged[:, :nx] if domain == 0 else merged[:, nx:]
        projected = projected / projected.sum(dim=-1, keepdim=True).clamp_min(PROB_FLOOR)
        if self.hyper.attention == "shared":
            return projected
        own = self._last(histories, SEQUENCES[domain], tables)
        return own + self.hyper.lambdas[1] * projected


def encode_all_streams(model: CrossDomainModel, user, training=False):
    """
    Final position output of every active stream for a single user.

    Arguments:
        model: a bound `CrossDomainModel`
        user: the `UserSequences` to encode
        training: whether dropout is active
    """
    model._require_bound()
    tables = model.item_tables()
    dropout = model.hyper.dropout if training else 0.0
    result = {}
    for stream in model.streams:
        items = torch.as_tensor(_global_indices(user, stream.sequence, model.catalog), dtype=torch.long)
        result[stream] = encode_stream(
            stream, tables[stream.modality][items], model.encoders[stream.key], dropout=dropout, training=training
        )
    return result


def score_inference(model: CrossDomainModel, user, target_domain):
    """
    Ranks every item of the target domain for one user, best first. Equal scores keep
    catalog order.

    Arguments:
        model: a bound `CrossDomainModel`
        user: the `UserSequences` the prediction conditions on
        target_domain: domain index, 0 for X and 1 for Y
    """
    with torch.no_grad():
        scores = model.inference_scores([user], target_domain)[0].cpu().numpy()
    order = np.argsort(-scores, kind="stable")
    items = model.catalog.items(target_domain)
    return [items[i] for i in order]


def save_checkpoint(model: CrossDomainModel, path):
    """
    Writes a canonical JSON header followed by every registered parameter in registry
    order, each as a frozen embedding style tensor block. Vectors are stored as one row.
    """
    registry = model.registry()
    header = {
        "hyper": model.hyper.to_dict(),
        "sizes": list(model.sizes),
        "n_tags": model.n_tags,
        "registry": [[name, list(p.shape)] for name, p in registry.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    code = PARAM_F64 if model.hyper.dtype == "float64" else PARAM_F32
    width = "<f8" if code == PARAM_F64 else "<f4"
    buffer = io.BytesIO()
    buffer.write(struct.pack("<I", len(blob)))
    buffer.write(blob)
    for p in registry.values():
        values = p.detach().cpu().numpy().reshape(-1, p.shape[-1] if p.dim() else 1)
        write_tensor_block(buffer, np.ascontiguousarray(values, dtype=width).tobytes(), code, *values.shape)
    with open(path, "wb") as f:
        f.write(buffer.getvalue())
    logger.info("wrote checkpoint with %d tensors to %s", len(registry), path)


def load_checkpoint(path):
    """Restores an unbound `CrossDomainModel` from `save_checkpoint` output."""
    with open(path, "rb") as f:
        (size,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(size).decode("utf-8"))
        model = CrossDomainModel(Hyperparams.from_dict(header["hyper"]), header["sizes"], header["n_tags"])
        registry = model.registry()
        names = [name for name, _ in header["registry"]]
        if names != list(registry):
            raise ValueError(f"{path}: checkpoint registry does not match the model built from its header.")
        with torch.no_grad():
            for name, shape in header["registry"]:
                _, values = read_tensor_block(f, source=f"{path}:{name}")
                registry[name].copy_(torch.from_numpy(values).reshape(shape))
    return model


def history_sequences(model: CrossDomainModel, domain):
    """The history sequences that scoring an item of `domain` reads."""
    if model.hyper.attention == "shared":
        return ("seq_merged",)
    return ("seq_merged", ("seq_x", "seq_y")[domain])


def can_rank(model: CrossDomainModel, history, domain):
    """Whether `history` has an item in every sequence that scoring `domain` reads."""
    return all(getattr(history, name) for name in history_sequences(model, domain))


@dataclass(frozen=True)
class ScoredTarget:
    """A ranked held-out item with its normalised inference score."""

    result: RankResult
    domain: int
    prob: float


def rank_targets(model: CrossDomainModel, histories, targets, batch_size=256):
    """
    Ranks every target item in the full catalog of its own domain given the matching
    history. Users are processed in sorted order, grouped by target domain.
    Users whose history is empty in a sequence the score reads are skipped.

    Arguments:
        model: a bound `CrossDomainModel`
        histories: dictionary of user to the `UserSequences` to condition on
        targets: dictionary of user to `Target`
        batch_size: users scored per forward pass
    """
    model._require_bound()
    scored, skipped = {}, 0
    with torch.no_grad():
        for domain in (0, 1):
            candidates = [u for u in sorted(targets) if targets[u].domain == domain]
            users = [u for u in candidates if can_rank(model, histories[u], domain)]
            skipped += len(candidates) - len(users)
            for start in range(0, len(users), batch_size):
                chunk = users[start : start + batch_size]
                scores = model.inference_scores([histories[u] for u in chunk], domain).cpu().numpy()
                for user, row in zip(chunk, scores):
                    item = targets[user].item
                    local = model.catalog.local_index(item)
                    prob = float(row[local] / max(row.sum(), PROB_FLOOR))
                    scored[user] = ScoredTarget(RankResult(user, item, rank_of(row, local)), domain, prob)
    if skipped:
        logger.info("skipped %d users with an empty history stream", skipped)
    return [scored[u] for u in sorted(scored)]
