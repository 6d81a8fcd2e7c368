"""
Item level representations: the learnable ID and tag tables, the frozen image and
text vectors, weighted tag pooling and the fusion MLP that turns the four into a
single item embedding.
"""
import hashlib
import logging
import math
import pathlib
import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import Dict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from crossrec.errors import FrozenFormatError
from crossrec.tags import TagScoreVector, unknown_vector

logger = logging.getLogger(__name__)

MAGIC = b"TEMA"
VERSION = 1
MODALITIES = {"image": 0, "text": 1}
# checkpoint blocks share the layout, the modality byte then encodes the dtype
PARAM_F32, PARAM_F64 = 2, 3
_HEADER = struct.Struct("<4sBBII")

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def torch_dtype(name):
    if name not in DTYPES:
        raise ValueError(f"`dtype` must be one of {list(DTYPES)}, got '{name}'.")
    return DTYPES[name]


def uniform_(tensor, generator, dim=None):
    """Fills a tensor with draws from uniform(-1/sqrt(dim), 1/sqrt(dim)), dim defaults to the last axis."""
    bound = 1.0 / math.sqrt(dim or tensor.shape[-1])
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)
    return tensor


def gelu(x):
    """GELU with the tanh approximation 0.5x(1+tanh(sqrt(2/pi)(x+0.044715x^3)))."""
    return F.gelu(x, approximate="tanh")


class FusionMlp(nn.Module):
    """
    Two layer feed forward network with a GELU in between. Weights are stored as
    `input x output` matrices so that `x @ w1 + b1` reads like the math.
    """

    def __init__(self, in_dim, hidden, out_dim, generator=None, dtype=torch.float32):
        super().__init__()
        self.in_dim, self.hidden, self.out_dim = in_dim, hidden, out_dim
        self.w1 = nn.Parameter(uniform_(torch.empty(in_dim, hidden, dtype=dtype), generator, dim=in_dim))
        self.b1 = nn.Parameter(uniform_(torch.empty(hidden, dtype=dtype), generator, dim=in_dim))
        self.w2 = nn.Parameter(uniform_(torch.empty(hidden, out_dim, dtype=dtype), generator, dim=hidden))
        self.b2 = nn.Parameter(uniform_(torch.empty(out_dim, dtype=dtype), generator, dim=hidden))

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(
                f"Fusion MLP expects inputs of dim {self.in_dim}, got {x.shape[-1]}."
            )
        return gelu(x @ self.w1 + self.b1) @ self.w2 + self.b2


def init_tables(seed, n_items, n_tags, d=256, d_t=256, q=256, hidden=256, e=512, dtype=torch.float32):
    """
    Creates the learnable item tables with a seeded generator. Every table is drawn from
    uniform(-1/sqrt(dim), 1/sqrt(dim)), so two calls with the same seed are identical.

    Arguments:
        seed: seed of the generator
        n_items: number of items over both domains
        n_tags: size of the shared tag vocabulary
        d: ID embedding dimension
        d_t: tag embedding dimension
        q: output dimension of the fusion MLP
        hidden: hidden width of the fusion MLP
        e: dimension of the frozen image and text vectors

    Usage:

    ```python
    import torch
    from crossrec.embedding import init_tables

    first = init_tables(seed=1, n_items=5, n_tags=3, d=2, d_t=2, q=2, hidden=2, e=2)
    again = init_tables(seed=1, n_items=5, n_tags=3, d=2, d_t=2, q=2, hidden=2, e=2)
    assert torch.equal(first["E_id"], again["E_id"])
    assert first["E_id"].abs().max() < 0.7072
    ```
    """
    for name, value in dict(d=d, d_t=d_t, q=q, hidden=hidden, e=e, n_items=n_items, n_tags=n_tags).items():
        if value < 1:
            raise ValueError(f"`{name}` must be >= 1, got {value}.")
    generator = torch.Generator().manual_seed(seed)
    E_id = uniform_(torch.empty(n_items, d, dtype=dtype), generator)
    E_tag = uniform_(torch.empty(n_tags, d_t, dtype=dtype), generator)
    mlp = FusionMlp(d + e + e + d_t, hidden, q, generator=generator, dtype=dtype)
    return {"E_id": E_id, "E_tag": E_tag, "fusion": mlp}


def pool_tag_embedding(w, E_tag):
    """
    Weighted pooling over the tag embedding table, `sum_i w_i * E_tag[i]`.

    Arguments:
        w: a `TagScoreVector`, a list of `(index, weight)` pairs or a dense weight vector
        E_tag: tag embedding table of shape `tags x d_t`

    Usage:

    ```python
    import torch
    from crossrec.embedding import pool_tag_embedding

    E = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    pooled = pool_tag_embedding([(0, 0.75), (1, 0.25)], E)
    assert torch.allclose(pooled, torch.tensor([0.75, 0.25]))
    ```
    """
    if isinstance(w, torch.Tensor):
        if w.shape[-1] != E_tag.shape[0]:
            raise ValueError(f"Weight vector has {w.shape[-1]} entries, the table has {E_tag.shape[0]} rows.")
        return w.to(E_tag.dtype) @ E_tag
    entries = w.entries if isinstance(w, TagScoreVector) else w
    out = torch.zeros(E_tag.shape[1], dtype=E_tag.dtype)
    for i, weight in entries:
        if not 0 <= i < E_tag.shape[0]:
            raise IndexError(f"Tag index {i} is outside the tag table with {E_tag.shape[0]} rows.")
        out = out + weight * E_tag[i]
    return out


def fuse_item_embedding(e_id, e_img, e_tex, e_tag, mlp: FusionMlp):
    """
    Concatenates the four modality vectors and passes them through the fusion MLP.
    Works on single vectors as well as on stacks of them.
    """
    parts = [e_id, e_img, e_tex, e_tag]
    width = sum(p.shape[-1] for p in parts)
    if width != mlp.in_dim:
        dims = [p.shape[-1] for p in parts]
        raise ValueError(f"Fusion MLP expects a concatenation of dim {mlp.in_dim}, got {width} from {dims}.")
    return mlp(torch.cat(parts, dim=-1))


def cosine_similarity_scores(h, E):
    """
    Cosine similarity between a query vector and every row of `E`. Rows with zero
    norm score 0.

    Usage:

    ```python
    import torch
    from crossrec.embedding import cosine_similarity_scores

    scores = cosine_similarity_scores(torch.tensor([1.0, 2.0]), torch.tensor([[2.0, 1.0], [1.0, 2.0]]))
    assert torch.allclose(scores, torch.tensor([0.8, 1.0]))
    ```
    """
    if h.shape[-1] != E.shape[-1]:
        raise ValueError(f"Query has dim {h.shape[-1]}, the rows have dim {E.shape[-1]}.")
    norm = torch.linalg.vector_norm(h)
    if norm == 0:
        raise ValueError("Cosine similarity is undefined for a zero-norm query.")
    return cosine_matrix(h.unsqueeze(0), E)[0]


def cosine_matrix(H, E, eps=1e-12):
    """Cosine similarity of every row of `H` (any leading shape) with every row of `E`."""
    h_norm = torch.linalg.vector_norm(H, dim=-1, keepdim=True).clamp_min(eps)
    e_norm = torch.linalg.vector_norm(E, dim=-1, keepdim=True).clamp_min(eps)
    return (H / h_norm) @ (E / e_norm).transpose(-2, -1)


def write_tensor_file(path, values, code):
    """
    Writes a matrix in the frozen embedding layout: magic, version, a code byte,
    count and dim as little endian u32, the row-major values and a CRC32 of those values.
    """
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"Only matrices can be written, got shape {values.shape}.")
    dtype = "<f8" if code == PARAM_F64 else "<f4"
    payload = np.ascontiguousarray(values, dtype=dtype).tobytes()
    with open(path, "wb") as f:
        write_tensor_block(f, payload, code, *values.shape)


def write_tensor_block(f, payload, code, count, dim):
    f.write(_HEADER.pack(MAGIC, VERSION, code, count, dim))
    f.write(payload)
    f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def read_tensor_block(f, source="<stream>"):
    header = f.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise FrozenFormatError(f"{source}: truncated header.")
    magic, version, code, count, dim = _HEADER.unpack(header)
    if magic != MAGIC:
        raise FrozenFormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}.")
    if version != VERSION:
        raise FrozenFormatError(f"{source}: unsupported version {version}.")
    width = 8 if code == PARAM_F64 else 4
    payload = f.read(count * dim * width)
    crc = f.read(4)
    if len(payload) != count * dim * width or len(crc) != 4:
        raise FrozenFormatError(f"{source}: truncated payload.")
    if struct.unpack("<I", crc)[0] != zlib.crc32(payload) & 0xFFFFFFFF:
        raise FrozenFormatError(f"{source}: CRC32 mismatch.")
    values = np.frombuffer(payload, dtype="<f8" if code == PARAM_F64 else "<f4").reshape(count, dim)
    return code, values.copy()


def read_tensor_file(path):
    with open(path, "rb") as f:
        return read_tensor_block(f, source=str(path))


@dataclass
class FrozenEmbeddingStore:
    """
    Precomputed image or text vectors aligned to the global catalog order. Never
    trained; `missing` counts the catalog items that got a zero vector.
    """

    modality: str
    vectors: np.ndarray
    missing: int = 0

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"`modality` must be one of {list(MODALITIES)}, got '{self.modality}'.")
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self.vectors.setflags(write=False)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]

    def checksum(self):
        return hashlib.sha256(self.vectors.tobytes()).hexdigest()

    def tensor(self, dtype=torch.float32):
        return torch.tensor(self.vectors, dtype=dtype)

    def write(self, path):
        write_tensor_file(path, self.vectors, MODALITIES[self.modality])


def write_frozen_embeddings(path, modality, vectors, item_ids=None):
    """
    Writes a frozen embedding file. When `item_ids` are given they go to a sidecar
    `<path>.ids` file with one id per row, which lets `load_frozen_embeddings` align
    the rows to any catalog.
    """
    if modality not in MODALITIES:
        raise ValueError(f"`modality` must be one of {list(MODALITIES)}, got '{modality}'.")
    write_tensor_file(path, vectors, MODALITIES[modality])
    if item_ids is not None:
        if len(item_ids) != len(vectors):
            raise ValueError(f"Got {len(item_ids)} item ids for {len(vectors)} rows.")
        pathlib.Path(f"{path}.ids").write_text("".join(f"{i}\n" for i in item_ids))


def load_frozen_embeddings(path, catalog, modality=None, dim=None):
    """
    Reads a frozen embedding file and aligns it to the global catalog order. With a
    `<path>.ids` sidecar rows are matched by item id, without it row `r` belongs to
    global index `r`. Catalog items without a row get a zero vector and a warning.

    Arguments:
        path: the binary file
        catalog: an `ItemCatalog`
        modality: expected modality, checked against the file when given
        dim: expected dimension, checked against the file when given
    """
    code, values = read_tensor_file(path)
    names = {v: k for k, v in MODALITIES.items()}
    if code not in names:
        raise FrozenFormatError(f"{path}: code {code} is not an image or text modality.")
    if modality is not None and names[code] != modality:
        raise FrozenFormatError(f"{path}: holds {names[code]} vectors, expected {modality}.")
    if dim is not None and values.shape[1] != dim:
        raise FrozenFormatError(f"{path}: dim {values.shape[1]} does not match expected dim {dim}.")
    ids_path = pathlib.Path(f"{path}.ids")
    if ids_path.exists():
        ids = ids_path.read_text().split("\n")[: values.shape[0]]
        rows = {item: r for r, item in enumerate(ids)}
    else:
        rows = {item: r for r, item in enumerate(catalog.all_items()) if r < values.shape[0]}
    aligned = np.zeros((len(catalog), values.shape[1]), dtype=np.float32)
    missing = 0
    for g, item in enumerate(catalog.all_items()):
        if item in rows:
            aligned[g] = values[rows[item]]
        else:
            missing += 1
    if missing:
        logger.warning("%d catalog items have no %s vector in %s, using zeros", missing, names[code], path)
    return FrozenEmbeddingStore(names[code], aligned, missing=missing)


def synthetic_vectors(n, dim, seed):
    """Seeded pseudo-random unit vectors, a stand-in for encoder outputs."""
    values = np.random.default_rng(seed).standard_normal((n, dim))
    values /= np.linalg.norm(values, axis=1, keepdims=True)
    return values.astype(np.float32)


@dataclass
class FeatureSet:
    """
    Everything the model needs to know about items besides the learnable tables: the
    catalog, the frozen stores, the shared tag vocabulary and the soft tag vectors.
    """

    catalog: object
    image: FrozenEmbeddingStore
    text: FrozenEmbeddingStore
    vocabulary: object
    tag_vectors: Dict[str, TagScoreVector] = field(default_factory=dict)

    def __post_init__(self):
        for store in (self.image, self.text):
            if len(store) != len(self.catalog):
                raise ValueError(
                    f"The {store.modality} store has {len(store)} rows, the catalog {len(self.catalog)} items."
                )

    @property
    def e(self):
        if self.image.dim != self.text.dim:
            raise ValueError(f"Image dim {self.image.dim} and text dim {self.text.dim} differ.")
        return self.image.dim

    def with_tag_vectors(self, tag_vectors):
        return replace(self, tag_vectors=dict(tag_vectors))

    def tag_weights(self, dtype=torch.float32):
        """Dense `items x tags` weight matrix in global catalog order."""
        size = len(self.vocabulary)
        rows = []
        for item in self.catalog.all_items():
            vector = self.tag_vectors.get(item) or unknown_vector(item, self.vocabulary)
            rows.append(vector.dense(size))
        return torch.tensor(rows, dtype=dtype).reshape(len(self.catalog), size)

    def frozen(self, dtype=torch.float32) -> Dict[str, torch.Tensor]:
        return {"img": self.image.tensor(dtype), "tex": self.text.tensor(dtype)}


def synthetic_features(catalog, vocabulary, tag_vectors=None, e=8, seed=0) -> FeatureSet:
    """Feature set with seeded unit vectors for both frozen modalities, handy in tests."""
    n = len(catalog)
    return FeatureSet(
        catalog=catalog,
        image=FrozenEmbeddingStore("image", synthetic_vectors(n, e, seed)),
        text=FrozenEmbeddingStore("text", synthetic_vectors(n, e, seed + 1)),
        vocabulary=vocabulary,
        tag_vectors=dict(tag_vectors or {}),
    )


def fallback_missing(tag_vectors: Dict[str, TagScoreVector], catalog, vocabulary) -> Dict[str, TagScoreVector]:
    """Gives every catalog item without a tag vector the `<unknown>` tag."""
    out = dict(tag_vectors)
    for item in catalog.all_items():
        if item not in out or not out[item].entries:
            out[item] = unknown_vector(item, vocabulary)
    return out
