"""Record encoding: hashed-token text embeddings + structured-code features.

Titles and category names are embedded by hashing whitespace tokens into a
shared bucket table (FNV-1a 64-bit, fixed constants) and averaging the rows.
Structured codes contribute learned embeddings to the dense block and one-hot
blocks to a separate routing vector; the routing vector is what the MoE gates
read, so gate decisions depend only on structured metadata.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import ProductRecord, normalize_title
from .util import fnv1a_64

UNK = "<unk>"

DEFAULT_FIELDS = ("bu_code", "ou_code", "system_code")


@dataclass(frozen=True)
class EncoderConfig:
    hash_buckets: int = 2048
    text_dim: int = 32
    cat_dim: int = 4
    fields: tuple[str, ...] = DEFAULT_FIELDS
    field_vocabs: dict[str, tuple[str, ...]] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.hash_buckets < 1:
            raise ValueError(f"hash_buckets must be >= 1: {self.hash_buckets}")
        if self.text_dim < 1 or self.cat_dim < 1:
            raise ValueError("embedding dims must be >= 1")

    def vocab(self, name: str) -> tuple[str, ...]:
        return self.field_vocabs.get(name, ())

    @property
    def dense_dim(self) -> int:
        return 2 * self.text_dim + len(self.fields) * self.cat_dim

    @property
    def routing_dim(self) -> int:
        return sum(len(self.vocab(f)) + 1 for f in self.fields)

    def to_dict(self) -> dict:
        return {
            "hash_buckets": self.hash_buckets,
            "text_dim": self.text_dim,
            "cat_dim": self.cat_dim,
            "fields": list(self.fields),
            "field_vocabs": {k: list(v) for k, v in self.field_vocabs.items()},
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(doc: dict) -> "EncoderConfig":
        return EncoderConfig(
            hash_buckets=doc["hash_buckets"],
            text_dim=doc["text_dim"],
            cat_dim=doc["cat_dim"],
            fields=tuple(doc["fields"]),
            field_vocabs={k: tuple(v) for k, v in doc["field_vocabs"].items()},
            seed=doc["seed"],
        )


@dataclass(frozen=True)
class FeatureVector:
    dense: np.ndarray
    routing: np.ndarray


def build_field_vocabs(records: list[ProductRecord], fields: tuple[str, ...]) -> dict:
    """Sorted distinct values per structured field, for one-hot layouts."""
    return {f: tuple(sorted({getattr(r, f) for r in records})) for f in fields}


def token_buckets(text: str, hash_buckets: int) -> np.ndarray:
    tokens = normalize_title(text).split()
    return np.array([fnv1a_64(tok) % hash_buckets for tok in tokens], dtype=np.int64)


def title_buckets(record: ProductRecord, hash_buckets: int) -> np.ndarray:
    """Title token buckets, with CPV pairs folded in as key=value tokens."""
    buckets = list(token_buckets(record.title, hash_buckets))
    for key, value in record.cpvs or ():
        token = f"{normalize_title(key)}={normalize_title(value)}".replace(" ", "_")
        buckets.append(fnv1a_64(token) % hash_buckets)
    return np.array(buckets, dtype=np.int64)


def encode_text(text: str, embedding_table: np.ndarray, config: EncoderConfig) -> np.ndarray:
    """Mean of the hashed tokens' embedding rows; zeros for empty text."""
    buckets = token_buckets(text, config.hash_buckets)
    if buckets.size == 0:
        return np.zeros(embedding_table.shape[1])
    return embedding_table[buckets].mean(axis=0)


def field_index(config: EncoderConfig, name: str, value: str) -> int:
    """Index of `value` in the field's one-hot block; unseen values map to UNK."""
    vocab = config.vocab(name)
    try:
        return vocab.index(value)
    except ValueError:
        return len(vocab)  # UNK slot


@dataclass(frozen=True)
class PreparedRecord:
    """Parameter-independent encoding state for one record."""

    title_tok: np.ndarray
    cat_tok: np.ndarray
    field_idx: np.ndarray  # (n_fields,)


@dataclass
class EncodedBatch:
    """Dense + routing features for a batch, with the index bookkeeping the
    backward pass needs to scatter gradients into the embedding tables."""

    dense: np.ndarray  # (B, dense_dim)
    routing: np.ndarray  # (B, routing_dim)
    title_tok: np.ndarray  # flat bucket ids over the whole batch
    title_sample: np.ndarray  # sample index per title token
    title_weight: np.ndarray  # 1/token-count of the owning sample
    cat_tok: np.ndarray
    cat_sample: np.ndarray
    cat_weight: np.ndarray
    field_idx: np.ndarray  # (B, n_fields) embedding-row per structured field


def prepare_records(records: list[ProductRecord], config: EncoderConfig) -> list[PreparedRecord]:
    """Hash tokens and resolve vocab indices once; reused across training steps."""
    prepared = []
    for rec in records:
        prepared.append(
            PreparedRecord(
                title_tok=title_buckets(rec, config.hash_buckets),
                cat_tok=token_buckets(rec.category_name, config.hash_buckets),
                field_idx=np.array(
                    [field_index(config, name, getattr(rec, name)) for name in config.fields],
                    dtype=np.int64,
                ),
            )
        )
    return prepared


def assemble_batch(prepared: list[PreparedRecord], tables: dict, config: EncoderConfig) -> EncodedBatch:
    n = len(prepared)
    text_table = tables["text_table"]
    dense = np.zeros((n, config.dense_dim))
    routing = np.zeros((n, config.routing_dim))

    title_tok, title_sample, title_weight = [], [], []
    cat_tok, cat_sample, cat_weight = [], [], []
    field_idx = np.zeros((n, len(config.fields)), dtype=np.int64)

    block_offsets = []
    off = 0
    for name in config.fields:
        block_offsets.append(off)
        off += len(config.vocab(name)) + 1

    for i, prep in enumerate(prepared):
        if prep.title_tok.size:
            dense[i, : config.text_dim] = text_table[prep.title_tok].mean(axis=0)
            title_tok.extend(prep.title_tok.tolist())
            title_sample.extend([i] * prep.title_tok.size)
            title_weight.extend([1.0 / prep.title_tok.size] * prep.title_tok.size)
        if prep.cat_tok.size:
            dense[i, config.text_dim : 2 * config.text_dim] = text_table[prep.cat_tok].mean(axis=0)
            cat_tok.extend(prep.cat_tok.tolist())
            cat_sample.extend([i] * prep.cat_tok.size)
            cat_weight.extend([1.0 / prep.cat_tok.size] * prep.cat_tok.size)

        dense_off = 2 * config.text_dim
        for f_pos, name in enumerate(config.fields):
            idx = int(prep.field_idx[f_pos])
            field_idx[i, f_pos] = idx
            dense[i, dense_off : dense_off + config.cat_dim] = tables[f"field/{name}/table"][idx]
            routing[i, block_offsets[f_pos] + idx] = 1.0
            dense_off += config.cat_dim

    return EncodedBatch(
        dense=dense,
        routing=routing,
        title_tok=np.array(title_tok, dtype=np.int64),
        title_sample=np.array(title_sample, dtype=np.int64),
        title_weight=np.array(title_weight),
        cat_tok=np.array(cat_tok, dtype=np.int64),
        cat_sample=np.array(cat_sample, dtype=np.int64),
        cat_weight=np.array(cat_weight),
        field_idx=field_idx,
    )


def encode_batch(records: list[ProductRecord], tables: dict, config: EncoderConfig) -> EncodedBatch:
    return assemble_batch(prepare_records(records, config), tables, config)


def encode(record: ProductRecord, tables: dict, config: EncoderConfig) -> FeatureVector:
    """Encode one record into its dense + routing feature vector."""
    batch = encode_batch([record], tables, config)
    return FeatureVector(dense=batch.dense[0], routing=batch.routing[0])
