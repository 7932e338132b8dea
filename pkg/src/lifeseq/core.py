"""Domain types, embedding tables, seeded RNG and small vector helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CATEGORICAL = "categorical"
NUMERICAL = "numerical"
CROSS = "cross"
FIELD_KINDS = (CATEGORICAL, NUMERICAL, CROSS)

DEGENERATE_NORM = 1e-12


class SchemaError(ValueError):
    """Raised when features do not conform to the catalog schema."""


class DataError(ValueError):
    """Raised for unresolvable ids or malformed behavior data."""


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str
    vocab_size: int = 0
    dim: int = 0

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise SchemaError(f"field {self.name!r}: unknown kind {self.kind!r}")
        if self.kind != NUMERICAL and (self.vocab_size < 1 or self.dim < 1):
            raise SchemaError(f"field {self.name!r}: vocab_size and dim must be >= 1")


@dataclass(frozen=True)
class Schema:
    """Ordered field declarations.

    Categorical fields are the item's inherent id-like fields, cross fields are
    user-item interaction fields (embedded with small dims) and numerical
    fields are passed through as one scalar each.
    """

    fields: tuple[FieldSpec, ...]

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate field names in schema")

    def of_kind(self, kind: str) -> tuple[FieldSpec, ...]:
        return tuple(f for f in self.fields if f.kind == kind)

    @property
    def categorical(self) -> tuple[FieldSpec, ...]:
        return self.of_kind(CATEGORICAL)

    @property
    def numerical(self) -> tuple[FieldSpec, ...]:
        return self.of_kind(NUMERICAL)

    @property
    def cross(self) -> tuple[FieldSpec, ...]:
        return self.of_kind(CROSS)

    @property
    def inherent_dim(self) -> int:
        """Width H of an item's inherent vector (categorical embeddings + numericals)."""
        return sum(f.dim for f in self.categorical) + len(self.numerical)

    @property
    def cross_dim(self) -> int:
        return sum(f.dim for f in self.cross)

    def field(self, name: str) -> FieldSpec:
        for f in self.fields:
            if f.name == name:
                return f
        raise SchemaError(f"no field named {name!r}")

    def field_index(self, name: str) -> int:
        for i, f in enumerate(self.fields):
            if f.name == name:
                return i
        raise SchemaError(f"no field named {name!r}")


@dataclass(frozen=True)
class ItemFeatures:
    """Per-item features: ``(field_id, category_index)`` pairs plus numerical scalars.

    ``field_id`` indexes ``Schema.fields``; cross fields may appear here when an
    item vector is built for a behavior that carries interaction features.
    """

    categorical: tuple[tuple[int, int], ...]
    numerical: tuple[float, ...]

    def validate(self, schema: Schema) -> None:
        n_num = len(schema.numerical)
        if len(self.numerical) != n_num:
            raise SchemaError(f"expected {n_num} numerical values, got {len(self.numerical)}")
        if not all(math.isfinite(x) for x in self.numerical):
            raise SchemaError("numerical features must be finite")
        for field_id, index in self.categorical:
            if not 0 <= field_id < len(schema.fields):
                raise SchemaError(f"unknown field id {field_id}")
            spec = schema.fields[field_id]
            if spec.kind == NUMERICAL:
                raise SchemaError(f"field {spec.name!r} is numerical, not categorical")
            if not 0 <= index < spec.vocab_size:
                raise SchemaError(
                    f"index {index} out of vocabulary for field {spec.name!r} (size {spec.vocab_size})"
                )
        declared = {schema.field_index(f.name) for f in schema.categorical}
        present = {fid for fid, _ in self.categorical}
        if not declared <= present:
            missing = [schema.fields[i].name for i in sorted(declared - present)]
            raise SchemaError(f"missing categorical fields: {missing}")


@dataclass(frozen=True)
class BehaviorRecord:
    item_id: int
    completion_ratio: float
    timestamp: int

    def __post_init__(self):
        p = float(self.completion_ratio)
        if not math.isfinite(p):
            raise DataError(f"non-finite completion ratio for item {self.item_id}")
        # bad logs are clamped, not rejected
        object.__setattr__(self, "completion_ratio", min(max(p, 0.0), 1.0))


DEFAULT_T_MAX = 100_000


class BehaviorSequence:
    """A user's life-cycle behaviors, stored column-wise and sorted by timestamp."""

    def __init__(self, user_id: int, item_ids=(), completion_ratios=(), timestamps=()):
        self.user_id = int(user_id)
        self.item_ids = np.array(item_ids, dtype=np.int64).reshape(-1)
        p = np.asarray(completion_ratios, dtype=np.float64).reshape(-1)
        self.timestamps = np.array(timestamps, dtype=np.int64).reshape(-1)
        if not (self.item_ids.shape == p.shape == self.timestamps.shape):
            raise DataError(f"user {self.user_id}: column lengths differ")
        if not np.all(np.isfinite(p)):
            raise DataError(f"user {self.user_id}: non-finite completion ratio")
        if np.any(np.diff(self.timestamps) < 0):
            raise DataError(f"user {self.user_id}: records not sorted by timestamp")
        # bad logs are clamped, not rejected
        self.completion_ratios = np.clip(p, 0.0, 1.0)
        for a in (self.item_ids, self.completion_ratios, self.timestamps):
            a.setflags(write=False)

    @classmethod
    def from_records(
        cls, user_id: int, records: Iterable[BehaviorRecord], t_max: int = DEFAULT_T_MAX
    ) -> "BehaviorSequence":
        """Sort records by timestamp (stable) and keep the most recent ``t_max``."""
        rs = sorted(records, key=lambda r: r.timestamp)[-t_max:] if t_max else []
        return cls(
            user_id,
            [r.item_id for r in rs],
            [r.completion_ratio for r in rs],
            [r.timestamp for r in rs],
        )

    @property
    def records(self) -> list[BehaviorRecord]:
        return [
            BehaviorRecord(int(i), float(p), int(t))
            for i, p, t in zip(self.item_ids, self.completion_ratios, self.timestamps)
        ]

    def __len__(self) -> int:
        return int(self.item_ids.shape[0])

    def __eq__(self, other):
        return (
            isinstance(other, BehaviorSequence)
            and self.user_id == other.user_id
            and np.array_equal(self.item_ids, other.item_ids)
            and np.array_equal(self.completion_ratios, other.completion_ratios)
            and np.array_equal(self.timestamps, other.timestamps)
        )

    def __repr__(self):
        return f"BehaviorSequence(user_id={self.user_id}, T={len(self)})"


class Catalog:
    """Item features stored column-wise: one int column per categorical field,
    one float column per numerical field. Item ids are row indices."""

    def __init__(self, schema: Schema, categorical: np.ndarray, numerical: np.ndarray):
        categorical = np.asarray(categorical, dtype=np.int64)
        numerical = np.asarray(numerical, dtype=np.float64)
        n1, n2 = len(schema.categorical), len(schema.numerical)
        if categorical.ndim != 2 or categorical.shape[1] != n1:
            raise SchemaError(f"categorical block must be (n_items, {n1})")
        if numerical.ndim != 2 or numerical.shape != (categorical.shape[0], n2):
            raise SchemaError(f"numerical block must be (n_items, {n2})")
        for j, spec in enumerate(schema.categorical):
            col = categorical[:, j]
            if col.size and (col.min() < 0 or col.max() >= spec.vocab_size):
                raise SchemaError(f"field {spec.name!r}: index out of vocabulary")
        if not np.all(np.isfinite(numerical)):
            raise SchemaError("numerical features must be finite")
        self.schema = schema
        self.categorical = categorical
        self.numerical = numerical
        self.categorical.setflags(write=False)
        self.numerical.setflags(write=False)

    def __len__(self) -> int:
        return self.categorical.shape[0]

    def check_ids(self, ids: np.ndarray) -> None:
        ids = np.asarray(ids)
        if ids.size == 0:
            return
        bad = ids[(ids < 0) | (ids >= len(self))]
        if bad.size:
            raise DataError(f"item id {int(bad[0])} not in catalog")

    def features(self, item_id: int) -> ItemFeatures:
        self.check_ids(np.array([item_id]))
        cat_fields = [self.schema.field_index(f.name) for f in self.schema.categorical]
        return ItemFeatures(
            tuple((fid, int(v)) for fid, v in zip(cat_fields, self.categorical[item_id])),
            tuple(float(x) for x in self.numerical[item_id]),
        )

    def normalized(self) -> "Catalog":
        """Min-max normalize every numerical column to [0, 1]; constant columns map to 0."""
        num = self.numerical
        if num.size == 0:
            return self
        lo, hi = num.min(axis=0), num.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        return Catalog(self.schema, self.categorical, (num - lo) / span)

    def __eq__(self, other):
        return (
            isinstance(other, Catalog)
            and self.schema == other.schema
            and np.array_equal(self.categorical, other.categorical)
            and np.array_equal(self.numerical, other.numerical)
        )


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator; extra ints select an independent sub-stream
    (e.g. ``make_rng(seed, user_id)``), so results never depend on worker order."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


class EmbeddingTables:
    """One matrix per categorical or cross field, keyed by field name."""

    def __init__(self, tables: dict[str, np.ndarray]):
        self.tables = {k: np.asarray(v, dtype=np.float64) for k, v in tables.items()}

    @classmethod
    def init(cls, schema: Schema, rng: np.random.Generator, extra: Sequence[FieldSpec] = ()):
        """Uniform in [-1/sqrt(dim), 1/sqrt(dim)] per field."""
        out = {}
        for spec in (*schema.fields, *extra):
            if spec.kind == NUMERICAL:
                continue
            bound = 1.0 / math.sqrt(spec.dim)
            out[spec.name] = rng.uniform(-bound, bound, size=(spec.vocab_size, spec.dim))
        return cls(out)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tables[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tables[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self.tables

    def copy(self) -> "EmbeddingTables":
        return EmbeddingTables({k: v.copy() for k, v in self.tables.items()})

    def lookup(self, name: str, index) -> np.ndarray:
        table = self.tables[name]
        idx = np.asarray(index)
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
            raise SchemaError(f"index out of vocabulary for field {name!r}")
        return table[idx]


def embed_item(features: ItemFeatures, tables: EmbeddingTables, schema: Schema) -> np.ndarray:
    """Concatenate per-field embeddings (in the order given) and append numericals."""
    features.validate(schema)
    parts = [tables.lookup(schema.fields[fid].name, idx) for fid, idx in features.categorical]
    parts.append(np.asarray(features.numerical, dtype=np.float64))
    return np.concatenate(parts) if parts else np.zeros(0)


def inherent_matrix(
    categorical: np.ndarray, numerical: np.ndarray, tables: EmbeddingTables, schema: Schema
) -> np.ndarray:
    """Vectorized :func:`embed_item` over rows of inherent categorical indices and numericals."""
    categorical = np.asarray(categorical, dtype=np.int64)
    numerical = np.asarray(numerical, dtype=np.float64)
    parts = [tables[f.name][categorical[..., j]] for j, f in enumerate(schema.categorical)]
    parts.append(numerical)
    return np.concatenate(parts, axis=-1)


def item_embeddings(catalog: Catalog, tables: EmbeddingTables) -> np.ndarray:
    """Inherent vector of every catalog item, row = item id."""
    return inherent_matrix(catalog.categorical, catalog.numerical, tables, catalog.schema)


def cosine(a, b) -> tuple[float, bool]:
    """Cosine similarity and a degenerate flag (either norm below 1e-12 gives ``(0.0, True)``)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        return 0.0, True
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c)), False


@dataclass
class Flags:
    """Counters for non-fatal conditions (degenerate vectors, clamps, cap hits)."""

    counts: dict[str, int] = field(default_factory=dict)

    def add(self, name: str, n: int = 1) -> None:
        if n:
            self.counts[name] = self.counts.get(name, 0) + n

    def __getitem__(self, name: str) -> int:
        return self.counts.get(name, 0)
