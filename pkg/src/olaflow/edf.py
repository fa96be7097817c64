"""Evolving data frame primitives.

An evolving data frame (EDF) is a stream of states of a table whose schema
never changes.  Rows are stored column-wise in :class:`RowBatch` objects;
incrementally maintained state is organized as a latest :class:`Version`
made of key-disjoint :class:`Partial` objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

VALUE_KINDS = ("int64", "float64", "utf8")
MUTABILITY = ("constant", "mutable")

_DTYPES = {"int64": np.int64, "float64": np.float64, "utf8": object}


class SchemaError(ValueError):
    pass


class EmptyStateError(LookupError):
    pass


class KeyOverlapError(ValueError):
    """A partial repeats primary keys already present in the latest version."""


@dataclass(frozen=True)
class AttributeDef:
    name: str
    kind: str
    mutability: str = "constant"

    def __post_init__(self):
        if not self.name or not self.name.replace("_", "a").isalnum():
            raise SchemaError(f"invalid attribute name {self.name!r}")
        if self.kind not in VALUE_KINDS:
            raise SchemaError(f"{self.name}: unknown value kind {self.kind!r}")
        if self.mutability not in MUTABILITY:
            raise SchemaError(f"{self.name}: unknown mutability {self.mutability!r}")

    @property
    def mutable(self) -> bool:
        return self.mutability == "mutable"

    def __str__(self):
        return f"{self.name}:{self.kind}:{self.mutability}"

    @classmethod
    def parse(cls, text: str) -> "AttributeDef":
        """Parse ``name:kind[:mutability]``."""
        parts = [p.strip() for p in text.split(":")]
        if len(parts) not in (2, 3):
            raise SchemaError(f"bad attribute spec {text!r}")
        return cls(*parts)


@dataclass(frozen=True)
class EdfSchema:
    """Ordered attributes plus primary and clustering keys.

    An empty primary key is allowed only for single-row frames (scalar
    aggregates).
    """

    attributes: tuple[AttributeDef, ...]
    primary_key: tuple[str, ...]
    clustering_key: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "primary_key", tuple(self.primary_key))
        if self.clustering_key is not None:
            object.__setattr__(self, "clustering_key", tuple(self.clustering_key))
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate attribute names in {names}")
        by_name = dict(zip(names, self.attributes))
        for key in self.primary_key:
            if key not in by_name:
                raise SchemaError(f"primary key {key!r} is not an attribute")
            if by_name[key].mutable:
                raise SchemaError(f"primary key {key!r} must be constant")
        for key in self.clustering_key or ():
            if key not in by_name:
                raise SchemaError(f"clustering key {key!r} is not an attribute")

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def __contains__(self, name: str) -> bool:
        return any(a.name == name for a in self.attributes)

    def attr(self, name: str) -> AttributeDef:
        for a in self.attributes:
            if a.name == name:
                return a
        raise SchemaError(f"unknown attribute {name!r}")

    def mutable_names(self) -> list[str]:
        return [a.name for a in self.attributes if a.mutable]

    def with_keys(self, primary_key, clustering_key=None) -> "EdfSchema":
        return EdfSchema(self.attributes, tuple(primary_key), clustering_key)

    def __str__(self):
        attrs = ", ".join(str(a) for a in self.attributes)
        return f"[{attrs}] pk={list(self.primary_key)} ck={self.clustering_key}"


def _as_column(attr: AttributeDef, values) -> np.ndarray:
    if attr.kind == "utf8":
        arr = np.empty(len(values), dtype=object)
        arr[:] = list(values)
        for v in arr:
            if not isinstance(v, str):
                raise SchemaError(f"{attr.name}: expected utf8 value, got {v!r}")
    else:
        arr = np.asarray(values)
        if attr.kind == "int64" and arr.size and arr.dtype.kind not in "iub":
            raise SchemaError(f"{attr.name}: expected int64 values, got {arr.dtype}")
        if attr.kind == "float64" and arr.size and arr.dtype.kind not in "iubf":
            raise SchemaError(f"{attr.name}: expected float64 values, got {arr.dtype}")
        arr = np.array(arr, dtype=_DTYPES[attr.kind]).reshape(-1)
    arr.flags.writeable = False
    return arr


def _frozen_view(arr: np.ndarray) -> np.ndarray:
    if arr.flags.writeable:
        arr = arr.view()
        arr.flags.writeable = False
    return arr


def _frozen(arr, dtype=None) -> np.ndarray:
    out = np.array(arr, dtype=dtype)
    out.flags.writeable = False
    return out


class RowBatch:
    """Immutable columnar batch of rows.

    Besides the attribute columns a batch may carry, per mutable column,
    a ``variance`` array, an ``unstable`` flag array (uncertainty could not be
    propagated) and a ``valid`` array (False marks an absent left-join value).
    """

    __slots__ = ("schema", "columns", "variance", "unstable", "valid")

    def __init__(
        self,
        schema: EdfSchema,
        columns: Mapping[str, Sequence],
        variance: Mapping[str, Sequence] | None = None,
        unstable: Mapping[str, Sequence] | None = None,
        valid: Mapping[str, Sequence] | None = None,
    ):
        missing = set(schema.names) - set(columns)
        extra = set(columns) - set(schema.names)
        if missing or extra:
            raise SchemaError(f"columns do not match schema: missing={missing} extra={extra}")
        cols = {a.name: _as_column(a, columns[a.name]) for a in schema.attributes}
        lengths = {len(c) for c in cols.values()}
        if len(lengths) > 1:
            raise SchemaError(f"ragged columns: lengths {sorted(lengths)}")
        self.schema = schema
        self.columns = cols
        n = lengths.pop() if lengths else 0
        self.variance = self._side(variance, np.float64, n)
        self.unstable = self._side(unstable, bool, n)
        self.valid = self._side(valid, bool, n)

    @classmethod
    def _trusted(cls, schema, columns, variance=None, unstable=None, valid=None) -> "RowBatch":
        """Build from arrays that already conform to ``schema`` (no value checks)."""
        self = object.__new__(cls)
        self.schema = schema
        self.columns = {n: _frozen_view(columns[n]) for n in schema.names}
        self.variance = {k: _frozen_view(v) for k, v in (variance or {}).items()}
        self.unstable = {k: _frozen_view(v) for k, v in (unstable or {}).items()}
        self.valid = {k: _frozen_view(v) for k, v in (valid or {}).items()}
        return self

    def _side(self, side, dtype, n):
        out = {}
        for name, values in (side or {}).items():
            if name not in self.columns:
                raise SchemaError(f"side data for unknown column {name!r}")
            arr = _frozen(values, dtype).reshape(-1)
            if len(arr) != n:
                raise SchemaError(f"side data for {name!r} has length {len(arr)} != {n}")
            out[name] = arr
        return out

    @property
    def row_count(self) -> int:
        if not self.columns:
            return 0
        return len(next(iter(self.columns.values())))

    def __len__(self):
        return self.row_count

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def __repr__(self):
        return f"RowBatch({self.row_count} rows, {self.schema.names})"

    @classmethod
    def empty(cls, schema: EdfSchema) -> "RowBatch":
        return cls(schema, {a.name: [] for a in schema.attributes})

    @classmethod
    def from_rows(cls, schema: EdfSchema, rows: Iterable[Sequence]) -> "RowBatch":
        rows = list(rows)
        cols = {a.name: [r[i] for r in rows] for i, a in enumerate(schema.attributes)}
        return cls(schema, cols)

    def to_rows(self) -> list[tuple]:
        lists = [self.columns[n].tolist() for n in self.schema.names]
        return list(zip(*lists)) if lists else []

    def key_tuples(self, names: Sequence[str] | None = None) -> list[tuple]:
        names = self.schema.primary_key if names is None else names
        if not names:
            return [()] * self.row_count
        return list(zip(*(self.columns[n].tolist() for n in names)))

    def _derive(self, fn, schema=None) -> "RowBatch":
        return RowBatch._trusted(
            schema or self.schema,
            {k: fn(v) for k, v in self.columns.items()},
            {k: fn(v) for k, v in self.variance.items()},
            {k: fn(v) for k, v in self.unstable.items()},
            {k: fn(v) for k, v in self.valid.items()},
        )

    def take(self, indices) -> "RowBatch":
        idx = np.asarray(indices, dtype=np.int64)
        return self._derive(lambda a: a[idx])

    def mask(self, keep) -> "RowBatch":
        keep = np.asarray(keep, dtype=bool)
        return self._derive(lambda a: a[keep])

    def with_schema(self, schema: EdfSchema) -> "RowBatch":
        return self._derive(lambda a: a, schema)

    @staticmethod
    def concat(batches: Sequence["RowBatch"], schema: EdfSchema | None = None) -> "RowBatch":
        if not batches:
            if schema is None:
                raise ValueError("concat of no batches needs a schema")
            return RowBatch.empty(schema)
        schema = schema or batches[0].schema
        if len(batches) == 1:
            return batches[0]
        cols = {n: np.concatenate([b.columns[n] for b in batches]) for n in schema.names}

        def side(attr, fill):
            names = set().union(*(getattr(b, attr).keys() for b in batches))
            return {
                n: np.concatenate(
                    [getattr(b, attr).get(n, np.full(b.row_count, fill)) for b in batches]
                )
                for n in names
            }

        return RowBatch._trusted(
            schema, cols, side("variance", 0.0), side("unstable", False), side("valid", True)
        )

    def equals(self, other: "RowBatch") -> bool:
        if self.schema != other.schema or self.row_count != other.row_count:
            return False
        for name in self.schema.names:
            a, b = self.columns[name], other.columns[name]
            if a.dtype.kind == "f":
                if not np.array_equal(a, b, equal_nan=True):
                    return False
            elif not np.array_equal(a, b):
                return False
        return True

    def sorted_by_key(self) -> "RowBatch":
        """Rows reordered by primary key (then all columns) for comparisons."""
        names = list(self.schema.primary_key) or self.schema.names
        if self.row_count < 2:
            return self
        order = sorted(range(self.row_count), key=lambda i: tuple(self.columns[n][i] for n in names))
        return self.take(order)


@dataclass(frozen=True)
class Partial:
    rows: RowBatch
    key_set: frozenset = field(default=None)

    def __post_init__(self):
        if self.key_set is None:
            keys = self.rows.key_tuples()
            if self.rows.schema.primary_key and len(set(keys)) != len(keys):
                raise KeyOverlapError("duplicate primary keys inside one partial")
            object.__setattr__(self, "key_set", frozenset(keys))


@dataclass(frozen=True)
class Version:
    partials: tuple[Partial, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "partials", tuple(self.partials))
        seen: set = set()
        for p in self.partials:
            if p.rows.schema.primary_key and not seen.isdisjoint(p.key_set):
                raise KeyOverlapError("partials of a version must be key-disjoint")
            seen |= p.key_set

    @classmethod
    def of(cls, *batches: RowBatch) -> "Version":
        return cls(tuple(Partial(b) for b in batches))


class IntrinsicState:
    """Versions of key-disjoint partials.

    Only the latest version is retained, together with a counter of how many
    versions have been pushed.  ``check_keys=False`` skips key bookkeeping for
    streams whose producer already guarantees disjointness.
    """

    def __init__(self, schema: EdfSchema | None = None, check_keys: bool = True):
        self.schema = schema
        self.check_keys = check_keys
        self.version_count = 0
        self._partials: list[Partial] = []
        self._keys: set = set()
        self._cache: RowBatch | None = None

    @property
    def latest(self) -> Version:
        if self.version_count == 0:
            raise EmptyStateError("no version has been created")
        v = object.__new__(Version)
        object.__setattr__(v, "partials", tuple(self._partials))
        return v

    def push_version(self, version: Version | RowBatch) -> "IntrinsicState":
        if isinstance(version, RowBatch):
            partials = [Partial(version) if self.check_keys else _unchecked(version)]
        else:
            partials = list(version.partials)
        self._partials = partials
        self._keys = set().union(*(p.key_set for p in partials)) if self.check_keys else set()
        self.version_count += 1
        self._cache = None
        return self

    def append_partial(self, partial: Partial | RowBatch) -> "IntrinsicState":
        if self.version_count == 0:
            self.version_count = 1
        if isinstance(partial, RowBatch):
            partial = Partial(partial) if self.check_keys else _unchecked(partial)
        if self.check_keys and partial.rows.schema.primary_key:
            if not self._keys.isdisjoint(partial.key_set):
                raise KeyOverlapError("appended partial overlaps keys of the latest version")
            self._keys |= partial.key_set
        self._partials.append(partial)
        self._cache = None
        return self

    def latest_state(self) -> RowBatch:
        if self.version_count == 0:
            raise EmptyStateError("no version has been created")
        if self._cache is None:
            batches = [p.rows for p in self._partials if p.rows.row_count or len(self._partials) == 1]
            if not batches:
                if self.schema is None and not self._partials:
                    raise EmptyStateError("latest version has no partials and no schema")
                schema = self.schema or self._partials[0].rows.schema
                self._cache = RowBatch.empty(schema)
            else:
                self._cache = RowBatch.concat(batches)
        return self._cache


def _unchecked(batch: RowBatch) -> Partial:
    p = object.__new__(Partial)
    object.__setattr__(p, "rows", batch)
    object.__setattr__(p, "key_set", frozenset())
    return p


@dataclass(frozen=True)
class Progress:
    """Fraction of original input rows processed, kept as exact integers."""

    done: int
    total: int

    def __post_init__(self):
        if self.total < 0 or not 0 <= self.done <= self.total:
            raise ValueError(f"invalid progress {self.done}/{self.total}")

    @property
    def fraction(self) -> Fraction:
        return Fraction(1) if self.total == 0 else Fraction(self.done, self.total)

    @property
    def t(self) -> float:
        return float(self.fraction)

    @property
    def is_final(self) -> bool:
        return is_final(self)

    def __add__(self, other: "Progress") -> "Progress":
        return Progress(self.done + other.done, self.total + other.total)

    def __lt__(self, other):  # compare by value, not by field order
        return self.fraction < other.fraction

    def __le__(self, other):
        return self.fraction <= other.fraction

    def __gt__(self, other):
        return self.fraction > other.fraction

    def __ge__(self, other):
        return self.fraction >= other.fraction


def is_final(progress: Progress) -> bool:
    return progress.done == progress.total


@dataclass(frozen=True)
class GrowthSpec:
    """Monomial growth ``c * t**w`` of a frame's row count."""

    w: float
    c: float = 0.0

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("growth coefficient must be non-negative")

    def rows_at(self, t: float) -> float:
        return self.c * t**self.w


def latest_state(edf: IntrinsicState) -> RowBatch:
    return edf.latest_state()


def append_partial(edf: IntrinsicState, p: Partial | RowBatch) -> IntrinsicState:
    return edf.append_partial(p)


def push_version(edf: IntrinsicState, v: Version | RowBatch) -> IntrinsicState:
    return edf.push_version(v)
