"""Row-level operators: map, filter, hash and merge joins, sort/limit."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..confidence import propagate_map_columns
from ..edf import AttributeDef, EdfSchema, RowBatch, SchemaError
from .functions import Predicate, lookup


class OperatorClass(enum.Enum):
    ORDER_PRESERVING_LOCAL = "order_preserving_local"
    SHUFFLE_WITH_INFERENCE = "shuffle_with_inference"
    SHUFFLE_WITHOUT_INFERENCE = "shuffle_without_inference"


class JoinOrderError(RuntimeError):
    """A merge-join input delivered keys below an already seen key."""


# --- map ------------------------------------------------------------------


@dataclass(frozen=True)
class Derived:
    name: str
    fn: str
    args: tuple[str, ...]
    params: tuple = ()

    @classmethod
    def parse(cls, d: dict) -> "Derived":
        func = lookup(d["fn"])
        args = tuple(d.get("args", ()))
        if len(args) != func.arity:
            raise SchemaError(f"{d['fn']} takes {func.arity} column(s), got {list(args)}")
        params = tuple(d[p] for p in func.params if p in d)
        if len(params) != len(func.params):
            raise SchemaError(f"{d['fn']} needs parameters {func.params}")
        return cls(d["as"], d["fn"], args, params)


@dataclass(frozen=True)
class ColumnMap:
    """Derive columns with built-in functions, then optionally project.

    Derived columns are mutable when any argument is; their variance is
    propagated from the arguments by finite differences.
    """

    derive: tuple[Derived, ...] = ()
    keep: tuple[str, ...] | None = None

    @classmethod
    def parse(cls, params: dict) -> "ColumnMap":
        derive = tuple(Derived.parse(d) for d in params.get("derive", ()))
        keep = params.get("keep")
        return cls(derive, tuple(keep) if keep is not None else None)

    def output_schema(self, schema: EdfSchema) -> EdfSchema:
        attrs = list(schema.attributes)
        names = set(schema.names)
        for d in self.derive:
            if d.name in names:
                raise SchemaError(f"derived column {d.name!r} already exists")
            srcs = [next((a for a in attrs if a.name == arg), None) for arg in d.args]
            if None in srcs:
                raise SchemaError(f"{d.name}: unknown argument in {list(d.args)}")
            kind = lookup(d.fn).kind or srcs[0].kind
            mutability = "mutable" if any(a.mutable for a in srcs) else "constant"
            attrs.append(AttributeDef(d.name, kind, mutability))
            names.add(d.name)
        if self.keep is not None:
            unknown = set(self.keep) - names
            if unknown:
                raise SchemaError(f"projection keeps unknown columns {sorted(unknown)}")
            dropped_keys = set(schema.primary_key) - set(self.keep)
            if dropped_keys:
                raise SchemaError(f"projection drops primary key columns {sorted(dropped_keys)}")
            attrs = [a for a in attrs if a.name in self.keep]
        ck = schema.clustering_key
        if ck and not set(ck) <= {a.name for a in attrs}:
            ck = None
        return EdfSchema(tuple(attrs), schema.primary_key, ck)

    def __call__(self, batch: RowBatch, out_schema: EdfSchema | None = None) -> RowBatch:
        out_schema = out_schema or self.output_schema(batch.schema)
        cols = dict(batch.columns)
        variance = dict(batch.variance)
        unstable = dict(batch.unstable)
        valid = dict(batch.valid)
        for d in self.derive:
            func = lookup(d.fn)
            args = [cols[a] for a in d.args]
            with np.errstate(all="ignore"):
                cols[d.name] = func.fn(*args, *d.params)
            arg_vars = [variance.get(a) for a in d.args]
            if any(v is not None for v in arg_vars):
                fn = (lambda *xs, _f=func, _p=d.params: _f.fn(*xs, *_p))
                var, flag = propagate_map_columns(fn, args, arg_vars)
                for a in d.args:
                    if a in unstable:
                        flag = flag | unstable[a]
                variance[d.name] = var
                unstable[d.name] = flag
            masks = [valid[a] for a in d.args if a in valid]
            if masks:
                valid[d.name] = np.logical_and.reduce(masks)
        names = set(out_schema.names)

        def pick(side):
            return {k: v for k, v in side.items() if k in names}

        return RowBatch(out_schema, {n: cols[n] for n in out_schema.names}, pick(variance), pick(unstable), pick(valid))


@dataclass(frozen=True)
class BatchMap:
    """Arbitrary batch function with a declared output schema."""

    fn: Callable[[RowBatch], RowBatch]
    schema_fn: Callable[[EdfSchema], EdfSchema]

    def output_schema(self, schema: EdfSchema) -> EdfSchema:
        return self.schema_fn(schema)

    def __call__(self, batch: RowBatch, out_schema: EdfSchema | None = None) -> RowBatch:
        out = self.fn(batch)
        expected = out_schema or self.output_schema(batch.schema)
        if out.schema != expected:
            raise SchemaError(f"map produced schema {out.schema}, expected {expected}")
        return out


def apply_map(batches: RowBatch | Sequence[RowBatch], f) -> RowBatch:
    """Apply ``f`` to the concatenation of one or more partials."""
    if isinstance(batches, RowBatch):
        batches = [batches]
    batch = RowBatch.concat(list(batches))
    return f(batch)


# --- filter ---------------------------------------------------------------


def apply_filter(batches: RowBatch | Sequence[RowBatch], predicate) -> RowBatch:
    if isinstance(batches, RowBatch):
        batches = [batches]
    batch = RowBatch.concat(list(batches))
    pred = predicate if callable(predicate) and not isinstance(predicate, Predicate) else Predicate.parse(predicate)
    mask = pred(batch) if not isinstance(pred, Predicate) else pred.mask(batch)
    return batch.mask(mask)


# --- joins ----------------------------------------------------------------


@dataclass(frozen=True)
class JoinSpec:
    """Join of a probe (left) input with a build (right) input.

    ``keys`` pairs probe columns with build columns.  ``method`` is ``hash``,
    ``merge`` or ``auto`` (merge when both sides are clustered on their keys).
    """

    keys: tuple[tuple[str, str], ...]
    method: str = "auto"
    how: str = "inner"

    @classmethod
    def parse(cls, params: dict) -> "JoinSpec":
        raw = params["on"]
        if isinstance(raw, str):
            raw = [raw]
        keys = tuple((k, k) if isinstance(k, str) else (k[0], k[1]) for k in raw)
        spec = cls(keys, params.get("method", "auto"), params.get("how", "inner"))
        if spec.method not in ("auto", "hash", "merge"):
            raise SchemaError(f"unknown join method {spec.method!r}")
        if spec.how not in ("inner", "left"):
            raise SchemaError(f"unsupported join type {spec.how!r}")
        return spec

    @property
    def probe_keys(self) -> tuple[str, ...]:
        return tuple(p for p, _ in self.keys)

    @property
    def build_keys(self) -> tuple[str, ...]:
        return tuple(b for _, b in self.keys)

    def resolve(self, probe: EdfSchema, build: EdfSchema) -> "JoinSpec":
        method = self.method
        if method == "auto":
            method = "merge" if clustered_on(probe, self.probe_keys) and clustered_on(build, self.build_keys) else "hash"
        elif method == "merge" and not (clustered_on(probe, self.probe_keys) and clustered_on(build, self.build_keys)):
            raise SchemaError("merge join needs both inputs clustered on their join keys")
        return JoinSpec(self.keys, method, self.how)


def clustered_on(schema: EdfSchema, keys: Sequence[str]) -> bool:
    ck = schema.clustering_key
    return bool(ck) and tuple(ck) == tuple(keys)


def _dropped_build_columns(spec: JoinSpec) -> set[str]:
    return {b for p, b in spec.keys if p == b}


def join_schema(probe: EdfSchema, build: EdfSchema, spec: JoinSpec) -> EdfSchema:
    for p, b in spec.keys:
        probe.attr(p)
        build.attr(b)
        if probe.attr(p).kind != build.attr(b).kind:
            raise SchemaError(f"join key kinds differ: {p} vs {b}")
    dropped = _dropped_build_columns(spec)
    attrs = list(probe.attributes)
    taken = set(probe.names)
    for a in build.attributes:
        if a.name in dropped:
            continue
        if a.name in taken:
            raise SchemaError(f"join output would repeat column {a.name!r}; rename it with a map first")
        attrs.append(a)
    pk, ck = key_rules("join", [probe, build], spec=spec)
    return EdfSchema(tuple(attrs), pk, ck)


class HashTable:
    """Build side of a hash join: join key -> build row indices."""

    def __init__(self, build: RowBatch, keys: Sequence[str]):
        self.batch = build
        self.index: dict = {}
        for i, k in enumerate(build.key_tuples(keys)):
            self.index.setdefault(k, []).append(i)


def hash_join(probe: RowBatch, build: RowBatch | HashTable, spec: JoinSpec, schema: EdfSchema | None = None) -> RowBatch:
    table = build if isinstance(build, HashTable) else HashTable(build, spec.build_keys)
    schema = schema or join_schema(probe.schema, table.batch.schema, spec)
    probe_idx, build_idx = [], []
    for i, k in enumerate(probe.key_tuples(spec.probe_keys)):
        hits = table.index.get(k)
        if hits:
            probe_idx.extend([i] * len(hits))
            build_idx.extend(hits)
        elif spec.how == "left":
            probe_idx.append(i)
            build_idx.append(-1)
    return _assemble(probe, table.batch, np.array(probe_idx, dtype=np.int64), np.array(build_idx, dtype=np.int64), spec, schema)


def _assemble(probe, build, pi, bi, spec, schema):
    left = probe.take(pi)
    cols = dict(left.columns)
    variance, unstable, valid = dict(left.variance), dict(left.unstable), dict(left.valid)
    absent = bi < 0
    safe = np.where(absent, 0, bi)
    names = set(schema.names)
    for a in build.schema.attributes:
        if a.name not in names or a.name in probe.schema.names:
            continue
        if build.row_count:
            col = build[a.name][safe]
        else:
            col = np.zeros(len(bi), dtype=build[a.name].dtype)
        if absent.any():
            col = col.copy()
            col[absent] = "" if a.kind == "utf8" else 0
            valid[a.name] = ~absent
        cols[a.name] = col
        for side, store, fill in ((build.variance, variance, 0.0), (build.unstable, unstable, False)):
            if a.name in side:
                vals = side[a.name][safe] if build.row_count else np.zeros(len(bi))
                store[a.name] = np.where(absent, fill, vals)
    return RowBatch._trusted(schema, cols, variance, unstable, valid)


def _sort_order(batch: RowBatch, keys: Sequence[str]) -> np.ndarray:
    return np.lexsort([batch[k] for k in reversed(keys)]) if keys else np.arange(batch.row_count)


def merge_join_batches(left: RowBatch, right: RowBatch, spec: JoinSpec, schema: EdfSchema | None = None) -> RowBatch:
    """Sort-merge join of two batches; output ordered by the join key."""
    schema = schema or join_schema(left.schema, right.schema, spec)
    lo = _sort_order(left, spec.probe_keys)
    ro = _sort_order(right, spec.build_keys)
    lkeys, rkeys = left.key_tuples(spec.probe_keys), right.key_tuples(spec.build_keys)
    lk = [lkeys[i] for i in lo]
    rk = [rkeys[i] for i in ro]
    li, ri = [], []
    i = j = 0
    while i < len(lk):
        while j < len(rk) and rk[j] < lk[i]:
            j += 1
        j_end = j
        while j_end < len(rk) and rk[j_end] == lk[i]:
            j_end += 1
        i_end = i
        while i_end < len(lk) and lk[i_end] == lk[i]:
            i_end += 1
        if j_end > j:
            for a in range(i, i_end):
                li.extend([lo[a]] * (j_end - j))
                ri.extend(ro[j:j_end].tolist())
        elif spec.how == "left":
            li.extend(lo[i:i_end].tolist())
            ri.extend([-1] * (i_end - i))
        i, j = i_end, j_end
    return _assemble(left, right, np.array(li, dtype=np.int64), np.array(ri, dtype=np.int64), spec, schema)


@dataclass
class MergeJoinState:
    """Streaming merge join of two inputs clustered on the join key.

    Each arriving delta is joined against the rows retained from the other
    side.  Rows whose key is below the other side's largest seen key can no
    longer match and are evicted, so only the unmatched frontier is kept.
    Left joins are only supported in full-recompute mode.
    """

    spec: JoinSpec
    schema: EdfSchema
    retained: list = field(default_factory=lambda: [None, None])
    max_key: list = field(default_factory=lambda: [None, None])

    def push(self, side: int, delta: RowBatch) -> RowBatch:
        if self.spec.how != "inner":
            raise SchemaError("streaming merge join supports inner joins only")
        keys = self.spec.probe_keys if side == 0 else self.spec.build_keys
        other_keys = self.spec.build_keys if side == 0 else self.spec.probe_keys
        tuples = delta.key_tuples(keys)
        if tuples:
            lo, hi = min(tuples), max(tuples)
            if self.max_key[side] is not None and lo < self.max_key[side]:
                raise JoinOrderError(f"input {side} went back from key {self.max_key[side]} to {lo}")
            self.max_key[side] = hi
        other = self.retained[1 - side]
        if other is None or other.row_count == 0 or delta.row_count == 0:
            out = RowBatch.empty(self.schema)
        elif side == 0:
            out = merge_join_batches(delta, other, self.spec, self.schema)
        else:
            out = merge_join_batches(other, delta, self.spec, self.schema)
        mine = delta if self.retained[side] is None else RowBatch.concat([self.retained[side], delta])
        self.retained[side] = self._evict(mine, keys, self.max_key[1 - side])
        if self.retained[1 - side] is not None:
            self.retained[1 - side] = self._evict(self.retained[1 - side], other_keys, self.max_key[side])
        return out

    @staticmethod
    def _evict(batch: RowBatch, keys, bound) -> RowBatch:
        if bound is None or batch.row_count == 0:
            return batch
        keep = [k >= bound for k in batch.key_tuples(keys)]
        return batch.mask(keep)

    @property
    def buffered_rows(self) -> int:
        return sum(b.row_count for b in self.retained if b is not None)


def merge_join(left_stream: Sequence[RowBatch], right_stream: Sequence[RowBatch], spec: JoinSpec):
    """Join two key-ordered partial streams, alternating inputs; yields output partials."""
    left_stream, right_stream = list(left_stream), list(right_stream)
    if not left_stream and not right_stream:
        return
    lschema = (left_stream or right_stream)[0].schema if left_stream else None
    rschema = right_stream[0].schema if right_stream else None
    if lschema is None or rschema is None:
        return
    state = MergeJoinState(spec, join_schema(lschema, rschema, spec))
    for i in range(max(len(left_stream), len(right_stream))):
        if i < len(left_stream):
            yield state.push(0, left_stream[i])
        if i < len(right_stream):
            yield state.push(1, right_stream[i])


# --- sort / limit ---------------------------------------------------------


def _rank_desc(values: np.ndarray) -> np.ndarray:
    _, inv = np.unique(values, return_inverse=True)
    return -inv.reshape(-1)


def sort_limit(batch: RowBatch, order: Sequence[tuple[str, bool]], limit: int | None = None) -> RowBatch:
    """Full sort by ``(column, descending)`` pairs, ties by primary key, then truncate."""
    if limit is not None and limit < 0:
        raise ValueError("limit must be non-negative")
    sort_cols = []
    for name, desc in order:
        col = batch[name]
        sort_cols.append(_rank_desc(col) if desc else col)
    for name in batch.schema.primary_key:
        if name not in [o[0] for o in order]:
            sort_cols.append(batch[name])
    if sort_cols and batch.row_count:
        idx = np.lexsort(list(reversed(sort_cols)))
    else:
        idx = np.arange(batch.row_count)
    if limit is not None:
        idx = idx[:limit]
    return batch.take(idx)


def parse_order(raw) -> tuple[tuple[str, bool], ...]:
    """``["-total", "name"]`` or ``[["total", true]]`` -> ``(("total", True), ("name", False))``."""
    out = []
    for item in raw if isinstance(raw, (list, tuple)) else [raw]:
        if isinstance(item, str):
            out.append((item[1:], True) if item.startswith("-") else (item, False))
        else:
            out.append((str(item[0]), bool(item[1])))
    return tuple(out)


# --- keys and classification ----------------------------------------------


def key_rules(op: str, schemas: Sequence[EdfSchema], by: Sequence[str] = (), spec: JoinSpec | None = None):
    """Primary and clustering key of an operator's output."""
    first = schemas[0]
    if op in ("map", "filter", "sort_limit"):
        return first.primary_key, first.clustering_key
    if op == "agg":
        ck = first.clustering_key
        return tuple(by), (ck if ck and set(ck) <= set(by) else None)
    if op in ("join", "hash_join", "merge_join"):
        build = schemas[1]
        pk = tuple(first.primary_key)
        if not set(build.primary_key) <= set(spec.build_keys):
            # several build rows may match one probe row
            dropped = _dropped_build_columns(spec)
            pk = pk + tuple(k for k in build.primary_key if k not in dropped and k not in pk)
        return pk, first.clustering_key
    raise ValueError(f"unknown operator {op!r}")


def classify(op: str, schemas: Sequence[EdfSchema], params: dict | None = None) -> OperatorClass:
    params = params or {}
    first = schemas[0] if schemas else None
    if op == "sort_limit":
        return OperatorClass.SHUFFLE_WITHOUT_INFERENCE
    if op == "agg":
        ck = first.clustering_key
        if ck and set(ck) <= set(params.get("by", ())):
            return OperatorClass.ORDER_PRESERVING_LOCAL
        return OperatorClass.SHUFFLE_WITH_INFERENCE
    if op == "filter":
        pred = Predicate.parse(params["predicate"])
        if any(first.attr(c).mutable for c in pred.columns):
            return OperatorClass.SHUFFLE_WITHOUT_INFERENCE
        return OperatorClass.ORDER_PRESERVING_LOCAL
    if op in ("map", "read"):
        if op == "map" and any(a.mutable for a in first.attributes):
            return OperatorClass.SHUFFLE_WITHOUT_INFERENCE
        return OperatorClass.ORDER_PRESERVING_LOCAL
    if op in ("join", "hash_join", "merge_join"):
        if any(a.mutable for s in schemas for a in s.attributes):
            return OperatorClass.SHUFFLE_WITHOUT_INFERENCE
        return OperatorClass.ORDER_PRESERVING_LOCAL
    raise ValueError(f"unknown operator {op!r}")
