"""Group-by aggregation with mergeable per-group state.

An :class:`AggState` holds, for every group, the intrinsic representation of
each requested aggregate.  ``merge_agg(a, b)`` equals building the state from
the union of the rows behind ``a`` and ``b``; :func:`to_extrinsic` turns a
state into estimates using the growth model.

Intrinsic components per kind:

==============  =========================================================
count           rows per group (shared by all aggregates)
sum             sum, sum of squared deviations, summed input variance
avg             weighted sum, weight sum and their 2x2 co-moments
var / stddev    sum, sum of squared deviations
min / max       the ``EXTREMES_KEPT`` most extreme values, sorted
count_distinct  value -> id of the only partial holding it (-1 if several)
quantile        every value
==============  =========================================================

Sums are carried as double-double pairs (``s`` plus a ``s_lo`` residual)
seeded with exactly rounded per-group sums, so a fully merged state rounds
to the same value as a single exact pass over all rows.
"""

from __future__ import annotations

import math
from itertools import chain
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..confidence import extreme_bootstrap_variances, initial_variance_order_stat
from ..edf import AttributeDef, EdfSchema, RowBatch, SchemaError
from ..inference import (
    AggregateKind,
    _zero_times_inf,
    cardinality,
    distinct_gradient,
    ratio_estimate,
    solve_distinct,
    sum_estimate,
)

EXTREMES_KEPT = 16
BOOTSTRAP_RESAMPLES = 200

_FLOAT_OUTPUT = {"count", "sum", "avg", "var", "stddev", "count_distinct", "quantile"}
_NUMERIC_INPUT = {"sum", "avg", "var", "stddev", "quantile"}


class AggregateError(ValueError):
    pass


@dataclass(frozen=True)
class AggSpec:
    kind: AggregateKind
    column: str | None
    name: str
    weight: str | None = None

    @classmethod
    def parse(cls, d: dict) -> "AggSpec":
        """Build from ``{"kind": ..., "column": ..., "as": ..., "weight": ..., "q": ...}``."""
        kind = AggregateKind(d["kind"], d.get("q"))
        column = d.get("column")
        if kind.tag != "count" and column is None:
            raise AggregateError(f"{kind.tag} needs a column")
        if d.get("weight") and kind.tag != "avg":
            raise AggregateError("only avg accepts a weight column")
        name = d.get("as") or (f"{kind.tag}_{column}" if column else kind.tag)
        return cls(kind, column, name, d.get("weight"))

    @property
    def tag(self) -> str:
        return self.kind.tag

    def to_dict(self) -> dict:
        d = {"kind": self.tag, "as": self.name}
        if self.column:
            d["column"] = self.column
        if self.weight:
            d["weight"] = self.weight
        if self.kind.q is not None:
            d["q"] = self.kind.q
        return d


def output_schema(input_schema: EdfSchema, by: Sequence[str], specs: Sequence[AggSpec]) -> EdfSchema:
    """Group keys stay constant; aggregate outputs are mutable."""
    attrs = []
    for name in by:
        a = input_schema.attr(name)
        if a.mutable:
            raise AggregateError(f"cannot group by mutable attribute {name!r}")
        attrs.append(AttributeDef(name, a.kind, "constant"))
    for spec in specs:
        for col in (spec.column, spec.weight):
            if col is not None:
                a = input_schema.attr(col)
                if spec.tag in _NUMERIC_INPUT and a.kind == "utf8":
                    raise AggregateError(f"{spec.tag} over text column {col!r}")
        kind = "float64" if spec.tag in _FLOAT_OUTPUT else input_schema.attr(spec.column).kind
        attrs.append(AttributeDef(spec.name, kind, "mutable"))
    ck = input_schema.clustering_key
    ck = ck if ck and set(ck) <= set(by) else None
    return EdfSchema(tuple(attrs), tuple(by), ck)


def factorize(columns: Sequence[np.ndarray], n: int):
    """Group ids for rows keyed by ``columns``; groups come out in key order.

    Returns ``(codes, key_columns, n_groups)``.  With no key columns every
    row belongs to one group.
    """
    if not columns:
        return np.zeros(n, dtype=np.int64), [], (1 if n else 0)
    inverses, uniques = [], []
    for col in columns:
        u, inv = np.unique(col, return_inverse=True)
        uniques.append(u)
        inverses.append(inv.reshape(-1))
    if len(columns) == 1:
        return inverses[0].astype(np.int64), [uniques[0]], len(uniques[0])
    rows, codes = np.unique(np.stack(inverses, axis=1), axis=0, return_inverse=True)
    keys = [u[rows[:, k]] for k, u in enumerate(uniques)]
    return codes.reshape(-1).astype(np.int64), keys, len(rows)


def _segments(codes, values, n_groups):
    """Per-group sorted value arrays."""
    order = np.lexsort((values, codes))
    sorted_codes, sorted_vals = codes[order], values[order]
    bounds = np.searchsorted(sorted_codes, np.arange(n_groups + 1))
    return [sorted_vals[bounds[g] : bounds[g + 1]] for g in range(n_groups)]


def _comoment(codes, u, v, mu_u, mu_v, n_groups):
    return np.bincount(codes, (u - mu_u[codes]) * (v - mu_v[codes]), minlength=n_groups)


def _object_array(items):
    out = np.empty(len(items), dtype=object)
    out[:] = items
    return out


@dataclass
class AggState:
    by: tuple[str, ...]
    specs: tuple[AggSpec, ...]
    keys: dict[str, np.ndarray]
    count: np.ndarray
    comps: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    partials: int = 0

    @property
    def n_groups(self) -> int:
        return len(self.count)

    @classmethod
    def empty(cls, by, specs, key_dtypes=None) -> "AggState":
        key_dtypes = key_dtypes or {}
        keys = {c: np.array([], dtype=key_dtypes.get(c, object)) for c in by}
        state = cls(tuple(by), tuple(specs), keys, np.zeros(0, dtype=np.int64))
        for spec in specs:
            state.comps[spec.name] = _empty_components(spec)
        return state

    @classmethod
    def from_batch(cls, batch: RowBatch, by: Sequence[str], specs: Sequence[AggSpec], partial_id: int = 0) -> "AggState":
        """Aggregate one batch of rows (``op(delta)``)."""
        by, specs = tuple(by), tuple(specs)
        n = batch.row_count
        if n == 0:
            dtypes = {c: batch[c].dtype for c in by}
            return cls.empty(by, specs, dtypes)
        codes, key_cols, G = factorize([batch[c] for c in by], n)
        count = np.bincount(codes, minlength=G).astype(np.int64)
        state = cls(by, specs, dict(zip(by, key_cols)), count, partials=1)
        for spec in specs:
            state.comps[spec.name] = _components(spec, batch, codes, count, G, partial_id)
        return state

    def values(self) -> dict[str, np.ndarray]:
        """Raw (unscaled) aggregate values per group."""
        out = {}
        n = self.count.astype(float)
        for spec in self.specs:
            c = self.comps[spec.name]
            tag = spec.tag
            if tag == "count":
                out[spec.name] = n
            elif tag == "sum":
                out[spec.name] = c["s"].copy()
            elif tag == "avg":
                with np.errstate(all="ignore"):
                    out[spec.name] = c["a"] / c["b"]
            elif tag in ("var", "stddev"):
                var = c["m2"] / n
                out[spec.name] = np.sqrt(var) if tag == "stddev" else var
            elif tag in ("min", "max"):
                out[spec.name] = _first_values(c["ext"])
            elif tag == "count_distinct":
                out[spec.name] = np.array([len(d) for d in c["seen"]], dtype=float)
            elif tag == "quantile":
                out[spec.name] = np.array([np.quantile(s, spec.kind.q) for s in c["sample"]], dtype=float)
        return out


def _first_values(ext):
    vals = [e[0] for e in ext]
    if vals and isinstance(vals[0], str):
        return _object_array(vals)
    return np.array(vals)


def _empty_components(spec: AggSpec) -> dict:
    z = np.zeros(0)
    tag = spec.tag
    if tag == "count":
        return {}
    if tag == "sum":
        return {"s": z, "s_lo": z, "m2": z, "vin": z}
    if tag == "avg":
        return {"a": z, "a_lo": z, "b": z, "b_lo": z, "caa": z, "cbb": z, "cab": z, "vin_a": z, "vin_b": z}
    if tag in ("var", "stddev"):
        return {"s": z, "s_lo": z, "m2": z}
    if tag in ("min", "max"):
        return {"ext": _object_array([])}
    if tag == "count_distinct":
        return {"seen": _object_array([])}
    return {"sample": _object_array([])}


def _components(spec, batch, codes, count, G, partial_id) -> dict:
    tag = spec.tag
    if tag == "count":
        return {}
    raw = batch[spec.column]
    var_in = batch.variance.get(spec.column)
    if tag in ("min", "max"):
        segs = _segments(codes, raw, G)
        if tag == "min":
            return {"ext": _object_array([s[:EXTREMES_KEPT] for s in segs])}
        return {"ext": _object_array([s[::-1][:EXTREMES_KEPT] for s in segs])}
    if tag == "count_distinct":
        seen = [dict() for _ in range(G)]
        for g, value in zip(codes.tolist(), raw.tolist()):
            seen[g][value] = partial_id
        return {"seen": _object_array(seen)}
    if tag == "quantile":
        return {"sample": _object_array(_segments(codes, raw.astype(float), G))}
    v = raw.astype(float)
    n = count.astype(float)
    if tag in ("sum", "var", "stddev"):
        s, s_lo = _exact_sums(codes, v, G)
        mu = s / n
        comps = {"s": s, "s_lo": s_lo, "m2": _comoment(codes, v, v, mu, mu, G)}
        if tag == "sum":
            comps["vin"] = np.bincount(codes, var_in, minlength=G) if var_in is not None else np.zeros(G)
        return comps
    # weighted average: a = w * v, b = w
    w = batch[spec.weight].astype(float) if spec.weight else np.ones_like(v)
    a_rows = w * v
    a, a_lo = _exact_sums(codes, a_rows, G)
    b, b_lo = _exact_sums(codes, w, G)
    mu_a, mu_b = a / n, b / n
    vin_a = np.zeros(G)
    vin_b = np.zeros(G)
    if var_in is not None:
        vin_a = vin_a + np.bincount(codes, w**2 * var_in, minlength=G)
    w_var = batch.variance.get(spec.weight) if spec.weight else None
    if w_var is not None:
        vin_a = vin_a + np.bincount(codes, v**2 * w_var, minlength=G)
        vin_b = vin_b + np.bincount(codes, w_var, minlength=G)
    return {
        "a": a,
        "a_lo": a_lo,
        "b": b,
        "b_lo": b_lo,
        "caa": _comoment(codes, a_rows, a_rows, mu_a, mu_a, G),
        "cbb": _comoment(codes, w, w, mu_b, mu_b, G),
        "cab": _comoment(codes, a_rows, w, mu_a, mu_b, G),
        "vin_a": vin_a,
        "vin_b": vin_b,
    }


def _exact_sums(codes, values, G):
    """Per-group exactly rounded sums and their rounding residuals."""
    order = np.argsort(codes, kind="stable")
    bounds = np.searchsorted(codes[order], np.arange(G + 1))
    vals = values[order].tolist()
    hi, lo = np.zeros(G), np.zeros(G)
    for g in range(G):
        seg = vals[bounds[g] : bounds[g + 1]]
        hi[g] = h = math.fsum(seg)
        lo[g] = math.fsum(chain(seg, (-h,)))
    return hi, lo


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _fast_two_sum(a, b):
    # needs |a| >= |b|
    s = a + b
    return s, b - (s - a)


def _merge_sums(codes, G, Ga, hi, lo):
    """Double-double addition of the two states' sums, aligned on merged groups."""
    h1, l1, h2, l2 = (np.zeros(G) for _ in range(4))
    h1[codes[:Ga]], l1[codes[:Ga]] = hi[:Ga], lo[:Ga]
    h2[codes[Ga:]], l2[codes[Ga:]] = hi[Ga:], lo[Ga:]
    s, e = _two_sum(h1, h2)
    t, f = _two_sum(l1, l2)
    s, e = _fast_two_sum(s, e + t)
    return _fast_two_sum(s, e + f)


def _combine_moments(codes, G, n_parts, n_tot, sums_parts, sums_tot, pairs):
    """Parallel combination of co-moments: sum of parts plus between-part terms."""
    out = {}
    means_parts = {k: v / n_parts for k, v in sums_parts.items()}
    means_tot = {k: v / n_tot for k, v in sums_tot.items()}
    for name, (p, q, parts) in pairs.items():
        between = n_parts * (means_parts[p] - means_tot[p][codes]) * (means_parts[q] - means_tot[q][codes])
        out[name] = np.bincount(codes, parts + between, minlength=G)
    return out


def merge_agg(acc: AggState, delta: AggState) -> AggState:
    """Key-wise merge of two states built with the same grouping and aggregates."""
    if acc.by != delta.by or acc.specs != delta.specs:
        raise AggregateError("cannot merge states of different aggregations")
    if acc.n_groups == 0 or delta.n_groups == 0:
        src = delta if acc.n_groups == 0 else acc
        return AggState(src.by, src.specs, dict(src.keys), src.count.copy(),
                        {k: dict(v) for k, v in src.comps.items()}, acc.partials + delta.partials)
    Ga = acc.n_groups
    key_cols = [np.concatenate([acc.keys[c], delta.keys[c]]) for c in acc.by]
    codes, keys, G = factorize(key_cols, Ga + delta.n_groups)
    n_parts = np.concatenate([acc.count, delta.count])
    count = np.bincount(codes, n_parts, minlength=G).astype(np.int64)
    n_parts_f, n_tot = n_parts.astype(float), count.astype(float)
    merged = AggState(acc.by, acc.specs, dict(zip(acc.by, keys)), count, partials=acc.partials + delta.partials)
    for spec in acc.specs:
        ca, cd = acc.comps[spec.name], delta.comps[spec.name]
        tag = spec.tag
        cat = {k: np.concatenate([ca[k], cd[k]]) for k in ca}
        if tag == "count":
            comps = {}
        elif tag in ("sum", "var", "stddev"):
            s, s_lo = _merge_sums(codes, G, Ga, cat["s"], cat["s_lo"])
            comps = {"s": s, "s_lo": s_lo}
            comps.update(_combine_moments(codes, G, n_parts_f, n_tot, {"s": cat["s"]}, {"s": s},
                                          {"m2": ("s", "s", cat["m2"])}))
            if tag == "sum":
                comps["vin"] = np.bincount(codes, cat["vin"], minlength=G)
        elif tag == "avg":
            a, a_lo = _merge_sums(codes, G, Ga, cat["a"], cat["a_lo"])
            b, b_lo = _merge_sums(codes, G, Ga, cat["b"], cat["b_lo"])
            comps = {"a": a, "a_lo": a_lo, "b": b, "b_lo": b_lo}
            comps.update(_combine_moments(
                codes, G, n_parts_f, n_tot,
                {"a": cat["a"], "b": cat["b"]}, {"a": a, "b": b},
                {"caa": ("a", "a", cat["caa"]), "cbb": ("b", "b", cat["cbb"]), "cab": ("a", "b", cat["cab"])},
            ))
            comps["vin_a"] = np.bincount(codes, cat["vin_a"], minlength=G)
            comps["vin_b"] = np.bincount(codes, cat["vin_b"], minlength=G)
        else:
            key = next(iter(ca))
            comps = {key: _merge_objects(tag, codes, cat[key], G)}
        merged.comps[spec.name] = comps
    return merged


def _merge_objects(tag, codes, items, G):
    out = [None] * G
    for g, item in zip(codes.tolist(), items):
        prev = out[g]
        if prev is None:
            out[g] = dict(item) if tag == "count_distinct" else item
        elif tag == "count_distinct":
            for value, pid in item.items():
                if value in prev and prev[value] != pid:
                    prev[value] = -1
                else:
                    prev[value] = pid
        elif tag == "quantile":
            out[g] = np.sort(np.concatenate([prev, item]))
        elif tag == "min":
            out[g] = np.sort(np.concatenate([prev, item]))[:EXTREMES_KEPT]
        else:
            out[g] = np.sort(np.concatenate([prev, item]))[::-1][:EXTREMES_KEPT]
    return _object_array(out)


def _jackknife_distinct(seen: dict, partials: int) -> float:
    """Leave-one-partial-out variance of a distinct count."""
    if partials < 2:
        return 0.0
    unique_to = {}
    for pid in seen.values():
        if pid >= 0:
            unique_to[pid] = unique_to.get(pid, 0) + 1
    u = np.zeros(partials)
    counts = np.array(list(unique_to.values()), dtype=float)
    u[: len(counts)] = counts
    return float((partials - 1) / partials * np.sum((u - u.mean()) ** 2))


def to_extrinsic(
    state: AggState,
    schema: EdfSchema,
    t: float,
    w: float,
    var_w: float,
    infer: bool = True,
    rng: np.random.Generator | None = None,
) -> RowBatch:
    """Estimated final aggregates with per-cell variances.

    With ``infer=False`` (or ``t == 1``) raw values are reported and only the
    sampling terms that vanish at completion are dropped.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    G = state.n_groups
    x = state.count.astype(float)
    if infer and 0 < t < 1:
        xhat, var_xhat = cardinality(x, t, w, var_w)
    else:
        xhat, var_xhat = x.copy(), np.zeros(G)
    with np.errstate(divide="ignore", invalid="ignore"):
        fpc = np.clip(np.where(xhat > 0, 1.0 - x / xhat, 0.0), 0.0, 1.0)
    if not infer:
        fpc = np.zeros(G)
    columns = {c: state.keys[c] for c in state.by}
    variance = {}
    for spec in state.specs:
        value, var = _estimate(spec, state, x, xhat, var_xhat, fpc, rng)
        columns[spec.name] = value
        if var is not None:
            variance[spec.name] = np.where(np.isnan(var), math.inf, var)
    return RowBatch(schema, columns, variance)


def _clt_total_variance(x, m2, fpc):
    """Variance of a sum of ``x`` sampled rows: ``x * s**2`` times the correction."""
    with np.errstate(divide="ignore", invalid="ignore"):
        s2 = np.where(x > 1, m2 / (x - 1), 0.0)
    return x * s2 * fpc


def _estimate(spec, state, x, xhat, var_xhat, fpc, rng):
    c = state.comps[spec.name]
    tag = spec.tag
    if tag == "count":
        return xhat, var_xhat
    if tag == "sum":
        var_y = _clt_total_variance(x, c["m2"], fpc) + c["vin"]
        return sum_estimate(c["s"], x, xhat, var_xhat, var_y)
    if tag == "avg":
        var_a = _clt_total_variance(x, c["caa"], fpc) + c["vin_a"]
        var_b = _clt_total_variance(x, c["cbb"], fpc) + c["vin_b"]
        cov = _clt_total_variance(x, c["cab"], fpc)
        with np.errstate(all="ignore"):
            return ratio_estimate(c["a"], c["b"], var_a, var_b, cov)
    if tag in ("var", "stddev"):
        var = c["m2"] / x
        with np.errstate(divide="ignore", invalid="ignore"):
            var_of_var = np.where(x > 1, 2.0 * var**2 / (x - 1), 0.0) * fpc
            if tag == "var":
                return var, var_of_var
            sd = np.sqrt(var)
            return sd, np.where(var > 0, var_of_var / (4.0 * var), 0.0)
    if tag in ("min", "max"):
        ext = c["ext"]
        value = _first_values(ext)
        if value.dtype == object:
            return value, None
        sign = 1.0 if tag == "min" else -1.0
        live = np.flatnonzero(fpc > 0)
        var = np.zeros(len(x))
        var[live] = extreme_bootstrap_variances([sign * ext[g].astype(float) for g in live], x[live],
                                                BOOTSTRAP_RESAMPLES, rng)
        return value, var * fpc
    if tag == "count_distinct":
        value = np.zeros(len(x))
        var = np.zeros(len(x))
        for g, seen in enumerate(c["seen"]):
            y = float(len(seen))
            X = max(xhat[g], x[g])
            var_y = _jackknife_distinct(seen, state.partials) * fpc[g]
            if y == 0:
                continue
            Y = solve_distinct(y, x[g], X) if X > x[g] else y
            d_y, d_X = distinct_gradient(Y, y, x[g], X)
            value[g] = Y
            var[g] = float(_zero_times_inf(d_y**2, var_y) + _zero_times_inf(d_X**2, var_xhat[g]))
        return value, var
    # quantile
    q = spec.kind.q
    value = np.array([np.quantile(s, q) for s in c["sample"]], dtype=float)
    var = np.array([
        initial_variance_order_stat(s, q, BOOTSTRAP_RESAMPLES, rng) if f > 0 and len(s) > 1 else 0.0
        for s, f in zip(c["sample"], fpc)
    ])
    return value, var * fpc
