"""Built-in column functions for maps and a tiny predicate language.

Predicates are conjunctions of ``column <op> literal`` terms, written either
as text (``"qty > 300 and flag == 'R'"``) or as ``[column, op, literal]``
triples.
"""

from __future__ import annotations

import ast
import operator
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..edf import RowBatch, SchemaError


@dataclass(frozen=True)
class ColumnFunction:
    fn: Callable
    arity: int
    # output kind, or None to copy the kind of the first argument
    kind: str | None = "float64"
    params: tuple[str, ...] = ()


def _startswith(a, prefix):
    return np.fromiter((s.startswith(prefix) for s in a), dtype=np.int64, count=len(a))


def _contains(a, needle):
    return np.fromiter((needle in s for s in a), dtype=np.int64, count=len(a))


FUNCTIONS: dict[str, ColumnFunction] = {
    "copy": ColumnFunction(lambda a: a, 1, None),
    "add": ColumnFunction(lambda a, b: a + b, 2),
    "sub": ColumnFunction(lambda a, b: a - b, 2),
    "mul": ColumnFunction(lambda a, b: a * b, 2),
    "div": ColumnFunction(lambda a, b: a / b, 2),
    "neg": ColumnFunction(lambda a: -a, 1),
    "abs": ColumnFunction(np.abs, 1),
    "sqrt": ColumnFunction(np.sqrt, 1),
    "log": ColumnFunction(np.log, 1),
    "square": ColumnFunction(lambda a: a * a, 1),
    "one_minus": ColumnFunction(lambda a: 1.0 - a, 1),
    "scale": ColumnFunction(lambda a, factor: a * factor, 1, params=("factor",)),
    "shift": ColumnFunction(lambda a, offset: a + offset, 1, params=("offset",)),
    # price * (1 - discount)
    "revenue": ColumnFunction(lambda price, disc: price * (1.0 - disc), 2),
    "mod": ColumnFunction(lambda a, k: np.asarray(a, dtype=np.int64) % int(k), 1, "int64", ("k",)),
    "startswith": ColumnFunction(_startswith, 1, "int64", ("prefix",)),
    "contains": ColumnFunction(_contains, 1, "int64", ("needle",)),
}


def lookup(name: str) -> ColumnFunction:
    try:
        return FUNCTIONS[name]
    except KeyError:
        raise SchemaError(f"unknown map function {name!r}; known: {sorted(FUNCTIONS)}") from None


_OPS = {
    "==": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}

_TERM = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(==|!=|<=|>=|<|>|\bin\b)\s*(.+?)\s*$")


@dataclass(frozen=True)
class Predicate:
    terms: tuple[tuple[str, str, object], ...]

    @classmethod
    def parse(cls, spec) -> "Predicate":
        if isinstance(spec, Predicate):
            return spec
        if isinstance(spec, str):
            terms = []
            for part in re.split(r"\s+and\s+", spec.strip()):
                m = _TERM.match(part)
                if not m:
                    raise SchemaError(f"cannot parse predicate term {part!r}")
                col, op, lit = m.groups()
                try:
                    value = ast.literal_eval(lit)
                except (ValueError, SyntaxError):
                    raise SchemaError(f"bad literal {lit!r} in predicate") from None
                terms.append((col, op, value))
            return cls(tuple(terms))
        if spec and not isinstance(spec[0], (list, tuple)):
            spec = [spec]
        terms = tuple((str(c), str(op), v) for c, op, v in spec)
        for _, op, _ in terms:
            if op not in _OPS and op != "in":
                raise SchemaError(f"unknown comparison {op!r}")
        return cls(terms)

    @property
    def columns(self) -> set[str]:
        return {c for c, _, _ in self.terms}

    def __str__(self):
        return " and ".join(f"{c} {op} {v!r}" for c, op, v in self.terms)

    def mask(self, batch: RowBatch) -> np.ndarray:
        keep = np.ones(batch.row_count, dtype=bool)
        for col, op, value in self.terms:
            data = batch[col]
            if op == "in":
                hit = np.isin(data, list(value))
            else:
                hit = np.asarray(_OPS[op](data, value), dtype=bool)
            keep &= hit
            valid = batch.valid.get(col)
            if valid is not None:
                keep &= valid
        return keep

    def row_matches(self, row: dict) -> bool:
        """Scalar evaluation on a ``{column: value}`` row; ``None`` never matches."""
        for col, op, value in self.terms:
            v = row[col]
            if v is None:
                return False
            if op == "in":
                if v not in value:
                    return False
            elif not _OPS[op](v, value):
                return False
        return True
