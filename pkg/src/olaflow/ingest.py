"""Partitioned CSV tables described by a YAML ``meta`` file.

Layout::

    <table>/meta
    <table>/part-00000.csv
    <table>/part-00001.csv

``meta`` example::

    name: sales
    schema: [id:int64, state:utf8, amount:float64]
    primary_key: [id]
    clustering_key: [id]        # optional
    partitions:
      - {file: part-00000.csv, rows: 1000}
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import yaml

from .edf import AttributeDef, EdfSchema, Progress, RowBatch, SchemaError

META_FILE = "meta"


class IngestError(ValueError):
    """Malformed metadata or partition file."""


@dataclass(frozen=True)
class PartitionInfo:
    path: Path
    row_count: int


@dataclass(frozen=True)
class TableMeta:
    name: str
    schema: EdfSchema
    partitions: tuple[PartitionInfo, ...]

    @property
    def total_rows(self) -> int:
        return sum(p.row_count for p in self.partitions)

    @property
    def n_partitions(self) -> int:
        return len(self.partitions)

    @property
    def primary_key(self):
        return self.schema.primary_key

    @property
    def clustering_key(self):
        return self.schema.clustering_key

    def row_counts(self) -> list[int]:
        return [p.row_count for p in self.partitions]

    def read(self, index: int) -> RowBatch:
        return _parse_partition(self, index)


@dataclass(frozen=True)
class MemoryTable:
    """In-memory stand-in for a table directory (same reading interface)."""

    name: str
    schema: EdfSchema
    batches: tuple[RowBatch, ...] = field(default=())

    @property
    def total_rows(self) -> int:
        return sum(b.row_count for b in self.batches)

    @property
    def n_partitions(self) -> int:
        return len(self.batches)

    @property
    def clustering_key(self):
        return self.schema.clustering_key

    def row_counts(self) -> list[int]:
        return [b.row_count for b in self.batches]

    def read(self, index: int) -> RowBatch:
        return self.batches[index]


def load_meta(path) -> TableMeta:
    """Parse ``<dir>/meta`` (or a meta file path) into a :class:`TableMeta`."""
    path = Path(path)
    meta_path = path / META_FILE if path.is_dir() else path
    if not meta_path.exists():
        raise IngestError(f"{meta_path}: metadata file not found")
    try:
        doc = yaml.safe_load(meta_path.read_text())
    except yaml.YAMLError as exc:
        raise IngestError(f"{meta_path}: {exc}") from None
    if not isinstance(doc, dict):
        raise IngestError(f"{meta_path}: expected a mapping")
    try:
        attrs = tuple(AttributeDef.parse(a) for a in doc["schema"])
        schema = EdfSchema(attrs, tuple(doc["primary_key"]), doc.get("clustering_key"))
        parts = []
        for entry in doc.get("partitions") or ():
            rows = int(entry["rows"])
            if rows <= 0:
                raise IngestError(f"{meta_path}: partition {entry['file']} has no rows")
            parts.append(PartitionInfo(meta_path.parent / entry["file"], rows))
    except KeyError as exc:
        raise IngestError(f"{meta_path}: missing field {exc}") from None
    except SchemaError as exc:
        raise IngestError(f"{meta_path}: {exc}") from None
    if not schema.primary_key:
        raise IngestError(f"{meta_path}: a table needs a primary key")
    return TableMeta(doc.get("name") or meta_path.parent.name, schema, tuple(parts))


_PARSERS = {"int64": int, "float64": float, "utf8": str}


def _parse_partition(meta: TableMeta, index: int) -> RowBatch:
    info = meta.partitions[index]
    names = meta.schema.names
    try:
        handle = open(info.path, newline="")
    except OSError as exc:
        raise IngestError(f"{info.path}: {exc.strerror}") from None
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or sorted(header) != sorted(names):
            raise IngestError(f"{info.path}:1: header {header} does not match schema {names}")
        records = list(reader)
    for line, record in enumerate(records, start=2):
        if len(record) != len(header):
            raise IngestError(f"{info.path}:{line}: expected {len(header)} fields, got {len(record)}")
    if len(records) != info.row_count:
        raise IngestError(f"{info.path}: metadata declares {info.row_count} rows, file has {len(records)}")
    raw = list(zip(*records)) if records else [()] * len(header)
    cols = {}
    for name in names:
        cells = raw[header.index(name)]
        kind = meta.schema.attr(name).kind
        if "" in cells:
            line = cells.index("") + 2
            raise IngestError(f"{info.path}:{line}: empty value for {name!r}")
        cols[name] = _convert(cells, kind, info.path, name)
    return RowBatch(meta.schema, cols)


def _convert(cells, kind, path, name):
    if kind == "utf8":
        return list(cells)
    parse = _PARSERS[kind]
    try:
        return np.array(cells, dtype=str).astype(np.int64 if kind == "int64" else np.float64)
    except ValueError:
        pass
    for line, cell in enumerate(cells, start=2):
        try:
            parse(cell)
        except ValueError:
            raise IngestError(f"{path}:{line}: bad {name} value {cell!r}") from None
    return [parse(c) for c in cells]


def read_partition(meta, index: int) -> tuple[RowBatch, Progress]:
    """Partition ``index`` and the progress after reading partitions ``0..index``."""
    if not 0 <= index < meta.n_partitions:
        raise IndexError(f"partition {index} out of range 0..{meta.n_partitions - 1}")
    counts = meta.row_counts()
    return meta.read(index), Progress(sum(counts[: index + 1]), meta.total_rows)


def shuffle_order(meta, seed: int, force: bool = False) -> list[int]:
    """Deterministic partition permutation; seed 0 keeps metadata order."""
    n = meta.n_partitions
    if seed == 0:
        return list(range(n))
    if meta.clustering_key and not force:
        raise IngestError(
            f"table {meta.name!r} is clustered on {list(meta.clustering_key)}; shuffling it breaks merge joins"
        )
    return [int(i) for i in np.random.default_rng(seed).permutation(n)]


def iter_partitions(meta, order: Sequence[int] | None = None) -> Iterator[tuple[int, RowBatch, Progress]]:
    """Yield ``(index, batch, progress)`` with progress accumulated in emission order."""
    order = list(range(meta.n_partitions)) if order is None else list(order)
    if sorted(order) != list(range(meta.n_partitions)):
        raise IngestError(f"partition order {order} is not a permutation of 0..{meta.n_partitions - 1}")
    counts = meta.row_counts()
    done = 0
    for index in order:
        batch = meta.read(index)
        done += counts[index]
        yield index, batch, Progress(done, meta.total_rows)


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_table(directory, name: str, schema: EdfSchema, batches: Sequence[RowBatch]) -> TableMeta:
    """Write ``batches`` as a table directory and return its metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    parts = []
    for k, batch in enumerate(batches):
        if batch.row_count == 0:
            continue
        fname = f"part-{len(parts):05d}.csv"
        with open(directory / fname, "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(schema.names)
            for row in batch.to_rows():
                writer.writerow([_format(v) for v in row])
        parts.append({"file": fname, "rows": batch.row_count})
    doc = {
        "name": name,
        "schema": [str(a) for a in schema.attributes],
        "primary_key": list(schema.primary_key),
    }
    if schema.clustering_key:
        doc["clustering_key"] = list(schema.clustering_key)
    doc["partitions"] = parts
    tmp = directory / (META_FILE + ".tmp")
    tmp.write_text(yaml.safe_dump(doc, sort_keys=False))
    os.replace(tmp, directory / META_FILE)
    return load_meta(directory)
