"""Online aggregation over evolving data frames."""

from .edf import AttributeDef, EdfSchema, IntrinsicState, Partial, Progress, RowBatch, Version
from .executor import QueryAborted, QueryGraph, SnapshotRecord, TraceLog, build_graph, run, run_sequential
from .ingest import MemoryTable, TableMeta, load_meta, write_table

__all__ = [
    "AttributeDef",
    "EdfSchema",
    "IntrinsicState",
    "MemoryTable",
    "Partial",
    "Progress",
    "QueryAborted",
    "QueryGraph",
    "RowBatch",
    "SnapshotRecord",
    "TableMeta",
    "TraceLog",
    "Version",
    "build_graph",
    "load_meta",
    "run",
    "run_sequential",
    "write_table",
]

__version__ = "0.1.0"
