"""Query graphs and their pipelined execution.

Every node runs in its own thread and receives ``(slot, message)`` pairs on
a bounded inbox.  The terminal node's messages become snapshots.
:func:`run_sequential` drives the very same node logic on one thread in
topological order and serves as the reference for :func:`run`.
"""

from __future__ import annotations

import graphlib
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .confidence import ConfidenceInterval, chebyshev_k
from .edf import EdfSchema, IntrinsicState, Progress, RowBatch, SchemaError
from .ingest import iter_partitions
from .operators.nodes import APPEND, EOF, REFRESH, Message, NodeRunner, make_node, output_mode, plan_operator

CHANNEL_CAPACITY = 4
_POLL = 0.05

ARITY = {"read": 0, "map": 1, "filter": 1, "agg": 1, "sort_limit": 1, "join": 2, "hash_join": 2, "merge_join": 2}


class GraphError(ValueError):
    """Malformed query graph: cycles, arity, unknown nodes or tables."""


class QueryAborted(RuntimeError):
    """A worker failed; the whole query was cancelled."""

    def __init__(self, node_id: str, cause: BaseException):
        super().__init__(f"node {node_id!r} failed: {type(cause).__name__}: {cause}")
        self.node_id = node_id
        self.cause = cause


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    op: str
    params: dict = field(default_factory=dict)
    inputs: tuple[str, ...] = ()


@dataclass
class QueryGraph:
    nodes: dict[str, NodeSpec]
    edges: list[tuple[str, str, int]]
    output: str
    order: list[str]
    schemas: dict[str, EdfSchema]
    modes: dict[str, str]
    resolved: dict[str, str]

    @property
    def schema(self) -> EdfSchema:
        return self.schemas[self.output]

    def consumers(self, node_id: str) -> list[tuple[str, int]]:
        return [(c, slot) for p, c, slot in self.edges if p == node_id]

    def tables(self) -> set[str]:
        return {n.params["table"] for n in self.nodes.values() if n.op == "read"}


def _node_specs(spec: Mapping) -> list[NodeSpec]:
    raw_nodes = spec.get("nodes")
    if not raw_nodes:
        raise GraphError("query has no nodes")
    inputs: dict[str, list] = {}
    for n in raw_nodes:
        if "id" not in n or "op" not in n:
            raise GraphError(f"node needs 'id' and 'op': {n}")
        if n["id"] in inputs:
            raise GraphError(f"duplicate node id {n['id']!r}")
        inputs[n["id"]] = list(n.get("inputs", ()))
    for edge in spec.get("edges", ()):
        producer, consumer, slot = edge
        if consumer not in inputs:
            raise GraphError(f"edge into unknown node {consumer!r}")
        slots = inputs[consumer]
        slots.extend([None] * (slot + 1 - len(slots)))
        if slots[slot] is not None:
            raise GraphError(f"input {slot} of {consumer!r} bound twice")
        slots[slot] = producer
    out = []
    for n in raw_nodes:
        params = {k: v for k, v in n.items() if k not in ("id", "op", "inputs")}
        if None in inputs[n["id"]]:
            raise GraphError(f"node {n['id']!r} has an unbound input slot")
        out.append(NodeSpec(n["id"], n["op"], params, tuple(inputs[n["id"]])))
    return out


def build_graph(spec: Mapping, catalog: Mapping) -> QueryGraph:
    """Validate a query description and derive every node's schema.

    ``spec`` holds ``nodes`` (each with ``id``, ``op``, operator parameters
    and optional ``inputs``), optional ``edges`` as ``[producer, consumer,
    slot]`` and an optional ``output`` node id.  ``catalog`` maps table
    names to objects with a ``schema``.
    """
    nodes = {n.node_id: n for n in _node_specs(spec)}
    edges = []
    for n in nodes.values():
        if n.op not in ARITY:
            raise GraphError(f"node {n.node_id!r}: unknown operator {n.op!r}")
        if len(n.inputs) != ARITY[n.op]:
            raise GraphError(f"node {n.node_id!r}: {n.op} takes {ARITY[n.op]} input(s), got {len(n.inputs)}")
        for slot, producer in enumerate(n.inputs):
            if producer not in nodes:
                raise GraphError(f"node {n.node_id!r}: unknown input {producer!r}")
            edges.append((producer, n.node_id, slot))
    sorter = graphlib.TopologicalSorter({n.node_id: set(n.inputs) for n in nodes.values()})
    try:
        order = list(sorter.static_order())
    except graphlib.CycleError as exc:
        raise GraphError(f"query graph has a cycle: {exc.args[1]}") from None

    schemas, modes, resolved = {}, {}, {}
    for node_id in order:
        n = nodes[node_id]
        try:
            if n.op == "read":
                table = n.params.get("table")
                if table not in catalog:
                    raise GraphError(f"node {node_id!r}: unknown table {table!r}")
                schemas[node_id] = catalog[table].schema
                modes[node_id], resolved[node_id] = APPEND, "read"
                continue
            ins = [schemas[i] for i in n.inputs]
            schemas[node_id], resolved[node_id] = plan_operator(n.op, n.params, ins)
            modes[node_id] = output_mode(resolved[node_id], [modes[i] for i in n.inputs])
        except SchemaError as exc:
            raise SchemaError(f"node {node_id!r}: {exc}") from None
        except KeyError as exc:
            raise GraphError(f"node {node_id!r}: missing parameter {exc}") from None

    sinks = [i for i in nodes if not any(p == i for p, _, _ in edges)]
    output = spec.get("output")
    if output is None:
        if len(sinks) != 1:
            raise GraphError(f"graph has {len(sinks)} terminal nodes {sinks}; name one as 'output'")
        output = sinks[0]
    elif output not in nodes:
        raise GraphError(f"unknown output node {output!r}")
    return QueryGraph(nodes, edges, output, order, schemas, modes, resolved)


# --- snapshots --------------------------------------------------------------


@dataclass(frozen=True)
class SnapshotRecord:
    index: int
    progress: Progress
    wall_clock: float
    rows: RowBatch
    level: float = 0.95

    @property
    def t(self) -> float:
        return self.progress.t

    @property
    def is_final(self) -> bool:
        return self.progress.is_final

    def bounds(self, column: str) -> tuple[np.ndarray, np.ndarray] | None:
        """Per-row Chebyshev interval bounds of a column with a variance."""
        var = self.rows.variance.get(column)
        if var is None:
            return None
        values = self.rows[column].astype(float)
        half = chebyshev_k(1.0 - self.level) * np.sqrt(var)
        return values - half, values + half

    def interval(self, column: str, row: int) -> ConfidenceInterval | None:
        b = self.bounds(column)
        if b is None:
            return None
        return ConfidenceInterval(float(b[0][row]), float(b[1][row]), self.level)

    def same_values(self, other: "SnapshotRecord") -> bool:
        """Equal index, progress, rows and variances (timings ignored)."""
        if (self.index, self.progress) != (other.index, other.progress) or not self.rows.equals(other.rows):
            return False
        mine, theirs = self.rows.variance, other.rows.variance
        return mine.keys() == theirs.keys() and all(
            np.array_equal(mine[k], theirs[k], equal_nan=True) for k in mine
        )


class _Sink:
    def __init__(self, schema: EdfSchema, total: int, level: float, start: float, callback):
        self.state = IntrinsicState(schema, check_keys=False)
        self.state.push_version(RowBatch.empty(schema))
        self.total = total
        self.level = level
        self.start = start
        self.callback = callback
        self.records: list[SnapshotRecord] = []

    def _emit(self, progress: Progress):
        rec = SnapshotRecord(len(self.records), progress, time.perf_counter() - self.start,
                             self.state.latest_state(), self.level)
        self.records.append(rec)
        if self.callback:
            self.callback(rec)

    def feed(self, item):
        if item is EOF:
            if not self.records or not self.records[-1].is_final:
                self._emit(Progress(self.total, self.total))
            return
        if item.mode == REFRESH:
            self.state.push_version(item.payload)
        else:
            self.state.append_partial(item.payload)
        self._emit(item.progress)


# --- execution ---------------------------------------------------------------


@dataclass
class TraceLog:
    """Per-node activity intervals ``(node, start, end, partition)`` in seconds."""

    entries: list = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, node_id, start, end, partition):
        with self._lock:
            self.entries.append((node_id, start, end, partition))

    def lines(self, origin: float = 0.0) -> list[str]:
        return [f"{n}\t{(s - origin) * 1e3:.3f}\t{(e - origin) * 1e3:.3f}\t{p}" for n, s, e, p in self.entries]

    def overlapping_nodes(self) -> set[frozenset]:
        """Pairs of distinct nodes with intersecting activity intervals."""
        pairs = set()
        entries = sorted(self.entries, key=lambda e: e[1])
        for i, (n1, s1, e1, _) in enumerate(entries):
            for n2, s2, e2, _ in entries[i + 1 :]:
                if s2 >= e1:
                    break
                if n1 != n2:
                    pairs.add(frozenset((n1, n2)))
        return pairs


def _totals(graph: QueryGraph, bindings) -> dict[str, int]:
    totals = {}
    for node_id in graph.order:
        n = graph.nodes[node_id]
        kind = graph.resolved[node_id]
        if kind == "read":
            totals[node_id] = bindings[n.params["table"]].total_rows
        elif kind == "merge_join":
            totals[node_id] = sum(totals[i] for i in n.inputs)
        else:
            totals[node_id] = totals[n.inputs[0]]
    return totals


def _resolve_bindings(graph: QueryGraph, bindings: Mapping, orders: Mapping | None):
    missing = graph.tables() - set(bindings)
    if missing:
        raise GraphError(f"no data bound for tables {sorted(missing)}")
    orders = dict(orders or {})
    for table, order in orders.items():
        n = bindings[table].n_partitions if table in bindings else None
        if n is None or sorted(order) != list(range(n)):
            raise GraphError(f"partition order for {table!r} must be a permutation of 0..{(n or 0) - 1}")
    return {t: (bindings[t], orders.get(t)) for t in graph.tables()}


def _make_nodes(graph, totals, seed):
    nodes = {}
    for node_id in graph.order:
        n = graph.nodes[node_id]
        if n.op == "read":
            continue
        nodes[node_id] = make_node(
            node_id, n.op, n.params,
            [graph.schemas[i] for i in n.inputs], [graph.modes[i] for i in n.inputs],
            [totals[i] for i in n.inputs], seed,
        )
    return nodes


def _reader_messages(meta, order, node_id, trace: TraceLog | None):
    it = iter_partitions(meta, order)
    while True:
        start = time.perf_counter()
        try:
            index, batch, progress = next(it)
        except StopIteration:
            return
        if trace:
            trace.record(node_id, start, time.perf_counter(), index)
        yield Message(batch, progress, index, APPEND)


def run_sequential(graph: QueryGraph, bindings: Mapping, orders: Mapping | None = None, *,
                   seed: int = 0, ci_level: float = 0.95, sink: Callable | None = None,
                   trace: TraceLog | None = None) -> list[SnapshotRecord]:
    """Execute on the calling thread, node by node in topological order."""
    tables = _resolve_bindings(graph, bindings, orders)
    totals = _totals(graph, bindings)
    nodes = _make_nodes(graph, totals, seed)
    start = time.perf_counter()
    outputs: dict[str, list] = {}
    for node_id in graph.order:
        n = graph.nodes[node_id]
        if n.op == "read":
            meta, order = tables[n.params["table"]]
            outputs[node_id] = list(_reader_messages(meta, order, node_id, trace)) + [EOF]
            continue
        runner = NodeRunner(nodes[node_id], trace.record if trace else None)
        out = []
        for slot, producer in enumerate(n.inputs):
            for item in outputs[producer]:
                out.extend(runner.feed(slot, item))
        outputs[node_id] = out
    result = _Sink(graph.schema, totals[graph.output], ci_level, start, sink)
    for item in outputs[graph.output]:
        result.feed(item)
    return result.records


class _Cancelled(Exception):
    pass


def run(graph: QueryGraph, bindings: Mapping, orders: Mapping | None = None, *, seed: int = 0,
        ci_level: float = 0.95, sink: Callable | None = None, trace: TraceLog | None = None,
        capacity: int = CHANNEL_CAPACITY) -> list[SnapshotRecord]:
    """Pipelined execution with one thread per node and bounded channels.

    ``bindings`` maps table names to table metadata; ``orders`` optionally
    maps table names to partition orders.  ``sink`` is called with each
    snapshot as it is produced.  Returns all snapshots.
    """
    tables = _resolve_bindings(graph, bindings, orders)
    totals = _totals(graph, bindings)
    nodes = _make_nodes(graph, totals, seed)
    inbox = {i: queue.Queue(maxsize=capacity) for i in graph.nodes}
    sink_inbox: queue.Queue = queue.Queue(maxsize=capacity)
    abort = threading.Event()
    failures: list[tuple[str, BaseException]] = []
    start = time.perf_counter()
    result = _Sink(graph.schema, totals[graph.output], ci_level, start, sink)

    def put(q, item):
        while True:
            if abort.is_set():
                raise _Cancelled
            try:
                q.put(item, timeout=_POLL)
                return
            except queue.Full:
                continue

    def get(q):
        while True:
            if abort.is_set():
                raise _Cancelled
            try:
                return q.get(timeout=_POLL)
            except queue.Empty:
                continue

    def send(node_id, items):
        for item in items:
            for consumer, slot in graph.consumers(node_id):
                put(inbox[consumer], (slot, item))
            if node_id == graph.output:
                put(sink_inbox, item)

    def guarded(node_id, body):
        def target():
            try:
                body()
            except _Cancelled:
                pass
            except BaseException as exc:  # noqa: BLE001 - reported via QueryAborted
                failures.append((node_id, exc))
                abort.set()
        return target

    def reader(node_id):
        meta, order = tables[graph.nodes[node_id].params["table"]]
        for msg in _reader_messages(meta, order, node_id, trace):
            send(node_id, [msg])
        send(node_id, [EOF])

    def worker(node_id):
        runner = NodeRunner(nodes[node_id], trace.record if trace else None)
        while not runner.done:
            slot, item = get(inbox[node_id])
            send(node_id, runner.feed(slot, item))

    def drain():
        while True:
            item = get(sink_inbox)
            result.feed(item)
            if item is EOF:
                return

    threads = []
    for node_id in graph.order:
        body = (lambda i=node_id: reader(i)) if graph.nodes[node_id].op == "read" else (lambda i=node_id: worker(i))
        threads.append(threading.Thread(target=guarded(node_id, body), name=f"node-{node_id}", daemon=True))
    threads.append(threading.Thread(target=guarded("<sink>", drain), name="sink", daemon=True))
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if failures:
        node_id, exc = failures[0]
        raise QueryAborted(node_id, exc) from exc
    return result.records


def bind_tables(metas: Sequence) -> dict:
    """``{meta.name: meta}`` for a list of table metadata."""
    return {m.name: m for m in metas}
