"""Stateful operator nodes and the per-node input scheduling.

A node consumes :class:`Message` objects on numbered input slots and emits
messages downstream.  ``mode`` tells a consumer how to apply a payload:
``append`` payloads are new key-disjoint partials, ``refresh`` payloads
replace the whole previous state.

:class:`NodeRunner` decides which buffered input a node processes next.  The
decision depends only on the per-slot message sequences, never on arrival
timing, so threaded and sequential execution produce identical outputs.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..edf import EdfSchema, IntrinsicState, Progress, RowBatch, SchemaError
from ..inference import GrowthModel
from .aggregate import AggSpec, AggState, merge_agg, output_schema, to_extrinsic
from .functions import Predicate
from .relational import (
    ColumnMap,
    HashTable,
    JoinSpec,
    MergeJoinState,
    hash_join,
    join_schema,
    merge_join_batches,
    parse_order,
    sort_limit,
)

APPEND = "append"
REFRESH = "refresh"


class _Eof:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "EOF"


EOF = _Eof()


@dataclass(frozen=True)
class Message:
    payload: RowBatch
    progress: Progress
    partition: int = -1
    mode: str = APPEND


class Node:
    arity = 1
    policy = "fifo"

    def __init__(self, node_id: str, schema: EdfSchema, mode: str):
        self.node_id = node_id
        self.schema = schema
        self.mode = mode

    def on_message(self, slot: int, msg: Message) -> list[Message]:
        raise NotImplementedError

    def on_eof(self, slot: int) -> list[Message]:
        return []


class _Accumulator:
    """Latest full content of an input, fed by append or refresh messages."""

    def __init__(self, schema: EdfSchema):
        self.state = IntrinsicState(schema, check_keys=False)
        self.state.push_version(RowBatch.empty(schema))

    def update(self, msg: Message) -> RowBatch:
        if msg.mode == REFRESH:
            self.state.push_version(msg.payload)
        else:
            self.state.append_partial(msg.payload)
        return self.state.latest_state()


class MapNode(Node):
    def __init__(self, node_id, schema, mode, fn: ColumnMap):
        super().__init__(node_id, schema, mode)
        self.fn = fn

    def on_message(self, slot, msg):
        return [Message(self.fn(msg.payload, self.schema), msg.progress, msg.partition, msg.mode)]


class FilterNode(Node):
    def __init__(self, node_id, schema, mode, predicate: Predicate):
        super().__init__(node_id, schema, mode)
        self.predicate = predicate

    def on_message(self, slot, msg):
        out = msg.payload.mask(self.predicate.mask(msg.payload))
        return [Message(out, msg.progress, msg.partition, msg.mode)]


class HashJoinNode(Node):
    """Slot 0 probes, slot 1 builds; probe input is held until the build EOF."""

    arity = 2
    policy = "build_first"

    def __init__(self, node_id, schema, mode, spec: JoinSpec, build_schema: EdfSchema):
        super().__init__(node_id, schema, mode)
        self.spec = spec
        self.build = _Accumulator(build_schema)
        self.table: HashTable | None = None

    def on_message(self, slot, msg):
        if slot == 1:
            self.build.update(msg)
            return []
        if self.table is None:
            raise RuntimeError("hash join probed before its build side finished")
        out = hash_join(msg.payload, self.table, self.spec, self.schema)
        return [Message(out, msg.progress, msg.partition, msg.mode)]

    def on_eof(self, slot):
        if slot == 1:
            self.table = HashTable(self.build.state.latest_state(), self.spec.build_keys)
        return []


class MergeJoinNode(Node):
    """Join of two inputs clustered on the join key.

    Append inputs stream through :class:`MergeJoinState`.  If either input
    refreshes, every message recomputes the join of both full states.
    Output progress is the combined progress of both inputs.
    """

    arity = 2
    policy = "by_progress"

    def __init__(self, node_id, schema, mode, spec: JoinSpec, input_schemas, input_modes, totals):
        super().__init__(node_id, schema, mode)
        self.spec = spec
        self.streaming = all(m == APPEND for m in input_modes)
        self.stream = MergeJoinState(spec, schema)
        self.inputs = [_Accumulator(s) for s in input_schemas]
        self.progress = [Progress(0, total) for total in totals]

    def on_message(self, slot, msg):
        self.progress[slot] = msg.progress
        progress = self.progress[0] + self.progress[1]
        if self.streaming:
            return [Message(self.stream.push(slot, msg.payload), progress, msg.partition, APPEND)]
        self.inputs[slot].update(msg)
        left, right = (acc.state.latest_state() for acc in self.inputs)
        out = merge_join_batches(left, right, self.spec, self.schema)
        return [Message(out, progress, msg.partition, REFRESH)]


class AggNode(Node):
    """Group-by aggregation with growth-based inference.

    Grouping by a superset of the input clustering key yields exact (if
    growing) groups, so inference is skipped.
    """

    def __init__(self, node_id, schema, by, specs, infer: bool, seed: int = 0):
        super().__init__(node_id, schema, REFRESH)
        self.by = tuple(by)
        self.specs = tuple(specs)
        self.infer = infer
        self.seed = seed
        self.growth = GrowthModel()
        self.acc: AggState | None = None
        self.tick = 0

    def on_message(self, slot, msg):
        delta = AggState.from_batch(msg.payload, self.by, self.specs, partial_id=self.tick)
        if msg.mode == REFRESH or self.acc is None:
            self.acc = delta
        else:
            self.acc = merge_agg(self.acc, delta)
        t = msg.progress.t
        G = self.acc.n_groups
        if self.infer and G and t > 0:
            self.growth.observe(t, float(self.acc.count.sum()) / G)
        w, var_w = self.growth.fit_power() if self.growth.n_obs else (1.0, float("inf"))
        rng = np.random.default_rng([self.seed, self.tick])
        self.tick += 1
        out = to_extrinsic(self.acc, self.schema, t if t > 0 else 1.0, w, var_w, self.infer, rng)
        return [Message(out, msg.progress, msg.partition, REFRESH)]


class SortLimitNode(Node):
    def __init__(self, node_id, schema, order, limit, input_schema):
        super().__init__(node_id, schema, REFRESH)
        self.order = tuple(order)
        self.limit = limit
        self.input = _Accumulator(input_schema)

    def on_message(self, slot, msg):
        full = self.input.update(msg)
        return [Message(sort_limit(full, self.order, self.limit), msg.progress, msg.partition, REFRESH)]


# --- scheduling -------------------------------------------------------------

TraceFn = Callable[[str, float, float, int], None]


class NodeRunner:
    """Feeds a node from per-slot queues under its deterministic input policy.

    ``fifo``: the single input in arrival order.
    ``build_first``: drain slot 1 to EOF, then process slot 0.
    ``by_progress``: once both heads are known, the lower-progress head goes
    first (ties to slot 0); an exhausted side lets the other run freely.
    """

    def __init__(self, node: Node, trace: TraceFn | None = None, clock=time.perf_counter):
        self.node = node
        self.pending = [deque() for _ in range(node.arity)]
        self.eof = [False] * node.arity
        self.done = False
        self.trace = trace
        self.clock = clock

    def feed(self, slot: int, item) -> list:
        if self.done or self.eof[slot]:
            raise RuntimeError(f"{self.node.node_id}: input {slot} received data after EOF")
        self.pending[slot].append(item)
        out = []
        while (choice := self._next()) is not None:
            item = self.pending[choice].popleft()
            if item is EOF:
                self.eof[choice] = True
                out.extend(self.node.on_eof(choice))
            else:
                start = self.clock()
                out.extend(self.node.on_message(choice, item))
                if self.trace:
                    self.trace(self.node.node_id, start, self.clock(), item.partition)
        if all(self.eof) and not self.done:
            self.done = True
            out.append(EOF)
        return out

    def _next(self) -> int | None:
        pending = self.pending
        policy = self.node.policy
        if policy == "fifo":
            return 0 if pending[0] else None
        if policy == "build_first":
            if pending[1]:
                return 1
            return 0 if pending[0] and self.eof[1] else None
        # by_progress
        if not pending[0] and not pending[1]:
            return None
        for side in (0, 1):
            if not pending[1 - side]:
                return side if pending[side] and self.eof[1 - side] else None
        return 0 if _rank(pending[0][0]) <= _rank(pending[1][0]) else 1


def _rank(item):
    return float("inf") if item is EOF else item.progress.fraction


# --- construction -----------------------------------------------------------


def output_mode(op: str, input_modes: Sequence[str]) -> str:
    if op == "read":
        return APPEND
    if op in ("map", "filter"):
        return input_modes[0]
    if op == "hash_join":
        return input_modes[0]
    if op == "merge_join":
        return APPEND if all(m == APPEND for m in input_modes) else REFRESH
    if op in ("agg", "sort_limit"):
        return REFRESH
    raise ValueError(f"unknown operator {op!r}")


def make_node(node_id: str, op: str, params: dict, input_schemas: Sequence[EdfSchema],
              input_modes: Sequence[str], totals: Sequence[int] = (), seed: int = 0) -> Node:
    """Instantiate the runtime node for an operator (readers excluded)."""
    if op in ("hash_join", "merge_join"):
        params = {**params, "method": op.split("_")[0]}
    schema, resolved = plan_operator(op, params, input_schemas)
    mode = output_mode(resolved, input_modes)
    if resolved == "map":
        return MapNode(node_id, schema, mode, ColumnMap.parse(params))
    if resolved == "filter":
        return FilterNode(node_id, schema, mode, Predicate.parse(params["predicate"]))
    if resolved == "hash_join":
        spec = JoinSpec.parse(params).resolve(*input_schemas)
        return HashJoinNode(node_id, schema, mode, spec, input_schemas[1])
    if resolved == "merge_join":
        spec = JoinSpec.parse(params).resolve(*input_schemas)
        return MergeJoinNode(node_id, schema, mode, spec, input_schemas, input_modes, totals)
    if resolved == "agg":
        by = tuple(params.get("by", ()))
        specs = tuple(AggSpec.parse(a) for a in params["aggs"])
        ck = input_schemas[0].clustering_key
        infer = not (ck and set(ck) <= set(by))
        return AggNode(node_id, schema, by, specs, infer, seed)
    if resolved == "sort_limit":
        return SortLimitNode(node_id, schema, parse_order(params["order"]), params.get("limit"), input_schemas[0])
    raise ValueError(f"unknown operator {op!r}")


def plan_operator(op: str, params: dict, input_schemas: Sequence[EdfSchema]) -> tuple[EdfSchema, str]:
    """Static output schema and the concrete operator (joins resolve their method)."""
    if op == "map":
        return ColumnMap.parse(params).output_schema(input_schemas[0]), op
    if op == "filter":
        pred = Predicate.parse(params["predicate"])
        for col in pred.columns:
            input_schemas[0].attr(col)
        return input_schemas[0], op
    if op in ("join", "hash_join", "merge_join"):
        if op != "join":
            params = {**params, "method": op.split("_")[0]}
        spec = JoinSpec.parse(params).resolve(*input_schemas)
        if spec.method == "merge" and spec.how != "inner":
            raise SchemaError("merge join supports inner joins only")
        return join_schema(*input_schemas, spec), f"{spec.method}_join"
    if op == "agg":
        if "aggs" not in params or not params["aggs"]:
            raise SchemaError("agg needs a non-empty 'aggs' list")
        specs = [AggSpec.parse(a) for a in params["aggs"]]
        return output_schema(input_schemas[0], params.get("by", ()), specs), op
    if op == "sort_limit":
        order = parse_order(params["order"])
        for col, _ in order:
            input_schemas[0].attr(col)
        limit = params.get("limit")
        if limit is not None and (not isinstance(limit, int) or limit < 0):
            raise SchemaError("limit must be a non-negative integer")
        return input_schemas[0], op
    raise SchemaError(f"unknown operator {op!r}")
