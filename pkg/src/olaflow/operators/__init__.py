"""Relational operators over evolving data frames."""

from .aggregate import AggSpec, AggState, AggregateError, merge_agg, to_extrinsic
from .functions import FUNCTIONS, Predicate
from .nodes import APPEND, EOF, REFRESH, Message, NodeRunner, make_node
from .relational import (
    BatchMap,
    ColumnMap,
    JoinOrderError,
    JoinSpec,
    MergeJoinState,
    OperatorClass,
    apply_filter,
    apply_map,
    classify,
    hash_join,
    key_rules,
    merge_join,
    merge_join_batches,
    sort_limit,
)

__all__ = [
    "APPEND",
    "EOF",
    "FUNCTIONS",
    "REFRESH",
    "AggSpec",
    "AggState",
    "AggregateError",
    "BatchMap",
    "ColumnMap",
    "JoinOrderError",
    "JoinSpec",
    "MergeJoinState",
    "Message",
    "NodeRunner",
    "OperatorClass",
    "Predicate",
    "apply_filter",
    "apply_map",
    "classify",
    "hash_join",
    "key_rules",
    "make_node",
    "merge_agg",
    "merge_join",
    "merge_join_batches",
    "sort_limit",
    "to_extrinsic",
]
