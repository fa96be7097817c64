"""Accuracy of a snapshot stream against the exact final answer."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence


class ScoreError(ValueError):
    """The estimate and exact streams cannot be compared."""


@dataclass(frozen=True)
class AccuracyReport:
    index: int
    t: float
    wall_ms: float
    mape: float | None
    mae: float | None
    recall: float
    precision: float
    cells: int
    zero_cells: int

    def to_dict(self) -> dict:
        return asdict(self)


def _numeric(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def score_rows(
    rows: Sequence[Mapping],
    exact: Sequence[Mapping],
    primary_key: Sequence[str],
    *,
    index: int = 0,
    t: float = 1.0,
    wall_ms: float = 0.0,
) -> AccuracyReport:
    """Compare estimated rows with exact rows, matching groups by primary key.

    MAPE skips cells whose true value is 0 (they are counted in
    ``zero_cells``); MAE covers every matched numeric cell.  Recall and
    precision are fractions; both are 1 when the respective denominator is 0.
    """
    pk = list(primary_key)
    truth = {tuple(r[c] for c in pk): r for r in exact}
    emitted = {tuple(r[c] for c in pk): r for r in rows}
    if exact and rows and set(exact[0]) != set(rows[0]):
        raise ScoreError(f"column mismatch: {sorted(rows[0])} vs {sorted(exact[0])}")
    matched = [k for k in emitted if k in truth]
    abs_err, pct_err, zero = [], [], 0
    for k in matched:
        est, true = emitted[k], truth[k]
        for col, tv in true.items():
            if col in pk or not _numeric(tv):
                continue
            ev = est[col]
            if ev is None or not math.isfinite(ev) or not math.isfinite(tv):
                continue
            err = abs(ev - tv)
            abs_err.append(err)
            if tv == 0:
                zero += 1
            else:
                pct_err.append(err / abs(tv))
    return AccuracyReport(
        index=index,
        t=t,
        wall_ms=wall_ms,
        mape=math.fsum(pct_err) / len(pct_err) if pct_err else None,
        mae=math.fsum(abs_err) / len(abs_err) if abs_err else None,
        recall=len(matched) / len(truth) if truth else 1.0,
        precision=len(matched) / len(emitted) if emitted else 1.0,
        cells=len(abs_err),
        zero_cells=zero,
    )


def score_stream(snapshots: Iterable[Mapping], exact: Mapping) -> list[AccuracyReport]:
    """Score JSON-style snapshot records (see :mod:`olaflow.cli`) against an exact result."""
    out = []
    for snap in snapshots:
        if list(snap["primary_key"]) != list(exact["primary_key"]):
            raise ScoreError(f"primary key mismatch: {snap['primary_key']} vs {exact['primary_key']}")
        out.append(score_rows(snap["rows"], exact["rows"], exact["primary_key"],
                              index=snap["index"], t=snap["t"], wall_ms=snap.get("wall_ms", 0.0)))
    return out
