"""CSV + schema ingestion into a heterogeneous temporal graph.

Tables become typed nodes (one per row), non-null foreign-key cells become
bidirectional typed edges. Timestamps are normalized to integer epoch
seconds; rows of non-target tables without a timestamp get -inf so they stay
reachable but always count as "in the past".
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

logger = logging.getLogger(__name__)

COLUMN_KINDS = {"numerical", "categorical", "timestamp", "primary_key", "foreign_key"}

# timestamp sentinel for rows without one (non-target tables only)
NO_TIMESTAMP = -math.inf


class SchemaError(ValueError):
    pass


class TableDataError(ValueError):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    target_table: str | None = None


@dataclass(frozen=True)
class TaskSpec:
    target_table: str
    target_column: str
    kind: str
    seed_time_column: str


@dataclass
class DatabaseSchema:
    tables: list[tuple[str, list[ColumnSpec]]]
    task: TaskSpec

    def table(self, name: str) -> list[ColumnSpec]:
        for tname, cols in self.tables:
            if tname == name:
                return cols
        raise KeyError(name)

    def table_names(self) -> list[str]:
        return [t for t, _ in self.tables]


def load_schema(path: str) -> DatabaseSchema:
    """Parse and validate the schema.json manifest."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot parse schema {path}: {exc}") from exc

    tables: list[tuple[str, list[ColumnSpec]]] = []
    names: set[str] = set()
    for t in raw.get("tables", []):
        name = t["name"]
        if name in names:
            raise SchemaError(f"duplicate table name {name!r}")
        names.add(name)
        cols = [ColumnSpec(c["name"], c["kind"], c.get("target_table")) for c in t["columns"]]
        for c in cols:
            if c.kind not in COLUMN_KINDS:
                raise SchemaError(f"unknown column kind {c.kind!r} in table {name!r}")
        pks = [c for c in cols if c.kind == "primary_key"]
        if len(pks) != 1:
            raise SchemaError(f"table {name!r} must have exactly one primary_key, found {len(pks)}")
        tables.append((name, cols))

    for name, cols in tables:
        for c in cols:
            if c.kind == "foreign_key" and c.target_table not in names:
                raise SchemaError(
                    f"unresolved foreign key: {name}.{c.name} -> {c.target_table!r}")

    task_raw = raw["task"]
    task = TaskSpec(task_raw["target_table"], task_raw["target_column"],
                    task_raw["kind"], task_raw["seed_time_column"])
    if task.target_table not in names:
        raise SchemaError(f"task target_table {task.target_table!r} unknown")
    target_cols = {c.name for c in dict(tables)[task.target_table]}
    if task.target_column not in target_cols:
        raise SchemaError(f"task target_column {task.target_column!r} missing "
                          f"from table {task.target_table!r}")
    if task.kind not in ("binary_classification", "regression"):
        raise SchemaError(f"unknown task kind {task.kind!r}")
    return DatabaseSchema(tables=tables, task=task)


def _parse_timestamp(text: str) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text)
    except ValueError as exc:
        raise TableDataError(f"unparseable timestamp {text!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


@dataclass
class TableColumns:
    """Typed column storage for one table."""
    n_rows: int
    pk: list[str]
    pk_index: dict[str, int]
    numerical: dict[str, np.ndarray]          # float64, NaN = missing
    categorical: dict[str, np.ndarray]        # int64 dense ids, -1 = missing
    categorical_vocab: dict[str, list[str]]   # first-seen interning order
    timestamps: dict[str, np.ndarray]         # float64 epoch seconds (-inf = missing)
    foreign: dict[str, list[str | None]]      # raw FK values, None = null cell


@dataclass
class TableData:
    tables: dict[str, TableColumns]


def load_tables(schema: DatabaseSchema, directory: str) -> TableData:
    """Read one <table>.csv per schema table and type every column."""
    out: dict[str, TableColumns] = {}
    for tname, cols in schema.tables:
        path = os.path.join(directory, f"{tname}.csv")
        if not os.path.exists(path):
            raise TableDataError(f"missing table file {path}")
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise TableDataError(f"{path} is empty")
            expected = [c.name for c in cols]
            if header != expected:
                raise TableDataError(
                    f"{path} header mismatch: got {header}, expected {expected}")
            rows = list(reader)

        n = len(rows)
        tc = TableColumns(n_rows=n, pk=[], pk_index={}, numerical={}, categorical={},
                          categorical_vocab={}, timestamps={}, foreign={})
        for j, c in enumerate(cols):
            raw = [r[j] for r in rows]
            if c.kind == "primary_key":
                for i, v in enumerate(raw):
                    if v in tc.pk_index:
                        raise TableDataError(
                            f"duplicate primary key {v!r} in table {tname!r}")
                    tc.pk_index[v] = i
                tc.pk = raw
            elif c.kind == "numerical":
                vals = np.full(n, np.nan)
                for i, v in enumerate(raw):
                    if v.strip():
                        vals[i] = float(v)
                tc.numerical[c.name] = vals
            elif c.kind == "categorical":
                vocab: list[str] = []
                interned: dict[str, int] = {}
                ids = np.full(n, -1, dtype=np.int64)
                for i, v in enumerate(raw):
                    if not v.strip():
                        continue
                    if v not in interned:
                        interned[v] = len(vocab)
                        vocab.append(v)
                    ids[i] = interned[v]
                tc.categorical[c.name] = ids
                tc.categorical_vocab[c.name] = vocab
            elif c.kind == "timestamp":
                ts = np.full(n, NO_TIMESTAMP)
                for i, v in enumerate(raw):
                    if v.strip():
                        ts[i] = _parse_timestamp(v)
                tc.timestamps[c.name] = ts
            elif c.kind == "foreign_key":
                tc.foreign[c.name] = [v if v.strip() else None for v in raw]
        out[tname] = tc
    return TableData(tables=out)


@dataclass
class RelGraph:
    """Immutable heterogeneous temporal graph over table rows."""
    n_nodes: int
    node_type: np.ndarray                 # int type id per node
    node_time: np.ndarray                 # float64 epoch seconds (-inf allowed)
    node_table: list[str]                 # table name per type id
    node_row: np.ndarray                  # row index within source table
    node_offset: dict[str, int]           # table -> first global node id
    edge_types: list[str]                 # paired: fwd at 2k, rev at 2k+1
    adjacency: dict[str, list[list[int]]]  # edge type -> per-node sorted neighbor ids
    merged_adjacency: list[list[int]]     # all edge types union, sorted
    dangling_fk_count: int = 0

    def node_id(self, table: str, row: int) -> int:
        return self.node_offset[table] + row


def reverse_edge_type(edge_type: str) -> str:
    return edge_type[:-4] if edge_type.endswith("_rev") else edge_type + "_rev"


def build_graph(schema: DatabaseSchema, tables: TableData) -> RelGraph:
    """One node per row, one bidirectional typed edge per non-null FK cell."""
    task = schema.task
    offsets: dict[str, int] = {}
    node_table: list[str] = []
    total = 0
    for tname, _ in schema.tables:
        offsets[tname] = total
        node_table.append(tname)
        total += tables.tables[tname].n_rows

    node_type = np.zeros(total, dtype=np.int64)
    node_time = np.full(total, NO_TIMESTAMP)
    node_row = np.zeros(total, dtype=np.int64)
    for type_id, (tname, cols) in enumerate(schema.tables):
        tc = tables.tables[tname]
        lo = offsets[tname]
        node_type[lo:lo + tc.n_rows] = type_id
        node_row[lo:lo + tc.n_rows] = np.arange(tc.n_rows)
        ts_cols = [c.name for c in cols if c.kind == "timestamp"]
        if ts_cols:
            # the first timestamp column is the node's tau
            node_time[lo:lo + tc.n_rows] = tc.timestamps[ts_cols[0]]
        if tname == task.target_table:
            seed_ts = tc.timestamps.get(task.seed_time_column)
            if seed_ts is None:
                raise SchemaError(
                    f"seed_time_column {task.seed_time_column!r} missing in target table")
            if np.any(~np.isfinite(seed_ts)):
                raise TableDataError("target-table row lacks a seed timestamp")
            node_time[lo:lo + tc.n_rows] = seed_ts

    edge_types: list[str] = []
    adjacency: dict[str, list[list[int]]] = {}
    merged: list[list[int]] = [[] for _ in range(total)]
    dangling = 0
    for tname, cols in schema.tables:
        tc = tables.tables[tname]
        for c in cols:
            if c.kind != "foreign_key":
                continue
            fwd = f"{tname}.{c.name}"
            rev = reverse_edge_type(fwd)
            edge_types.extend([fwd, rev])
            adj_f: list[list[int]] = [[] for _ in range(total)]
            adj_r: list[list[int]] = [[] for _ in range(total)]
            target_tc = tables.tables[c.target_table]
            src_lo = offsets[tname]
            dst_lo = offsets[c.target_table]
            for i, v in enumerate(tc.foreign[c.name]):
                if v is None:
                    continue
                j = target_tc.pk_index.get(v)
                if j is None:
                    dangling += 1
                    continue
                u, w = src_lo + i, dst_lo + j
                adj_f[u].append(w)
                adj_r[w].append(u)
                merged[u].append(w)
                merged[w].append(u)
            adjacency[fwd] = [sorted(x) for x in adj_f]
            adjacency[rev] = [sorted(x) for x in adj_r]
    if dangling:
        logger.warning("dropped %d dangling foreign-key edges", dangling)
    merged = [sorted(set(x)) for x in merged]
    return RelGraph(n_nodes=total, node_type=node_type, node_time=node_time,
                    node_table=node_table, node_row=node_row, node_offset=offsets,
                    edge_types=edge_types, adjacency=adjacency,
                    merged_adjacency=merged, dangling_fk_count=dangling)


def neighbors(graph: RelGraph, node: int, edge_type: str) -> list[int]:
    if edge_type not in graph.adjacency:
        raise KeyError(f"unknown edge type {edge_type!r}")
    return graph.adjacency[edge_type][node]
