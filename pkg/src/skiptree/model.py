"""Relational model: schemas, dictionary-encoded datasets, predicates, queries.

Every attribute value is a dictionary-encoded non-negative integer; a column
declares a domain size D and all of its values lie in [0, D).  Queries are
and/or trees whose leaves are unary predicates or references to registered
column-vs-column ("advanced") cuts.  Negation is permitted only on those
references; a general NOT node is rejected at parse time.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Union

import numpy as np

NUMERIC = "numeric"
CATEGORICAL = "categorical"

RANGE_OPS = ("<", "<=", ">", ">=")
EQUALITY_OPS = ("=", "in")
ADVANCED_OPS = ("<", "<=", ">", ">=", "=")


class ParseError(ValueError):
    """Malformed schema / dataset / workload / tree input."""


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    domain_size: int

    def __post_init__(self) -> None:
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise ValueError(f"unknown column kind {self.kind!r}")
        if self.domain_size < 1:
            raise ValueError(f"column {self.name!r}: domain_size must be >= 1")


@dataclass(frozen=True)
class Schema:
    columns: tuple[Column, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "columns", tuple(self.columns))
        if not self.columns:
            raise ValueError("schema needs at least one column")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names")

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    @cached_property
    def numeric_pos(self) -> dict[int, int]:
        """Column index -> slot among numeric columns (range order)."""
        return {i: p for p, i in enumerate(self.numeric_indices)}

    @cached_property
    def categorical_pos(self) -> dict[int, int]:
        return {i: p for p, i in enumerate(self.categorical_indices)}

    @cached_property
    def numeric_indices(self) -> tuple[int, ...]:
        return tuple(i for i, c in enumerate(self.columns) if c.kind == NUMERIC)

    @cached_property
    def categorical_indices(self) -> tuple[int, ...]:
        return tuple(i for i, c in enumerate(self.columns) if c.kind == CATEGORICAL)

    def index_of(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise KeyError(name)


@dataclass(frozen=True)
class Dataset:
    """Integer table; rows is an immutable (n, n_columns) int64 array."""

    schema: Schema
    rows: np.ndarray

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=np.int64)
        if rows.ndim != 2 or rows.shape[1] != self.schema.n_columns:
            raise ValueError("rows must be a 2-d array matching the schema width")
        for j, col in enumerate(self.schema.columns):
            if rows.size and (rows[:, j].min() < 0 or rows[:, j].max() >= col.domain_size):
                raise ValueError(f"column {col.name!r}: value outside [0, {col.domain_size})")
        rows = rows.copy()
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    def take(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.schema, self.rows[np.asarray(idx, dtype=np.intp)])


@dataclass(frozen=True)
class UnaryPredicate:
    """Single-column filter: a range comparison or a membership test.

    Range ops apply to numeric columns only; "=" and "in" apply to
    categorical columns only.  A one-element "in" set canonicalizes to "=".
    """

    col: int
    op: str
    literal: Union[int, frozenset]

    def __post_init__(self) -> None:
        if self.op in RANGE_OPS or self.op == "=":
            object.__setattr__(self, "literal", int(self.literal))
        elif self.op == "in":
            values = frozenset(int(v) for v in self.literal)
            if not values:
                raise ValueError("empty IN set")
            if len(values) == 1:
                object.__setattr__(self, "op", "=")
                object.__setattr__(self, "literal", next(iter(values)))
            else:
                object.__setattr__(self, "literal", values)
        else:
            raise ValueError(f"unknown predicate op {self.op!r}")

    def validate(self, schema: Schema) -> None:
        if not 0 <= self.col < schema.n_columns:
            raise ValueError(f"predicate column {self.col} out of range")
        column = schema.columns[self.col]
        if self.op in RANGE_OPS:
            if column.kind != NUMERIC:
                raise ValueError(f"range op {self.op!r} on categorical column {column.name!r}")
            if not 0 <= self.literal < column.domain_size:
                raise ValueError(f"literal {self.literal} outside domain of {column.name!r}")
        else:
            if column.kind != CATEGORICAL:
                raise ValueError(f"op {self.op!r} on numeric column {column.name!r}")
            for v in self.value_set():
                if not 0 <= v < column.domain_size:
                    raise ValueError(f"value {v} outside domain of {column.name!r}")

    def satisfying_interval(self, schema: Schema) -> tuple[int, int]:
        """Half-open [lo, hi) of satisfying values for a range predicate."""
        dom = schema.columns[self.col].domain_size
        lit = self.literal
        if self.op == "<":
            return (0, lit)
        if self.op == "<=":
            return (0, lit + 1)
        if self.op == ">":
            return (lit + 1, dom)
        if self.op == ">=":
            return (lit, dom)
        raise ValueError(f"{self.op!r} is not a range op")

    def value_set(self) -> frozenset:
        if self.op == "=":
            return frozenset((self.literal,))
        if self.op == "in":
            return self.literal
        raise ValueError(f"{self.op!r} is not a membership op")

    def matches(self, rows: np.ndarray) -> np.ndarray:
        """Vectorized evaluation over an (n, n_columns) array."""
        vals = rows[:, self.col]
        if self.op == "<":
            return vals < self.literal
        if self.op == "<=":
            return vals <= self.literal
        if self.op == ">":
            return vals > self.literal
        if self.op == ">=":
            return vals >= self.literal
        if self.op == "=":
            return vals == self.literal
        return np.isin(vals, sorted(self.literal))


@dataclass(frozen=True)
class AdvancedCut:
    """Registered column-vs-column predicate, e.g. col 0 < col 2.

    index is the position in the registry and names one bit of every node
    description.  Equality across differently encoded categorical columns is
    the caller's responsibility.
    """

    index: int
    left: int
    op: str
    right: int

    def __post_init__(self) -> None:
        if self.op not in ADVANCED_OPS:
            raise ValueError(f"unknown advanced op {self.op!r}")
        if self.left == self.right:
            raise ValueError("advanced cut must reference two distinct columns")

    def validate(self, schema: Schema) -> None:
        for c in (self.left, self.right):
            if not 0 <= c < schema.n_columns:
                raise ValueError(f"advanced cut column {c} out of range")

    def matches(self, rows: np.ndarray) -> np.ndarray:
        a, b = rows[:, self.left], rows[:, self.right]
        if self.op == "<":
            return a < b
        if self.op == "<=":
            return a <= b
        if self.op == ">":
            return a > b
        if self.op == ">=":
            return a >= b
        return a == b


Cut = Union[UnaryPredicate, AdvancedCut]


# --- query expression trees ---------------------------------------------

@dataclass(frozen=True)
class Pred:
    pred: UnaryPredicate


@dataclass(frozen=True)
class AdvRef:
    """Reference to registry entry `index`, optionally negated."""

    index: int
    negated: bool = False


@dataclass(frozen=True)
class And:
    children: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True)
class Or:
    children: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "children", tuple(self.children))


Expr = Union[Pred, AdvRef, And, Or]


@dataclass(frozen=True)
class Query:
    expr: Expr

    def validate(self, schema: Schema, n_advanced: int) -> None:
        def walk(e: Expr) -> None:
            if isinstance(e, Pred):
                e.pred.validate(schema)
            elif isinstance(e, AdvRef):
                if not 0 <= e.index < n_advanced:
                    raise ValueError(f"advanced reference {e.index} not registered")
            elif isinstance(e, (And, Or)):
                if len(e.children) < 2:
                    raise ValueError("and/or needs at least two children")
                for c in e.children:
                    walk(c)
            else:
                raise ValueError(f"unknown expression node {e!r}")

        walk(self.expr)

    def leaves(self) -> Iterator[Expr]:
        stack = [self.expr]
        while stack:
            e = stack.pop()
            if isinstance(e, (And, Or)):
                stack.extend(reversed(e.children))
            else:
                yield e


@dataclass(frozen=True)
class Workload:
    queries: tuple[Query, ...]
    advanced_cuts: tuple[AdvancedCut, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "queries", tuple(self.queries))
        object.__setattr__(self, "advanced_cuts", tuple(self.advanced_cuts))
        for i, ac in enumerate(self.advanced_cuts):
            if ac.index != i:
                raise ValueError("advanced cut index must equal registry position")

    @property
    def n_queries(self) -> int:
        return len(self.queries)

    def validate(self, schema: Schema) -> None:
        if not self.queries:
            raise ValueError("workload must contain at least one query")
        for ac in self.advanced_cuts:
            ac.validate(schema)
        for q in self.queries:
            q.validate(schema, len(self.advanced_cuts))


def evaluate_predicate(p: UnaryPredicate, row) -> bool:
    v = int(row[p.col])
    if p.op == "<":
        return v < p.literal
    if p.op == "<=":
        return v <= p.literal
    if p.op == ">":
        return v > p.literal
    if p.op == ">=":
        return v >= p.literal
    if p.op == "=":
        return v == p.literal
    return v in p.literal


def evaluate_query(q: Query, row, registry: tuple[AdvancedCut, ...] = ()) -> bool:
    def walk(e: Expr) -> bool:
        if isinstance(e, Pred):
            return evaluate_predicate(e.pred, row)
        if isinstance(e, AdvRef):
            hit = bool(registry[e.index].matches(np.asarray(row, dtype=np.int64)[None, :])[0])
            return not hit if e.negated else hit
        if isinstance(e, And):
            return all(walk(c) for c in e.children)
        return any(walk(c) for c in e.children)

    return walk(q.expr)


def query_matches(q: Query, rows: np.ndarray, registry: tuple[AdvancedCut, ...] = ()) -> np.ndarray:
    """Vectorized evaluate_query over an (n, n_columns) array."""

    def walk(e: Expr) -> np.ndarray:
        if isinstance(e, Pred):
            return e.pred.matches(rows)
        if isinstance(e, AdvRef):
            hit = registry[e.index].matches(rows)
            return ~hit if e.negated else hit
        parts = [walk(c) for c in e.children]
        out = parts[0]
        for p in parts[1:]:
            out = (out & p) if isinstance(e, And) else (out | p)
        return out

    return walk(q.expr)


def extract_cuts(w: Workload) -> tuple[tuple[UnaryPredicate, ...], tuple[AdvancedCut, ...]]:
    """Candidate cuts of a workload, in order of first appearance.

    Unary predicate leaves are deduplicated; advanced references pull the
    registered (un-negated) cut.  Registry indices are preserved so that the
    description bit of each advanced cut stays stable.
    """
    preds: list[UnaryPredicate] = []
    advanced: list[AdvancedCut] = []
    seen_preds: set[UnaryPredicate] = set()
    seen_adv: set[int] = set()
    for q in w.queries:
        for leaf in q.leaves():
            if isinstance(leaf, Pred):
                if leaf.pred not in seen_preds:
                    seen_preds.add(leaf.pred)
                    preds.append(leaf.pred)
            elif isinstance(leaf, AdvRef):
                if leaf.index not in seen_adv:
                    seen_adv.add(leaf.index)
                    advanced.append(w.advanced_cuts[leaf.index])
    return tuple(preds), tuple(advanced)


# --- JSON / CSV interchange ----------------------------------------------

def schema_to_json(schema: Schema) -> dict:
    return {
        "columns": [
            {"name": c.name, "kind": c.kind, "domain_size": c.domain_size}
            for c in schema.columns
        ]
    }


def schema_from_json(obj) -> Schema:
    try:
        cols = tuple(
            Column(c["name"], c["kind"], int(c["domain_size"])) for c in obj["columns"]
        )
        return Schema(cols)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad schema JSON: {exc}") from exc


def pred_to_json(p: UnaryPredicate) -> dict:
    lit = sorted(p.literal) if p.op == "in" else p.literal
    return {"col": p.col, "op": p.op, "lit": lit}


def pred_from_json(obj, where: str = "predicate") -> UnaryPredicate:
    try:
        lit = obj["lit"]
        if obj["op"] == "in":
            lit = frozenset(int(v) for v in lit)
        return UnaryPredicate(int(obj["col"]), obj["op"], lit)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad {where}: {exc}") from exc


def advanced_cut_to_json(ac: AdvancedCut) -> dict:
    return {"left": ac.left, "op": ac.op, "right": ac.right}


def expr_to_json(e: Expr) -> dict:
    if isinstance(e, Pred):
        return {"pred": pred_to_json(e.pred)}
    if isinstance(e, AdvRef):
        return {"adv": e.index, "neg": e.negated}
    op = "and" if isinstance(e, And) else "or"
    return {"op": op, "children": [expr_to_json(c) for c in e.children]}


def expr_from_json(obj, where: str = "query") -> Expr:
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: expected an object, got {type(obj).__name__}")
    if "pred" in obj:
        return Pred(pred_from_json(obj["pred"], where))
    if "adv" in obj:
        return AdvRef(int(obj["adv"]), bool(obj.get("neg", False)))
    if "op" in obj:
        op = obj["op"]
        if op == "not":
            raise ParseError(f"{where}: general NOT is not supported; negate advanced references instead")
        if op not in ("and", "or"):
            raise ParseError(f"{where}: unknown operator {op!r}")
        children = obj.get("children", [])
        if len(children) < 2:
            raise ParseError(f"{where}: {op!r} needs at least two children")
        parts = tuple(expr_from_json(c, where) for c in children)
        return And(parts) if op == "and" else Or(parts)
    raise ParseError(f"{where}: expected one of pred/adv/op keys")


def workload_to_json(w: Workload) -> object:
    queries = [expr_to_json(q.expr) for q in w.queries]
    if not w.advanced_cuts:
        return queries
    return {
        "queries": queries,
        "advanced_cuts": [advanced_cut_to_json(ac) for ac in w.advanced_cuts],
    }


def workload_from_json(obj) -> Workload:
    if isinstance(obj, list):
        raw_queries, raw_adv = obj, []
    elif isinstance(obj, dict):
        raw_queries = obj.get("queries", [])
        raw_adv = obj.get("advanced_cuts", [])
    else:
        raise ParseError("workload JSON must be an array or an object")
    advanced = tuple(
        AdvancedCut(i, int(a["left"]), a["op"], int(a["right"]))
        for i, a in enumerate(raw_adv)
    )
    queries = tuple(
        Query(expr_from_json(q, f"query[{i}]")) for i, q in enumerate(raw_queries)
    )
    return Workload(queries, advanced)


def load_schema(path) -> Schema:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
    return schema_from_json(obj)


def save_schema(schema: Schema, path) -> None:
    with open(path, "w") as fh:
        json.dump(schema_to_json(schema), fh, indent=2)


def load_workload(path, schema: Schema | None = None) -> Workload:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
    w = workload_from_json(obj)
    if schema is not None:
        w.validate(schema)
    return w


def save_workload(w: Workload, path) -> None:
    with open(path, "w") as fh:
        json.dump(workload_to_json(w), fh, indent=2)


def load_dataset(path, schema: Schema) -> Dataset:
    """Read a CSV whose header must match the schema column names."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty CSV") from None
        expected = [c.name for c in schema.columns]
        if header != expected:
            raise ParseError(f"{path}: header {header} does not match schema {expected}")
        try:
            rows = np.array([[int(v) for v in rec] for rec in reader], dtype=np.int64)
        except ValueError as exc:
            raise ParseError(f"{path}: non-integer cell: {exc}") from exc
    if rows.size == 0:
        rows = rows.reshape(0, schema.n_columns)
    return Dataset(schema, rows)


def save_dataset(data: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([c.name for c in data.schema.columns])
        writer.writerows(data.rows.tolist())
