"""Shared fuzz builders and reference implementations.

The ref_* functions re-derive predicate, query, and cut semantics from
scratch (plain Python over one row at a time) so library results can be
checked against an implementation that shares no code with them.
"""

from __future__ import annotations

import numpy as np

from skiptree.model import (
    CATEGORICAL,
    NUMERIC,
    RANGE_OPS,
    AdvancedCut,
    AdvRef,
    And,
    Column,
    Dataset,
    Or,
    Pred,
    Query,
    Schema,
    UnaryPredicate,
    Workload,
)
from skiptree.tree import DegenerateCut, QdTree


# --- reference semantics -----------------------------------------------------

def ref_pred_holds(p: UnaryPredicate, row) -> bool:
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
    if p.op == "in":
        return v in p.literal
    raise AssertionError(f"unknown op {p.op}")


def ref_adv_holds(ac: AdvancedCut, row) -> bool:
    a, b = int(row[ac.left]), int(row[ac.right])
    if ac.op == "<":
        return a < b
    if ac.op == "<=":
        return a <= b
    if ac.op == ">":
        return a > b
    if ac.op == ">=":
        return a >= b
    if ac.op == "=":
        return a == b
    raise AssertionError(f"unknown op {ac.op}")


def ref_cut_holds(cut, row) -> bool:
    if isinstance(cut, AdvancedCut):
        return ref_adv_holds(cut, row)
    return ref_pred_holds(cut, row)


def ref_query_holds(q: Query, row, registry=()) -> bool:
    def walk(e) -> bool:
        if isinstance(e, Pred):
            return ref_pred_holds(e.pred, row)
        if isinstance(e, AdvRef):
            hit = ref_adv_holds(registry[e.index], row)
            return not hit if e.negated else hit
        if isinstance(e, And):
            return all(walk(c) for c in e.children)
        if isinstance(e, Or):
            return any(walk(c) for c in e.children)
        raise AssertionError(f"unknown expr {e}")

    return walk(q.expr)


def ref_query_rows(q: Query, rows: np.ndarray, registry=()) -> np.ndarray:
    """Indices of rows satisfying the query, one at a time."""
    return np.array(
        [i for i in range(rows.shape[0]) if ref_query_holds(q, rows[i], registry)],
        dtype=np.intp,
    )


# --- random builders ---------------------------------------------------------

def random_schema(rng, max_columns: int = 3, allow_categorical: bool = True) -> Schema:
    n_cols = int(rng.integers(1, max_columns + 1))
    cols = []
    for i in range(n_cols):
        if allow_categorical and n_cols > 1 and rng.random() < 0.3:
            cols.append(Column(f"c{i}", CATEGORICAL, int(rng.integers(2, 7))))
        else:
            cols.append(Column(f"c{i}", NUMERIC, int(rng.integers(4, 33))))
    return Schema(tuple(cols))


def random_dataset(rng, schema: Schema, n_rows: int) -> Dataset:
    rows = np.column_stack(
        [rng.integers(0, c.domain_size, size=n_rows) for c in schema.columns]
    ).astype(np.int64)
    return Dataset(schema, rows)


def random_unary_pred(rng, schema: Schema) -> UnaryPredicate:
    col = int(rng.integers(0, schema.n_columns))
    c = schema.columns[col]
    if c.kind == NUMERIC:
        op = RANGE_OPS[int(rng.integers(0, len(RANGE_OPS)))]
        return UnaryPredicate(col, op, int(rng.integers(0, c.domain_size)))
    if rng.random() < 0.5:
        return UnaryPredicate(col, "=", int(rng.integers(0, c.domain_size)))
    size = int(rng.integers(1, c.domain_size))
    values = rng.choice(c.domain_size, size=size, replace=False)
    return UnaryPredicate(col, "in", frozenset(int(v) for v in values))


def random_range_pred(rng, schema: Schema) -> UnaryPredicate:
    numeric = schema.numeric_indices
    col = int(numeric[int(rng.integers(0, len(numeric)))])
    c = schema.columns[col]
    op = RANGE_OPS[int(rng.integers(0, len(RANGE_OPS)))]
    return UnaryPredicate(col, op, int(rng.integers(0, c.domain_size)))


def random_advanced_registry(rng, schema: Schema, n: int) -> tuple[AdvancedCut, ...]:
    numeric = schema.numeric_indices
    if len(numeric) < 2 or n == 0:
        return ()
    ops = ("<", "<=", ">", ">=", "=")
    out = []
    for i in range(n):
        left, right = rng.choice(len(numeric), size=2, replace=False)
        out.append(
            AdvancedCut(
                i,
                int(numeric[left]),
                ops[int(rng.integers(0, len(ops)))],
                int(numeric[right]),
            )
        )
    return tuple(out)


def random_expr(rng, schema: Schema, registry, depth: int):
    use_adv = len(registry) > 0 and rng.random() < 0.25
    if depth <= 0 or rng.random() < 0.4:
        if use_adv:
            return AdvRef(int(rng.integers(0, len(registry))), negated=bool(rng.random() < 0.3))
        return Pred(random_unary_pred(rng, schema))
    n_children = int(rng.integers(2, 4))
    children = tuple(random_expr(rng, schema, registry, depth - 1) for _ in range(n_children))
    return And(children) if rng.random() < 0.5 else Or(children)


def random_query(rng, schema: Schema, registry=(), depth: int = 2) -> Query:
    return Query(random_expr(rng, schema, registry, depth))


def random_workload(
    rng, schema: Schema, n_queries: int, n_advanced: int = 0, depth: int = 2
) -> Workload:
    registry = random_advanced_registry(rng, schema, n_advanced)
    queries = tuple(random_query(rng, schema, registry, depth) for _ in range(n_queries))
    return Workload(queries, registry)


def conjunctive_range_workload(rng, schema: Schema, n_queries: int) -> Workload:
    """Conjunctions of numeric range predicates only."""
    queries = []
    for _ in range(n_queries):
        n_preds = int(rng.integers(1, 4))
        preds = tuple(Pred(random_range_pred(rng, schema)) for _ in range(n_preds))
        queries.append(Query(preds[0] if len(preds) == 1 else And(preds)))
    return Workload(tuple(queries))


def random_tree(
    rng, schema: Schema, registry, data: Dataset, n_splits: int, attempts: int = 40
) -> QdTree:
    """Unfrozen tree grown by random legal splits; may end with fewer splits
    than asked when random cuts keep degenerating."""
    tree = QdTree.build_root(schema, registry)
    done = 0
    for _ in range(attempts):
        if done >= n_splits:
            break
        leaves = tree.leaves()
        leaf = leaves[int(rng.integers(0, len(leaves)))]
        if len(registry) > 0 and rng.random() < 0.2:
            cut = registry[int(rng.integers(0, len(registry)))]
        else:
            cut = random_unary_pred(rng, schema)
        try:
            tree = tree.split(leaf.id, cut)
        except DegenerateCut:
            continue
        done += 1
    return tree
