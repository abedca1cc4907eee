"""Skip accounting: how many tuples a layout lets each query avoid.

The merit of a block P under a workload W is |P| times the number of queries
whose predicates cannot be satisfied inside P's description; a layout's value
is the sum over blocks.  Counts are exact integers; fractions stay rational.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .model import AdvancedCut, Query, Schema, Workload
from .tree import (
    BlockAssignment,
    QdTree,
    SemanticDescription,
    description_from_rows,
    intersects,
)


def can_skip(
    desc: SemanticDescription,
    q: Query,
    schema: Schema,
    registry: tuple[AdvancedCut, ...] = (),
) -> bool:
    """True when no row matching the description can satisfy the query."""
    return not intersects(desc, q, schema, registry)


@dataclass(frozen=True)
class SkipReport:
    n_rows: int
    n_queries: int
    per_block_skipped: tuple[int, ...]
    per_query_scanned: tuple[int, ...]
    total_skipped: int
    access_fraction: Fraction

    @property
    def per_query_access(self) -> tuple[Fraction, ...]:
        return tuple(Fraction(s, self.n_rows) for s in self.per_query_scanned)

    def to_json(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "n_queries": self.n_queries,
            "total_skipped": self.total_skipped,
            "access_fraction": float(self.access_fraction),
            "access_fraction_exact": [
                self.access_fraction.numerator,
                self.access_fraction.denominator,
            ],
            "per_block_skipped": list(self.per_block_skipped),
            "per_query_scanned": list(self.per_query_scanned),
        }

    def write_per_query_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query_index", "scanned_tuples", "access_fraction"])
            for i, scanned in enumerate(self.per_query_scanned):
                writer.writerow([i, scanned, float(Fraction(scanned, self.n_rows))])


def evaluate_blocks(
    descs: tuple[SemanticDescription, ...],
    sizes: tuple[int, ...],
    w: Workload,
    schema: Schema,
    n_rows: int,
) -> SkipReport:
    """Skip report for any block layout given per-block descriptions.

    This is the single evaluation path: trees, baselines and overlap layouts
    all funnel through it so their numbers are comparable.
    """
    if len(descs) != len(sizes):
        raise ValueError("one description per block required")
    registry = w.advanced_cuts
    per_block_skipped = []
    per_query_scanned = [0] * w.n_queries
    total = 0
    for desc, size in zip(descs, sizes):
        skipped_queries = 0
        for qi, q in enumerate(w.queries):
            if can_skip(desc, q, schema, registry):
                skipped_queries += 1
            else:
                per_query_scanned[qi] += size
        merit = size * skipped_queries
        per_block_skipped.append(merit)
        total += merit
    access = Fraction(sum(per_query_scanned), w.n_queries * n_rows) if n_rows else Fraction(0)
    return SkipReport(
        n_rows=n_rows,
        n_queries=w.n_queries,
        per_block_skipped=tuple(per_block_skipped),
        per_query_scanned=tuple(per_query_scanned),
        total_skipped=total,
        access_fraction=access,
    )


def evaluate_partitioning(
    tree: QdTree, assignment: BlockAssignment, data, w: Workload
) -> SkipReport:
    """Skip report of a frozen tree against its block assignment."""
    if not tree.frozen:
        raise ValueError("evaluate_partitioning requires a frozen tree")
    if assignment.n_blocks != tree.n_leaves:
        raise ValueError("assignment does not match the tree's leaves")
    return evaluate_blocks(
        tree.leaf_descriptions(), assignment.sizes, w, tree.schema, data.n_rows
    )


def skipped_under_node(
    tree: QdTree, node_id: int, data, row_idx: np.ndarray, w: Workload
) -> int:
    """Skipped-tuple total of the subtree at node_id over the given rows.

    Rows are routed down from the node; each leaf contributes its row count
    times the number of queries it can skip, using descriptions tightened to
    the rows actually present.  Equals the evaluate_blocks total restricted
    to this subtree's leaves.
    """
    registry = w.advanced_cuts
    total = 0
    stack = [(node_id, np.asarray(row_idx, dtype=np.intp))]
    while stack:
        nid, idx = stack.pop()
        node = tree.node(nid)
        if node.is_leaf:
            if len(idx) == 0:
                continue
            desc = description_from_rows(tree.schema, tree.registry, data.rows[idx], base=node.desc)
            skipped = sum(
                1 for q in w.queries if can_skip(desc, q, tree.schema, registry)
            )
            total += len(idx) * skipped
            continue
        hit = node.cut.matches(data.rows[idx])
        stack.append((node.left, idx[hit]))
        stack.append((node.right, idx[~hit]))
    return total
