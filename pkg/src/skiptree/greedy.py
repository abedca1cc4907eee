"""Greedy top-down construction of routing trees.

Nodes are processed level by level, left to right.  A node of size >= 2b is
split by the candidate cut that maximizes the layout's skipped-tuple total,
subject to both children holding at least b rows, and only when the total
strictly improves.  Ties go to the lowest cut index.  Evaluation is
incremental: a candidate split only changes its own node's contribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .model import (
    And,
    Cut,
    NUMERIC,
    Pred,
    Query,
    RANGE_OPS,
    Schema,
    UnaryPredicate,
    Workload,
)
from .metrics import can_skip, skipped_under_node
from .tree import QdTree, description_from_rows


class EmptyDataset(ValueError):
    pass


class BoundViolation(RuntimeError):
    """Skipped-tuple total fell outside the certified range."""


class UnsupportedQueryShape(ValueError):
    """The workload is outside the conjunctive-range setting."""


@dataclass
class GreedyConfig:
    min_block_size: int
    cuts: tuple[Cut, ...]
    tie_break: str = "lowest-index"
    relaxed: bool = False

    def __post_init__(self) -> None:
        self.cuts = tuple(self.cuts)
        if self.min_block_size < 1:
            raise ValueError("min_block_size must be >= 1")
        if self.tie_break != "lowest-index":
            raise ValueError(f"unknown tie_break {self.tie_break!r}")


@dataclass
class BuildStats:
    candidates_evaluated: int = 0
    rows_examined: int = 0
    splits: int = 0


def _skip_vector(schema: Schema, registry, desc, w: Workload, size: int) -> np.ndarray:
    """Per-query skipped-tuple contribution of one block."""
    out = np.zeros(w.n_queries, dtype=np.int64)
    for qi, q in enumerate(w.queries):
        if can_skip(desc, q, schema, registry):
            out[qi] = size
    return out


def _greedy_build(
    data,
    w: Workload,
    cfg: GreedyConfig,
    joint_baseline: Optional[np.ndarray] = None,
    stats: Optional[BuildStats] = None,
) -> QdTree:
    schema = data.schema
    if data.n_rows == 0:
        raise EmptyDataset("cannot build a layout over zero rows")
    w.validate(schema)
    for cut in cfg.cuts:
        cut.validate(schema)
    b = cfg.min_block_size

    if joint_baseline is None:
        base = np.zeros(w.n_queries, dtype=np.int64)
    else:
        base = np.asarray(joint_baseline, dtype=np.int64)

    def objective(g: np.ndarray) -> int:
        return int(np.maximum(base, g).sum())

    tree = QdTree.build_root(schema, w.advanced_cuts)
    rows_at = {tree.root_id: np.arange(data.n_rows, dtype=np.intp)}
    contrib = {
        tree.root_id: _skip_vector(
            schema,
            w.advanced_cuts,
            description_from_rows(schema, w.advanced_cuts, data.rows),
            w,
            data.n_rows,
        )
    }
    total = contrib[tree.root_id].copy()

    min_parent = b + 1 if cfg.relaxed else 2 * b
    frontier = [tree.root_id]
    while frontier:
        next_frontier: list[int] = []
        for node_id in frontier:
            idx = rows_at[node_id]
            if len(idx) < min_parent:
                continue
            values = data.rows[idx]
            current_score = objective(total)
            best = None  # (score, cut_index, hit_mask, left_vec, right_vec)
            for ci, cut in enumerate(cfg.cuts):
                hit = cut.matches(values)
                nl = int(hit.sum())
                nr = len(idx) - nl
                if stats is not None:
                    stats.candidates_evaluated += 1
                    stats.rows_examined += len(idx)
                if cfg.relaxed:
                    if min(nl, nr) < 1 or max(nl, nr) < b:
                        continue
                else:
                    if nl < b or nr < b:
                        continue
                left_desc = description_from_rows(schema, w.advanced_cuts, values[hit])
                right_desc = description_from_rows(schema, w.advanced_cuts, values[~hit])
                lv = _skip_vector(schema, w.advanced_cuts, left_desc, w, nl)
                rv = _skip_vector(schema, w.advanced_cuts, right_desc, w, nr)
                score = objective(total - contrib[node_id] + lv + rv)
                if best is None or score > best[0]:
                    best = (score, ci, hit, lv, rv)
            if best is None or best[0] <= current_score:
                continue
            _, ci, hit, lv, rv = best
            tree = tree.split(node_id, cfg.cuts[ci])
            node = tree.node(node_id)
            rows_at[node.left] = idx[hit]
            rows_at[node.right] = idx[~hit]
            total += lv + rv - contrib[node_id]
            contrib[node.left] = lv
            contrib[node.right] = rv
            del contrib[node_id], rows_at[node_id]
            if stats is not None:
                stats.splits += 1
            next_frontier.extend((node.left, node.right))
        frontier = next_frontier
    return tree


def greedy_build(
    data, w: Workload, cfg: GreedyConfig, stats: Optional[BuildStats] = None
) -> QdTree:
    """Build an unfrozen routing tree; callers route and freeze afterwards."""
    return _greedy_build(data, w, cfg, stats=stats)


@dataclass(frozen=True)
class BoundReport:
    c_tree: int
    c_tree_minus_1: int
    opt: int
    online_bound: Fraction
    n_rows: int
    min_block_size: int


def check_online_bound(tree: QdTree, data, w: Workload, cfg: GreedyConfig, opt: int) -> BoundReport:
    """Certify a built tree against the optimal skipped-tuple total.

    The certificate compares the tree with the tree minus its deepest level
    of leaves: opt can exceed the achieved total by at most (2|V|/b) times
    the last level's gain.  Raises BoundViolation when either side fails.
    """
    all_idx = np.arange(data.n_rows, dtype=np.intp)
    c_tree = skipped_under_node(tree, tree.root_id, data, all_idx, w)

    depths = tree.depths()
    max_depth = max(depths[leaf.id] for leaf in tree.leaves())
    if max_depth == 0:
        c_prev = 0
    else:
        pruned_leaves = {
            n.id
            for n in tree.nodes.values()
            if (n.is_leaf and depths[n.id] < max_depth)
            or (not n.is_leaf and depths[n.id] == max_depth - 1)
        }
        c_prev = 0
        stack = [(tree.root_id, all_idx)]
        while stack:
            node_id, idx = stack.pop()
            node = tree.node(node_id)
            if node_id in pruned_leaves or node.is_leaf:
                if len(idx) == 0:
                    continue
                desc = description_from_rows(tree.schema, tree.registry, data.rows[idx])
                skipped = sum(
                    1
                    for q in w.queries
                    if can_skip(desc, q, tree.schema, tree.registry)
                )
                c_prev += len(idx) * skipped
                continue
            hit = node.cut.matches(data.rows[idx])
            stack.append((node.left, idx[hit]))
            stack.append((node.right, idx[~hit]))

    slack = Fraction(2 * data.n_rows, cfg.min_block_size) * (c_tree - c_prev)
    bound = Fraction(c_tree) + slack
    report = BoundReport(
        c_tree=c_tree,
        c_tree_minus_1=c_prev,
        opt=opt,
        online_bound=bound,
        n_rows=data.n_rows,
        min_block_size=cfg.min_block_size,
    )
    if c_tree > opt:
        raise BoundViolation(f"achieved total {c_tree} exceeds reported optimum {opt}")
    if Fraction(opt) > bound:
        raise BoundViolation(f"optimum {opt} exceeds certified bound {float(bound):.3f}")
    return report


def _conjunctive_box(q: Query, schema: Schema) -> dict[int, tuple[int, int]]:
    """Per-column satisfying interval of a conjunctive range query."""
    box: dict[int, tuple[int, int]] = {}

    def add(p: UnaryPredicate) -> None:
        if p.op not in RANGE_OPS or schema.columns[p.col].kind != NUMERIC:
            raise UnsupportedQueryShape(f"predicate {p} is not a numeric range")
        a, b2 = p.satisfying_interval(schema)
        lo, hi = box.get(p.col, (0, schema.columns[p.col].domain_size))
        box[p.col] = (max(lo, a), min(hi, b2))

    expr = q.expr
    if isinstance(expr, Pred):
        add(expr.pred)
    elif isinstance(expr, And):
        for child in expr.children:
            if not isinstance(child, Pred):
                raise UnsupportedQueryShape("only conjunctions of range predicates are supported")
            add(child.pred)
    else:
        raise UnsupportedQueryShape("only conjunctions of range predicates are supported")
    return box


def check_submodularity_condition(cuts, w: Workload, schema: Schema) -> bool:
    """Verify the pairwise skip-set condition that makes the online bound
    applicable: the queries skipped under two stacked cuts never exceed the
    union of the queries skipped under each alone.

    Only conjunctions of numeric range predicates are accepted; anything else
    raises UnsupportedQueryShape.  Cut pairs whose conjunction is empty are
    vacuous because no nonempty node can satisfy both.
    """
    for cut in cuts:
        if not isinstance(cut, UnaryPredicate) or cut.op not in RANGE_OPS:
            raise UnsupportedQueryShape(f"cut {cut} is not a range predicate")
    boxes = [_conjunctive_box(q, schema) for q in w.queries]

    def box_empty(box: dict[int, tuple[int, int]]) -> bool:
        return any(lo >= hi for lo, hi in box.values())

    def disjoint(box: dict[int, tuple[int, int]], region: dict[int, tuple[int, int]]) -> bool:
        if box_empty(box) or box_empty(region):
            return True
        for col, (a, b2) in region.items():
            lo, hi = box.get(col, (0, schema.columns[col].domain_size))
            if max(lo, a) >= min(hi, b2):
                return True
        return False

    def skipped_set(region: dict[int, tuple[int, int]]) -> set[int]:
        return {qi for qi, box in enumerate(boxes) if disjoint(box, region)}

    intervals = [
        (p.col, p.satisfying_interval(schema)) for p in cuts
    ]
    for i, (c1, iv1) in enumerate(intervals):
        for c2, iv2 in intervals[i:]:
            if c1 == c2:
                merged = (max(iv1[0], iv2[0]), min(iv1[1], iv2[1]))
                if merged[0] >= merged[1]:
                    continue  # contradictory pair: cannot label a nonempty node
                region = {c1: merged}
            else:
                region = {c1: iv1, c2: iv2}
            pair_skips = skipped_set(region)
            single = skipped_set({c1: iv1}) | skipped_set({c2: iv2})
            if not pair_skips <= single:
                return False
    return True
