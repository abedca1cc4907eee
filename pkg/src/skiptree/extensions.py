"""Layout extensions: replicated small blocks and paired trees.

Overlap mode relaxes the size constraint so one child of a split may fall
below the block minimum.  Every resulting small leaf is replicated into an
adjacent large leaf whose description widens to the exact union of the two
hypercubes, so blocks stay complete: a block always holds every dataset row
matching its description.  Queries then prune redundant blocks and eliminate
duplicates at scan time by block id.

Two-tree mode keeps a primary tree and builds a secondary one credited, per
query, with the better of the two trees' skip totals.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .model import (
    And,
    CATEGORICAL,
    Cut,
    Dataset,
    AdvancedCut,
    NUMERIC,
    Pred,
    Query,
    Schema,
    UnaryPredicate,
    Workload,
    query_matches,
)
from .tree import (
    BlockAssignment,
    QdTree,
    SemanticDescription,
    description_matches,
    intersects,
    tree_from_json,
    tree_to_json,
)
from .metrics import SkipReport, evaluate_blocks, evaluate_partitioning
from .greedy import GreedyConfig, _greedy_build
from .rl import RlConfig, train

from fractions import Fraction


class NoNeighbor(RuntimeError):
    """A small leaf could not be replicated or merged anywhere."""


# Boxes are (ranges per numeric column, value masks per categorical column);
# a description without its advanced bits.
Box = tuple[tuple[tuple[int, int], ...], tuple[int, ...]]

_COVERAGE_CELL_CAP = 50_000


def _desc_box(desc: SemanticDescription) -> Box:
    return desc.ranges, desc.masks


def _full_box(schema: Schema) -> Box:
    ranges = tuple((0, schema.columns[i].domain_size) for i in schema.numeric_indices)
    masks = tuple((1 << schema.columns[i].domain_size) - 1 for i in schema.categorical_indices)
    return ranges, masks


def _box_intersect(a: Box, b: Box) -> Box:
    ranges = tuple((max(al, bl), min(ah, bh)) for (al, ah), (bl, bh) in zip(a[0], b[0]))
    masks = tuple(am & bm for am, bm in zip(a[1], b[1]))
    return ranges, masks


def _box_empty(box: Box) -> bool:
    return any(lo >= hi for lo, hi in box[0]) or any(m == 0 for m in box[1])


def query_box(q: Query, schema: Schema) -> Optional[Box]:
    """The query's region when it is a conjunction of unary predicates;
    None for any other shape (no pruning is attempted then)."""
    if isinstance(q.expr, Pred):
        preds = [q.expr.pred]
    elif isinstance(q.expr, And) and all(isinstance(c, Pred) for c in q.expr.children):
        preds = [c.pred for c in q.expr.children]
    else:
        return None
    ranges, masks = _full_box(schema)
    ranges, masks = list(ranges), list(masks)
    for p in preds:
        if p.op in ("=", "in"):
            pos = schema.categorical_pos[p.col]
            ind = 0
            for v in p.value_set():
                ind |= 1 << v
            masks[pos] &= ind
        else:
            pos = schema.numeric_pos[p.col]
            a, b = p.satisfying_interval(schema)
            lo, hi = ranges[pos]
            ranges[pos] = (max(lo, a), min(hi, b))
    return tuple(ranges), tuple(masks)


def _box_covered(x: Box, covers: Sequence[Box]) -> bool:
    """Exact test of x being contained in the union of `covers`, by grid
    decomposition.  Returns False (no proof) past the cell cap."""
    if _box_empty(x):
        return True
    covers = [c for c in covers if not _box_empty(_box_intersect(c, x))]
    if not covers:
        return False
    num_segments: list[list[tuple[int, int]]] = []
    for d, (lo, hi) in enumerate(x[0]):
        points = {lo, hi}
        for c in covers:
            clo, chi = c[0][d]
            if lo < clo < hi:
                points.add(clo)
            if lo < chi < hi:
                points.add(chi)
        edges = sorted(points)
        num_segments.append(list(zip(edges, edges[1:])))
    cat_values: list[list[int]] = []
    for d, mask in enumerate(x[1]):
        cat_values.append([v for v in range(mask.bit_length()) if (mask >> v) & 1])

    total = 1
    for seg in num_segments:
        total *= len(seg)
    for vals in cat_values:
        total *= len(vals)
    if total > _COVERAGE_CELL_CAP:
        return False

    def cells(dim: int, cell_ranges: list, cell_values: list) -> bool:
        if dim == len(num_segments) + len(cat_values):
            for c in covers:
                ok = all(
                    c[0][d][0] <= lo and hi <= c[0][d][1]
                    for d, (lo, hi) in enumerate(cell_ranges)
                )
                if ok and all((c[1][d] >> v) & 1 for d, v in enumerate(cell_values)):
                    return True
            return False
        if dim < len(num_segments):
            return all(
                cells(dim + 1, cell_ranges + [seg], cell_values)
                for seg in num_segments[dim]
            )
        d = dim - len(num_segments)
        return all(cells(dim + 1, cell_ranges, cell_values + [v]) for v in cat_values[d])

    return cells(0, [], [])


def hypercube_union(
    a: SemanticDescription, b: SemanticDescription
) -> Optional[SemanticDescription]:
    """Exact union of two descriptions when it is again a hypercube: equal
    masks and advanced bits, ranges equal except one dimension where the
    intervals are adjacent."""
    if a.masks != b.masks or a.adv != b.adv:
        return None
    diff = [i for i, (ra, rb) in enumerate(zip(a.ranges, b.ranges)) if ra != rb]
    if len(diff) != 1:
        return None
    d = diff[0]
    (alo, ahi), (blo, bhi) = a.ranges[d], b.ranges[d]
    if ahi != blo and bhi != alo:
        return None
    ranges = list(a.ranges)
    ranges[d] = (min(alo, blo), max(ahi, bhi))
    return dataclasses.replace(a, ranges=tuple(ranges))


@dataclass(frozen=True)
class OverlapLayout:
    """A frozen tree whose small leaves were replicated into neighbors.

    complete_descs are the cut-derived (and, for receivers, widened)
    descriptions; each block holds every dataset row matching its complete
    description, which is what makes scan-time duplicate elimination and
    redundancy pruning sound.
    """

    tree: QdTree
    assignment: BlockAssignment
    complete_descs: tuple[SemanticDescription, ...]
    replica_map: dict
    extra_storage_rows: int

    @property
    def n_blocks(self) -> int:
        return self.assignment.n_blocks


def _subtree_leaf_ids(tree: QdTree, node_id: int) -> set[int]:
    out: set[int] = set()
    stack = [node_id]
    while stack:
        n = tree.node(stack.pop())
        if n.is_leaf:
            out.add(n.id)
        else:
            stack.extend((n.left, n.right))
    return out


def build_overlap(
    data: Dataset,
    w: Workload,
    cuts: Sequence[Cut],
    cfg: Union[GreedyConfig, RlConfig],
    builder: str = "greedy",
) -> OverlapLayout:
    """Build a layout under the relaxed size constraint and replicate every
    small leaf into an adjacent large leaf (lowest block id first).

    When a small leaf has no large neighbor, it merges into the
    lowest-numbered leaf of its sibling's subtree whose union stays a
    hypercube; failing that, the relaxed split is undone.
    """
    cuts = tuple(cuts)
    if any(isinstance(c, AdvancedCut) for c in cuts):
        raise ValueError("overlap layouts support unary cuts only")
    b = cfg.min_block_size
    if builder == "greedy":
        gcfg = dataclasses.replace(cfg, cuts=cuts, relaxed=True)
        tree = _greedy_build(data, w, gcfg)
    elif builder == "rl":
        rcfg = dataclasses.replace(cfg, relaxed=True)
        tree = train(data, w, cuts, rcfg).best_tree
    else:
        raise ValueError(f"unknown builder {builder!r}")

    # Replication loop; an undo restructures the tree, so start over then.
    while True:
        assignment = tree.route_rows(data)
        leaves = tree.leaves()
        descs = {leaf.block_id: leaf.desc for leaf in leaves}
        leaf_ids = {leaf.block_id: leaf.id for leaf in leaves}
        sizes = dict(enumerate(assignment.sizes))
        block_rows = {bid: list(rows) for bid, rows in enumerate(assignment.block_rows)}
        big = {bid for bid, size in sizes.items() if size >= b}
        smalls = sorted(bid for bid in sizes if bid not in big)
        replica_map: dict[int, int] = {}
        undo_at: Optional[int] = None
        parent_of = tree.parents()

        for small in smalls:
            receiver = None
            for cand in sorted(big):
                if hypercube_union(descs[small], descs[cand]) is not None:
                    receiver = cand
                    break
            if receiver is None:
                small_node = leaf_ids[small]
                parent = parent_of.get(small_node)
                if parent is not None:
                    pnode = tree.node(parent)
                    sibling = pnode.right if pnode.left == small_node else pnode.left
                    sibling_blocks = sorted(
                        tree.node(i).block_id for i in _subtree_leaf_ids(tree, sibling)
                    )
                    for cand in sibling_blocks:
                        if cand != small and hypercube_union(descs[small], descs[cand]) is not None:
                            receiver = cand
                            break
                if receiver is None:
                    if parent is None:
                        raise NoNeighbor("root-only layout has a small block and no merge target")
                    undo_at = parent
                    break
            descs[receiver] = hypercube_union(descs[small], descs[receiver])
            block_rows[receiver] = block_rows[receiver] + block_rows[small]
            replica_map[small] = receiver

        if undo_at is not None:
            tree = tree.unsplit(undo_at)
            continue

        widened_tree = tree.with_leaf_descriptions(
            {leaf_ids[bid]: desc for bid, desc in descs.items()}
        )
        final_assignment = BlockAssignment(
            tuple(np.asarray(sorted(block_rows[bid]), dtype=np.intp) for bid in range(len(leaves))),
            data.n_rows,
        )
        frozen = widened_tree.freeze(final_assignment, data)
        complete = tuple(descs[bid] for bid in range(len(leaves)))
        return OverlapLayout(
            tree=frozen,
            assignment=final_assignment,
            complete_descs=complete,
            replica_map=replica_map,
            extra_storage_rows=final_assignment.total_assigned - data.n_rows,
        )


def route_query_overlap(
    layout: OverlapLayout, q: Query
) -> list[tuple[int, tuple[SemanticDescription, ...]]]:
    """Blocks a query must scan, with redundancy pruning and the metadata for
    scan-time duplicate elimination.

    Candidates are blocks whose frozen descriptions intersect the query.  For
    rectangular (conjunctive) queries, a candidate whose contribution to the
    query region is covered by the other remaining candidates' complete
    descriptions is dropped, largest block first.  Each returned block id
    comes with the frozen descriptions of the lower-id selected blocks; rows
    matching any of them must be ignored while scanning that block.
    """
    tree = layout.tree
    schema = tree.schema
    frozen_descs = tree.leaf_descriptions()
    candidates = [
        bid
        for bid in range(layout.n_blocks)
        if intersects(frozen_descs[bid], q, schema, tree.registry)
    ]
    qbox = query_box(q, schema)
    if qbox is not None and len(candidates) > 1:
        sizes = layout.assignment.sizes
        selected = set(candidates)
        for bid in sorted(candidates, key=lambda i: (-sizes[i], i)):
            others = [
                _desc_box(layout.complete_descs[k]) for k in selected if k != bid
            ]
            contribution = _box_intersect(_desc_box(layout.complete_descs[bid]), qbox)
            if _box_covered(contribution, others):
                selected.remove(bid)
        candidates = sorted(selected)
    out = []
    for pos, bid in enumerate(candidates):
        lower = tuple(frozen_descs[k] for k in candidates[:pos])
        out.append((bid, lower))
    return out


def scan_query_overlap(layout: OverlapLayout, data: Dataset, q: Query) -> np.ndarray:
    """Row indices satisfying the query, each exactly once: blocks are
    scanned in id order and a tuple matching a lower selected block's
    description is skipped because that block already produced it."""
    schema = layout.tree.schema
    registry = layout.tree.registry
    hits: list[np.ndarray] = []
    for bid, ignore in route_query_overlap(layout, q):
        rows = layout.assignment.block_rows[bid]
        if len(rows) == 0:
            continue
        values = data.rows[rows]
        keep = query_matches(q, values, registry)
        for desc in ignore:
            keep &= ~description_matches(desc, values, schema, registry)
        hits.append(rows[keep])
    if not hits:
        return np.empty(0, dtype=np.intp)
    return np.sort(np.concatenate(hits))


def evaluate_overlap(layout: OverlapLayout, data: Dataset, w: Workload) -> SkipReport:
    """Skip report under routed-and-pruned block selections.  Scanned counts
    include replicas; the access denominator stays the original row count."""
    sizes = layout.assignment.sizes
    per_query_scanned = []
    scans_block = [set() for _ in range(layout.n_blocks)]
    for qi, q in enumerate(w.queries):
        picked = [bid for bid, _ in route_query_overlap(layout, q)]
        per_query_scanned.append(sum(sizes[bid] for bid in picked))
        for bid in picked:
            scans_block[bid].add(qi)
    per_block_skipped = tuple(
        sizes[bid] * (w.n_queries - len(scans_block[bid])) for bid in range(layout.n_blocks)
    )
    return SkipReport(
        n_rows=data.n_rows,
        n_queries=w.n_queries,
        per_block_skipped=per_block_skipped,
        per_query_scanned=tuple(per_query_scanned),
        total_skipped=sum(per_block_skipped),
        access_fraction=Fraction(sum(per_query_scanned), w.n_queries * data.n_rows),
    )


def overlap_to_json(layout: OverlapLayout) -> dict:
    from .tree import desc_to_json

    schema = layout.tree.schema
    n_adv = len(layout.tree.registry)
    return {
        "kind": "overlap",
        "tree": tree_to_json(layout.tree),
        "complete_descs": [desc_to_json(d, schema, n_adv) for d in layout.complete_descs],
        "replica_map": {str(k): v for k, v in layout.replica_map.items()},
        "extra_storage_rows": layout.extra_storage_rows,
    }


def overlap_from_json(
    obj, schema: Schema, registry: tuple[AdvancedCut, ...], data: Dataset
) -> OverlapLayout:
    from .tree import desc_from_json

    tree = tree_from_json(obj["tree"], schema, registry)
    complete = tuple(
        desc_from_json(d, schema, f"complete_descs[{i}]")
        for i, d in enumerate(obj["complete_descs"])
    )
    replica_map = {int(k): int(v) for k, v in obj["replica_map"].items()}
    base = tree.route_rows(data)
    block_rows = {bid: list(rows) for bid, rows in enumerate(base.block_rows)}
    for small in sorted(replica_map):
        receiver = replica_map[small]
        block_rows[receiver] = block_rows[receiver] + block_rows[small]
    assignment = BlockAssignment(
        tuple(np.asarray(sorted(block_rows[bid]), dtype=np.intp) for bid in range(base.n_blocks)),
        data.n_rows,
    )
    return OverlapLayout(
        tree=tree,
        assignment=assignment,
        complete_descs=complete,
        replica_map=replica_map,
        extra_storage_rows=assignment.total_assigned - data.n_rows,
    )


# --- paired trees -----------------------------------------------------------

@dataclass(frozen=True)
class TwoTreeLayout:
    t1: QdTree
    t2: QdTree
    a1: BlockAssignment
    a2: BlockAssignment
    worst_queries: tuple[int, ...]
    tree_choice: tuple[int, ...]
    joint_skipped: int
    iterations: int
    retained_t2: Optional[tuple[int, ...]] = None


def _per_query_skipped(tree: QdTree, assignment: BlockAssignment, data, w: Workload) -> np.ndarray:
    report = evaluate_partitioning(tree, assignment, data, w)
    return data.n_rows - np.asarray(report.per_query_scanned, dtype=np.int64)


def build_two_tree(
    data: Dataset,
    w: Workload,
    cuts: Sequence[Cut],
    cfg: Union[GreedyConfig, RlConfig],
    k: int,
    max_iters: int = 1,
    builder: str = "greedy",
    prune: bool = False,
) -> TwoTreeLayout:
    """Primary tree plus a secondary tree for the K worst-served queries.

    The secondary build credits each query with the better skip total over
    the fixed tree and the tree under construction.  With max_iters > 1 the
    roles alternate; the best pair seen is kept, so the joint total never
    decreases across iterations.  Queries tie-break to the primary tree.
    """
    cuts = tuple(cuts)
    if not 1 <= k <= w.n_queries:
        raise ValueError("k must be within 1..n_queries")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")

    def build(baseline=None):
        if builder == "greedy":
            gcfg = dataclasses.replace(cfg, cuts=cuts)
            return _greedy_build(data, w, gcfg, joint_baseline=baseline)
        if builder == "rl":
            return train(data, w, cuts, cfg).best_tree
        raise ValueError(f"unknown builder {builder!r}")

    def freeze(tree: QdTree):
        assignment = tree.route_rows(data)
        return tree.freeze(assignment, data), assignment

    t1, a1 = freeze(build())
    skip1 = _per_query_skipped(t1, a1, data, w)
    scanned1 = data.n_rows - skip1
    order = sorted(range(w.n_queries), key=lambda qi: (-scanned1[qi], qi))
    worst = tuple(order[:k])

    if builder == "rl":
        # The secondary agent optimizes the worst-served queries directly.
        w2 = Workload(tuple(w.queries[qi] for qi in worst), w.advanced_cuts)
        t2, a2 = freeze(train(data, w2, cuts, cfg).best_tree)
        skip2 = _per_query_skipped(t2, a2, data, w)
        best = (t1, a1, t2, a2, int(np.maximum(skip1, skip2).sum()))
        iterations = 1
    else:
        best = None
        best_joint = int(skip1.sum())  # the primary tree alone
        fixed, fixed_skip = (t1, a1), skip1
        iterations = 0
        for it in range(max_iters):
            other, other_a = freeze(build(baseline=fixed_skip))
            other_skip = _per_query_skipped(other, other_a, data, w)
            joint = int(np.maximum(fixed_skip, other_skip).sum())
            iterations = it + 1
            if it % 2 == 0:
                pair = (fixed[0], fixed[1], other, other_a, joint)
            else:
                pair = (other, other_a, fixed[0], fixed[1], joint)
            if best is None:
                best = pair  # the layout carries a secondary tree regardless
            if joint <= best_joint:
                break
            best, best_joint = pair, joint
            fixed, fixed_skip = (other, other_a), other_skip
    t1, a1, t2, a2, joint_skipped = best

    scan1 = data.n_rows - _per_query_skipped(t1, a1, data, w)
    scan2 = data.n_rows - _per_query_skipped(t2, a2, data, w)

    retained: Optional[tuple[int, ...]] = None
    if prune:
        keep = set()
        for qi in worst:
            keep.update(t2.route_query(w.queries[qi]))
        retained = tuple(sorted(keep))

    choice = []
    for qi in range(w.n_queries):
        use_t2 = scan2[qi] < scan1[qi]
        if use_t2 and retained is not None:
            use_t2 = set(t2.route_query(w.queries[qi])) <= set(retained)
        choice.append(1 if use_t2 else 0)

    return TwoTreeLayout(
        t1=t1,
        t2=t2,
        a1=a1,
        a2=a2,
        worst_queries=worst,
        tree_choice=tuple(choice),
        joint_skipped=joint_skipped,
        iterations=iterations,
        retained_t2=retained,
    )


def evaluate_two_tree(layout: TwoTreeLayout, data: Dataset, w: Workload) -> SkipReport:
    """Per-query scanned counts under each query's chosen tree.  The block
    list concatenates the primary tree's blocks with the secondary's; a block
    counts a query as skipped when that query does not scan it."""
    schema = layout.t1.schema
    n1 = layout.a1.n_blocks
    sizes = list(layout.a1.sizes) + list(layout.a2.sizes)
    scans_block = [set() for _ in range(len(sizes))]
    per_query_scanned = []
    for qi, q in enumerate(w.queries):
        if layout.tree_choice[qi] == 1:
            blocks = [n1 + bid for bid in layout.t2.route_query(q)]
        else:
            blocks = list(layout.t1.route_query(q))
        per_query_scanned.append(sum(sizes[b] for b in blocks))
        for b in blocks:
            scans_block[b].add(qi)
    per_block_skipped = tuple(
        sizes[b] * (w.n_queries - len(scans_block[b])) for b in range(len(sizes))
    )
    return SkipReport(
        n_rows=data.n_rows,
        n_queries=w.n_queries,
        per_block_skipped=per_block_skipped,
        per_query_scanned=tuple(per_query_scanned),
        total_skipped=sum(per_block_skipped),
        access_fraction=Fraction(sum(per_query_scanned), w.n_queries * data.n_rows),
    )


def two_tree_to_json(layout: TwoTreeLayout) -> dict:
    return {
        "kind": "two-tree",
        "t1": tree_to_json(layout.t1),
        "t2": tree_to_json(layout.t2),
        "worst_queries": list(layout.worst_queries),
        "tree_choice": list(layout.tree_choice),
        "joint_skipped": layout.joint_skipped,
        "iterations": layout.iterations,
        "retained_t2": None if layout.retained_t2 is None else list(layout.retained_t2),
    }


def two_tree_from_json(
    obj, schema: Schema, registry: tuple[AdvancedCut, ...], data: Dataset
) -> TwoTreeLayout:
    t1 = tree_from_json(obj["t1"], schema, registry)
    t2 = tree_from_json(obj["t2"], schema, registry)
    a1 = t1.route_rows(data)
    a2 = t2.route_rows(data)
    retained = obj.get("retained_t2")
    return TwoTreeLayout(
        t1=t1,
        t2=t2,
        a1=a1,
        a2=a2,
        worst_queries=tuple(obj["worst_queries"]),
        tree_choice=tuple(obj["tree_choice"]),
        joint_skipped=int(obj["joint_skipped"]),
        iterations=int(obj["iterations"]),
        retained_t2=None if retained is None else tuple(retained),
    )
