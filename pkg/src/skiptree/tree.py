"""Query-data routing trees.

A routing tree is a binary tree whose internal nodes carry cuts.  The left
child holds rows satisfying the cut, the right child the rest.  Leaves are
data blocks.  Every node keeps a semantic description of the rows it may
contain: one half-open interval per numeric column, one bit mask per
categorical column (bit k set means value k may be present), and one bit per
registered advanced cut (0 means definitely no satisfying row below).
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Union

import numpy as np

from .model import (
    AdvancedCut,
    Cut,
    CATEGORICAL,
    NUMERIC,
    And,
    AdvRef,
    Expr,
    Or,
    ParseError,
    Pred,
    Query,
    Schema,
    UnaryPredicate,
    advanced_cut_to_json,
    pred_from_json,
    pred_to_json,
)


class DegenerateCut(ValueError):
    """Cut would produce a child that is empty by construction."""


class NotALeaf(ValueError):
    pass


class AssignmentMismatch(ValueError):
    """Block assignment does not line up with the tree's leaves."""


_NEGATED_OP = {"<": ">=", "<=": ">", ">": "<=", ">=": "<"}
_MIRRORED_OP = {"<": ">", "<=": ">=", ">": "<", ">=": "<=", "=": "="}


@dataclass(frozen=True)
class SemanticDescription:
    """Per-node summary: numeric ranges, categorical masks, advanced-cut bits."""

    ranges: tuple[tuple[int, int], ...]
    masks: tuple[int, ...]
    adv: int

    @classmethod
    def full(cls, schema: Schema, n_advanced: int) -> "SemanticDescription":
        ranges = tuple((0, schema.columns[i].domain_size) for i in schema.numeric_indices)
        masks = tuple(
            (1 << schema.columns[i].domain_size) - 1 for i in schema.categorical_indices
        )
        return cls(ranges, masks, (1 << n_advanced) - 1)

    def contains(self, other: "SemanticDescription") -> bool:
        """True when every row admitted by `other` is admitted by self."""
        for (alo, ahi), (blo, bhi) in zip(self.ranges, other.ranges):
            if blo >= bhi:
                continue
            if blo < alo or bhi > ahi:
                return False
        for am, bm in zip(self.masks, other.masks):
            if bm & ~am:
                return False
        return not (other.adv & ~self.adv)

    def is_empty(self) -> bool:
        return any(lo >= hi for lo, hi in self.ranges) or any(m == 0 for m in self.masks)


def mask_to_hex(mask: int, n_bits: int) -> str:
    """Little-endian-by-bit-index hex encoding (bit k = value k)."""
    n_bytes = max(1, (n_bits + 7) // 8)
    return mask.to_bytes(n_bytes, "little").hex()


def mask_from_hex(text: str) -> int:
    return int.from_bytes(bytes.fromhex(text), "little")


def apply_cut(
    desc: SemanticDescription, cut: Cut, schema: Schema
) -> tuple[SemanticDescription, SemanticDescription]:
    """Descriptions of the two children induced by a cut.

    The left child keeps only what can satisfy the cut; the right child keeps
    only what can fail it.  Raises DegenerateCut when either side is empty on
    the cut's own column (or, for an advanced cut, when the parent already
    rules the cut out).
    """
    if isinstance(cut, AdvancedCut):
        if not (desc.adv >> cut.index) & 1:
            raise DegenerateCut(f"advanced cut {cut.index} already excluded")
        right = dataclasses.replace(desc, adv=desc.adv & ~(1 << cut.index))
        return desc, right

    if cut.op in ("=", "in"):
        pos = schema.categorical_pos[cut.col]
        ind = 0
        for v in cut.value_set():
            ind |= 1 << v
        left_mask = desc.masks[pos] & ind
        right_mask = desc.masks[pos] & ~ind
        if left_mask == 0 or right_mask == 0:
            raise DegenerateCut(f"membership cut on column {cut.col} leaves an empty side")
        masks = list(desc.masks)
        masks[pos] = left_mask
        left = dataclasses.replace(desc, masks=tuple(masks))
        masks = list(desc.masks)
        masks[pos] = right_mask
        right = dataclasses.replace(desc, masks=tuple(masks))
        return left, right

    pos = schema.numeric_pos[cut.col]
    lo, hi = desc.ranges[pos]
    a, b = cut.satisfying_interval(schema)
    left_iv = (max(lo, a), min(hi, b))
    if a == 0:  # satisfying values are [0, b): the complement sits above
        right_iv = (max(lo, b), hi)
    else:  # satisfying values are [a, dom): the complement sits below
        right_iv = (lo, min(hi, a))
    if left_iv[0] >= left_iv[1] or right_iv[0] >= right_iv[1]:
        raise DegenerateCut(f"range cut on column {cut.col} leaves an empty side")
    ranges = list(desc.ranges)
    ranges[pos] = left_iv
    left = dataclasses.replace(desc, ranges=tuple(ranges))
    ranges = list(desc.ranges)
    ranges[pos] = right_iv
    right = dataclasses.replace(desc, ranges=tuple(ranges))
    return left, right


def description_from_rows(
    schema: Schema,
    registry: tuple[AdvancedCut, ...],
    values: np.ndarray,
    base: Optional[SemanticDescription] = None,
) -> SemanticDescription:
    """Tightest description of the given rows: min/max ranges, observed
    categorical values, observed advanced-cut satisfaction.

    An empty row set collapses to an empty description anchored at the base's
    lower bounds (all masks and advanced bits zero).
    """
    if values.shape[0] == 0:
        if base is not None:
            ranges = tuple((lo, lo) for lo, _ in base.ranges)
        else:
            ranges = tuple((0, 0) for _ in schema.numeric_indices)
        return SemanticDescription(ranges, tuple(0 for _ in schema.categorical_indices), 0)
    ranges = []
    for i in schema.numeric_indices:
        col = values[:, i]
        ranges.append((int(col.min()), int(col.max()) + 1))
    masks = []
    for i in schema.categorical_indices:
        m = 0
        for v in np.unique(values[:, i]):
            m |= 1 << int(v)
        masks.append(m)
    adv = 0
    for ac in registry:
        if bool(ac.matches(values).any()):
            adv |= 1 << ac.index
    return SemanticDescription(tuple(ranges), tuple(masks), adv)


def row_matches_description(
    desc: SemanticDescription,
    row,
    schema: Schema,
    registry: tuple[AdvancedCut, ...] = (),
) -> bool:
    return bool(
        description_matches(desc, np.asarray(row, dtype=np.int64)[None, :], schema, registry)[0]
    )


def description_matches(
    desc: SemanticDescription,
    rows: np.ndarray,
    schema: Schema,
    registry: tuple[AdvancedCut, ...] = (),
) -> np.ndarray:
    """Vectorized membership test of rows against a description.

    A zero advanced bit is a guarantee, so rows satisfying that cut do not
    match; a set bit constrains nothing.
    """
    out = np.ones(rows.shape[0], dtype=bool)
    for pos, i in enumerate(schema.numeric_indices):
        lo, hi = desc.ranges[pos]
        out &= (rows[:, i] >= lo) & (rows[:, i] < hi)
    for pos, i in enumerate(schema.categorical_indices):
        mask = desc.masks[pos]
        allowed = [v for v in range(schema.columns[i].domain_size) if (mask >> v) & 1]
        out &= np.isin(rows[:, i], allowed)
    for ac in registry:
        if not (desc.adv >> ac.index) & 1:
            out &= ~ac.matches(rows)
    return out


def intersects(
    desc: SemanticDescription,
    q: Query,
    schema: Schema,
    registry: tuple[AdvancedCut, ...] = (),
) -> bool:
    """Conservative test: can any row matching `desc` satisfy the query?

    And-nodes require all children to intersect, or-nodes any child, so false
    positives are possible but a False answer is a safe skip.
    """

    def pred_hits(p: UnaryPredicate) -> bool:
        if p.op in ("=", "in"):
            pos = schema.categorical_pos[p.col]
            ind = 0
            for v in p.value_set():
                ind |= 1 << v
            return bool(desc.masks[pos] & ind)
        pos = schema.numeric_pos[p.col]
        lo, hi = desc.ranges[pos]
        a, b = p.satisfying_interval(schema)
        return max(lo, a) < min(hi, b)

    def ref_hits(ref: AdvRef) -> bool:
        if not ref.negated:
            return bool((desc.adv >> ref.index) & 1)
        # A negated reference can only be ruled out when the negation itself
        # is a registered cut whose bit is cleared.
        ac = registry[ref.index]
        neg_op = _NEGATED_OP.get(ac.op)
        if neg_op is None:
            return True
        for other in registry:
            same = other.left == ac.left and other.op == neg_op and other.right == ac.right
            mirrored = (
                other.left == ac.right
                and other.op == _MIRRORED_OP[neg_op]
                and other.right == ac.left
            )
            if same or mirrored:
                return bool((desc.adv >> other.index) & 1)
        return True

    def walk(e: Expr) -> bool:
        if isinstance(e, Pred):
            return pred_hits(e.pred)
        if isinstance(e, AdvRef):
            return ref_hits(e)
        if isinstance(e, And):
            return all(walk(c) for c in e.children)
        return any(walk(c) for c in e.children)

    return walk(q.expr)


@dataclass(frozen=True)
class QdTreeNode:
    id: int
    desc: SemanticDescription
    cut: Optional[Cut] = None
    left: Optional[int] = None
    right: Optional[int] = None
    block_id: Optional[int] = None

    @property
    def is_leaf(self) -> bool:
        return self.cut is None


@dataclass(frozen=True)
class BlockAssignment:
    """Row indices per block id.  In overlap mode a row may appear in
    several blocks; otherwise blocks partition the dataset."""

    block_rows: tuple
    n_rows: int

    def __post_init__(self) -> None:
        arrays = tuple(np.sort(np.asarray(a, dtype=np.intp)) for a in self.block_rows)
        object.__setattr__(self, "block_rows", arrays)

    @property
    def n_blocks(self) -> int:
        return len(self.block_rows)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(a) for a in self.block_rows)

    @property
    def total_assigned(self) -> int:
        return sum(self.sizes)

    def is_partition(self) -> bool:
        if self.total_assigned != self.n_rows:
            return False
        merged = np.concatenate(self.block_rows) if self.block_rows else np.empty(0, dtype=np.intp)
        return bool(np.array_equal(np.sort(merged), np.arange(self.n_rows)))


@dataclass(frozen=True)
class QdTree:
    schema: Schema
    registry: tuple[AdvancedCut, ...]
    nodes: dict
    root_id: int
    frozen: bool = False
    log: tuple = ()

    @classmethod
    def build_root(cls, schema: Schema, registry: tuple[AdvancedCut, ...] = ()) -> "QdTree":
        root = QdTreeNode(0, SemanticDescription.full(schema, len(registry)), block_id=0)
        return cls(schema, tuple(registry), {0: root}, 0)

    def node(self, node_id: int) -> QdTreeNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise KeyError(f"no node {node_id}") from None

    def leaves(self) -> list[QdTreeNode]:
        """Leaves in left-to-right order; positions equal block ids."""
        out: list[QdTreeNode] = []
        stack = [self.root_id]
        while stack:
            n = self.nodes[stack.pop()]
            if n.is_leaf:
                out.append(n)
            else:
                stack.append(n.right)
                stack.append(n.left)
        return out

    @property
    def n_leaves(self) -> int:
        return sum(1 for n in self.nodes.values() if n.is_leaf)

    def leaf_descriptions(self) -> tuple[SemanticDescription, ...]:
        return tuple(n.desc for n in self.leaves())

    def depths(self) -> dict[int, int]:
        out = {self.root_id: 0}
        stack = [self.root_id]
        while stack:
            n = self.nodes[stack.pop()]
            if not n.is_leaf:
                out[n.left] = out[n.id] + 1
                out[n.right] = out[n.id] + 1
                stack.extend((n.left, n.right))
        return out

    def parents(self) -> dict[int, int]:
        return {
            child: n.id
            for n in self.nodes.values()
            if not n.is_leaf
            for child in (n.left, n.right)
        }

    def path_cuts(self, node_id: int) -> list[tuple[Cut, bool]]:
        """(cut, took_left) pairs along the root-to-node path."""
        parent = self.parents()
        steps: list[tuple[Cut, bool]] = []
        cur = node_id
        while cur != self.root_id:
            p = parent[cur]
            pn = self.nodes[p]
            steps.append((pn.cut, pn.left == cur))
            cur = p
        steps.reverse()
        return steps

    def split(self, node_id: int, cut: Cut) -> "QdTree":
        """New tree with `node_id` split by `cut`; block ids are renumbered
        densely left-to-right."""
        if self.frozen:
            raise ValueError("cannot split a frozen tree")
        node = self.node(node_id)
        if not node.is_leaf:
            raise NotALeaf(f"node {node_id} is already split")
        left_desc, right_desc = apply_cut(node.desc, cut, self.schema)
        next_id = max(self.nodes) + 1
        nodes = dict(self.nodes)
        nodes[node_id] = dataclasses.replace(
            node, cut=cut, left=next_id, right=next_id + 1, block_id=None
        )
        nodes[next_id] = QdTreeNode(next_id, left_desc)
        nodes[next_id + 1] = QdTreeNode(next_id + 1, right_desc)
        tree = QdTree(
            self.schema,
            self.registry,
            nodes,
            self.root_id,
            False,
            self.log + ((node_id, cut),),
        )
        return tree._renumber_blocks()

    def _renumber_blocks(self) -> "QdTree":
        nodes = dict(self.nodes)
        for bid, leaf in enumerate(self.leaves()):
            if leaf.block_id != bid:
                nodes[leaf.id] = dataclasses.replace(leaf, block_id=bid)
        return dataclasses.replace(self, nodes=nodes)

    def with_leaf_descriptions(self, descs: dict[int, SemanticDescription]) -> "QdTree":
        """Replace selected leaf descriptions (used for overlap widening)."""
        nodes = dict(self.nodes)
        for node_id, desc in descs.items():
            node = self.node(node_id)
            if not node.is_leaf:
                raise NotALeaf(f"node {node_id} is not a leaf")
            nodes[node_id] = dataclasses.replace(node, desc=desc)
        return dataclasses.replace(self, nodes=nodes)

    def unsplit(self, node_id: int) -> "QdTree":
        """Collapse the subtree under node_id back into a single leaf."""
        if self.frozen:
            raise ValueError("cannot unsplit a frozen tree")
        node = self.node(node_id)
        if node.is_leaf:
            raise ValueError(f"node {node_id} is already a leaf")
        removed = set()
        stack = [node.left, node.right]
        while stack:
            cur = self.nodes[stack.pop()]
            removed.add(cur.id)
            if not cur.is_leaf:
                stack.extend((cur.left, cur.right))
        nodes = {i: n for i, n in self.nodes.items() if i not in removed}
        nodes[node_id] = dataclasses.replace(node, cut=None, left=None, right=None, block_id=0)
        log = tuple(
            (nid, cut) for nid, cut in self.log if nid != node_id and nid not in removed
        )
        tree = dataclasses.replace(self, nodes=nodes, log=log)
        return tree._renumber_blocks()

    def route_rows(self, data, n_workers: int = 1) -> BlockAssignment:
        """Assign every row to the unique leaf whose path predicates it
        satisfies.  The result does not depend on batching."""
        rows = data.rows
        if data.schema != self.schema:
            raise ValueError("dataset schema does not match the tree")
        n = rows.shape[0]
        leaf_order = {leaf.id: leaf.block_id for leaf in self.leaves()}
        buckets: dict[int, list[np.ndarray]] = {b: [] for b in leaf_order.values()}

        def route_chunk(idx: np.ndarray) -> list[tuple[int, np.ndarray]]:
            out = []
            stack = [(self.root_id, idx)]
            while stack:
                node_id, ids = stack.pop()
                node = self.nodes[node_id]
                if node.is_leaf:
                    out.append((node.block_id, ids))
                    continue
                hit = node.cut.matches(rows[ids])
                stack.append((node.left, ids[hit]))
                stack.append((node.right, ids[~hit]))
            return out

        all_idx = np.arange(n, dtype=np.intp)
        if n_workers <= 1 or n < 2 * n_workers:
            parts = [route_chunk(all_idx)]
        else:
            chunks = np.array_split(all_idx, n_workers)
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                parts = list(pool.map(route_chunk, chunks))
        for part in parts:
            for block_id, ids in part:
                buckets[block_id].append(ids)
        block_rows = tuple(
            np.sort(np.concatenate(buckets[b])) if buckets[b] else np.empty(0, dtype=np.intp)
            for b in range(len(buckets))
        )
        return BlockAssignment(block_rows, n)

    def freeze(self, assignment: BlockAssignment, data) -> "QdTree":
        """Tighten every leaf description to its actual rows and mark the
        tree frozen.  Frozen descriptions nest inside the unfrozen ones."""
        leaves = self.leaves()
        if assignment.n_blocks != len(leaves):
            raise AssignmentMismatch(
                f"{assignment.n_blocks} blocks for {len(leaves)} leaves"
            )
        if assignment.block_rows and data.n_rows:
            for a in assignment.block_rows:
                if len(a) and (a[0] < 0 or a[-1] >= data.n_rows):
                    raise AssignmentMismatch("row index out of range")
        nodes = dict(self.nodes)
        for leaf in leaves:
            rows = data.rows[assignment.block_rows[leaf.block_id]]
            tight = description_from_rows(self.schema, self.registry, rows, base=leaf.desc)
            nodes[leaf.id] = dataclasses.replace(leaf, desc=tight)
        return dataclasses.replace(self, nodes=nodes, frozen=True)

    def route_query(self, q: Query) -> list[int]:
        """Block ids a query must scan, by leaf-description intersection."""
        if not self.frozen:
            raise ValueError("route_query requires a frozen tree")
        return sorted(
            leaf.block_id
            for leaf in self.leaves()
            if intersects(leaf.desc, q, self.schema, self.registry)
        )


# --- JSON round trip ------------------------------------------------------

def cut_to_json(cut: Cut) -> dict:
    if isinstance(cut, AdvancedCut):
        return {"adv": cut.index}
    return {"pred": pred_to_json(cut)}


def cut_from_json(obj, registry: tuple[AdvancedCut, ...], where: str) -> Cut:
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: cut must be an object")
    if "adv" in obj:
        idx = int(obj["adv"])
        if not 0 <= idx < len(registry):
            raise ParseError(f"{where}: advanced cut {idx} not registered")
        return registry[idx]
    if "pred" in obj:
        return pred_from_json(obj["pred"], where)
    raise ParseError(f"{where}: expected 'pred' or 'adv'")


def desc_to_json(desc: SemanticDescription, schema: Schema, n_advanced: int) -> dict:
    masks = {
        schema.columns[i].name: mask_to_hex(desc.masks[pos], schema.columns[i].domain_size)
        for pos, i in enumerate(schema.categorical_indices)
    }
    return {
        "range": [[lo, hi] for lo, hi in desc.ranges],
        "masks": masks,
        "adv": mask_to_hex(desc.adv, max(1, n_advanced)),
    }


def desc_from_json(obj, schema: Schema, where: str) -> SemanticDescription:
    try:
        ranges = tuple((int(lo), int(hi)) for lo, hi in obj["range"])
        if len(ranges) != len(schema.numeric_indices):
            raise ParseError(f"{where}: expected {len(schema.numeric_indices)} ranges")
        masks = tuple(
            mask_from_hex(obj["masks"][schema.columns[i].name])
            for i in schema.categorical_indices
        )
        adv = mask_from_hex(obj["adv"])
        return SemanticDescription(ranges, masks, adv)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{where}: bad description: {exc}") from exc


def tree_to_json(tree: QdTree) -> dict:
    nodes = []
    for node_id in sorted(tree.nodes):
        n = tree.nodes[node_id]
        nodes.append(
            {
                "id": n.id,
                "cut": None if n.cut is None else cut_to_json(n.cut),
                "left": n.left,
                "right": n.right,
                "block_id": n.block_id,
                "desc": desc_to_json(n.desc, tree.schema, len(tree.registry)),
            }
        )
    return {
        "frozen": tree.frozen,
        "root": tree.root_id,
        "nodes": nodes,
        "log": [[node_id, cut_to_json(cut)] for node_id, cut in tree.log],
    }


def tree_from_json(obj, schema: Schema, registry: tuple[AdvancedCut, ...] = ()) -> QdTree:
    if not isinstance(obj, dict):
        raise ParseError("tree JSON must be an object")
    try:
        raw_nodes = obj["nodes"]
        root_id = int(obj["root"])
        frozen = bool(obj["frozen"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"tree JSON missing field: {exc}") from exc
    nodes: dict[int, QdTreeNode] = {}
    for i, raw in enumerate(raw_nodes):
        where = f"nodes[{i}]"
        try:
            node_id = int(raw["id"])
            cut = None if raw["cut"] is None else cut_from_json(raw["cut"], registry, where)
            left = None if raw["left"] is None else int(raw["left"])
            right = None if raw["right"] is None else int(raw["right"])
            block_id = None if raw["block_id"] is None else int(raw["block_id"])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"{where}: {exc}") from exc
        if node_id in nodes:
            raise ParseError(f"{where}: duplicate node id {node_id}")
        if (cut is None) != (left is None and right is None):
            raise ParseError(f"{where}: node must have a cut iff it has children")
        if (cut is None) != (block_id is not None):
            raise ParseError(f"{where}: leaf nodes and only leaf nodes carry a block id")
        desc = desc_from_json(raw["desc"], schema, where)
        nodes[node_id] = QdTreeNode(node_id, desc, cut, left, right, block_id)
    if root_id not in nodes:
        raise ParseError(f"root {root_id} not among nodes")
    for node_id, n in nodes.items():
        if not n.is_leaf and (n.left not in nodes or n.right not in nodes):
            raise ParseError(f"nodes[{node_id}]: dangling child reference")
    log = []
    for j, entry in enumerate(obj.get("log", [])):
        try:
            node_id, raw_cut = entry
        except (TypeError, ValueError) as exc:
            raise ParseError(f"log[{j}]: {exc}") from exc
        log.append((int(node_id), cut_from_json(raw_cut, registry, f"log[{j}]")))
    tree = QdTree(schema, tuple(registry), nodes, root_id, frozen, tuple(log))
    expected = [leaf.block_id for leaf in tree.leaves()]
    if expected != list(range(len(expected))):
        raise ParseError("leaf block ids must be dense left-to-right")
    return tree


def serialize(tree: QdTree) -> bytes:
    return json.dumps(tree_to_json(tree)).encode()


def deserialize(data, schema: Schema, registry: tuple[AdvancedCut, ...] = ()) -> QdTree:
    if isinstance(data, bytes):
        data = data.decode()
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(f"tree JSON at char {exc.pos}: {exc.msg}") from exc
    return tree_from_json(obj, schema, registry)
