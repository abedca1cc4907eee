"""Experiment harness: synthetic inputs, naive baselines, and a small exact
optimizer used to cross-check the builders.

Generators produce (schema, dataset, workload) triples for the benchmark
scenarios; baselines partition rows without looking at the workload; the
oracle exhaustively searches the cut space for the best achievable skip
total on instances small enough to afford it.
"""

from __future__ import annotations

import dataclasses
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

from .model import (
    NUMERIC,
    AdvancedCut,
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
from .rand import substream
from .tree import (
    BlockAssignment,
    SemanticDescription,
    description_from_rows,
    intersects,
)

Cut = Union[UnaryPredicate, AdvancedCut]

GENERATOR_KINDS = ("disjunctive-microbench", "propeller", "uniform", "clustered")
BASELINE_KINDS = ("random", "range")


@dataclasses.dataclass
class GeneratorSpec:
    """Parameters of a synthetic scenario.

    kind "disjunctive-microbench": two numeric columns (cpu, disk) over
    [0, 10000) with one disjunctive range query on cpu and one narrow range
    query on disk.  kind "propeller": a plus-shaped point set -- four arms of
    n_arm points meeting at a shared center -- with one query per arm; the
    center row is the one worth replicating.  kind "uniform": iid columns
    with random conjunctive range queries.  kind "clustered": points around
    random centers, one box query per cluster.
    """

    kind: str
    n_rows: int = 10_000
    n_columns: int = 2
    domain_size: int = 10_000
    n_queries: int = 8
    n_arm: int = 100
    n_clusters: int = 4

    def __post_init__(self) -> None:
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(
                f"unknown generator kind {self.kind!r}; expected one of {GENERATOR_KINDS}"
            )


def _numeric_schema(names: Sequence[str], domain_size: int) -> Schema:
    return Schema(tuple(Column(name, NUMERIC, domain_size) for name in names))


def _range_query(col: int, lo: int, hi: int) -> Query:
    """Conjunctive [lo, hi] query on one column (inclusive bounds)."""
    return Query(
        And(
            (
                Pred(UnaryPredicate(col, ">=", lo)),
                Pred(UnaryPredicate(col, "<=", hi)),
            )
        )
    )


def _microbench(spec: GeneratorSpec, seed: int) -> tuple[Schema, Dataset, Workload]:
    d = 10_000
    schema = _numeric_schema(("cpu", "disk"), d)
    rng = substream(seed, "data")
    rows = rng.integers(0, d, size=(spec.n_rows, 2), dtype=np.int64)
    q_cpu = Query(
        Or(
            (
                Pred(UnaryPredicate(0, "<", d // 10)),
                Pred(UnaryPredicate(0, ">", (9 * d) // 10)),
            )
        )
    )
    q_disk = Query(Pred(UnaryPredicate(1, "<", d // 100)))
    return schema, Dataset(schema, rows), Workload((q_cpu, q_disk))


def _propeller(spec: GeneratorSpec, seed: int) -> tuple[Schema, Dataset, Workload]:
    n = spec.n_arm
    if n < 2:
        raise ValueError("propeller needs n_arm >= 2")
    d = 2 * n + 1
    schema = _numeric_schema(("x", "y"), d)
    center = np.array([[n, n]], dtype=np.int64)
    span = np.arange(1, n + 1, dtype=np.int64)
    up = np.stack([np.full(n, n, dtype=np.int64), n + span], axis=1)
    right = np.stack([n + span, np.full(n, n, dtype=np.int64)], axis=1)
    down = np.stack([np.full(n, n, dtype=np.int64), n - span], axis=1)
    left = np.stack([n - span, np.full(n, n, dtype=np.int64)], axis=1)
    rows = np.concatenate([center, up, right, down, left])
    rows = rows[substream(seed, "data").permutation(len(rows))]

    def arm_query(fixed_col: int, free_col: int, toward_high: bool) -> Query:
        op = ">=" if toward_high else "<="
        return Query(
            And(
                (
                    Pred(UnaryPredicate(fixed_col, ">=", n)),
                    Pred(UnaryPredicate(fixed_col, "<=", n)),
                    Pred(UnaryPredicate(free_col, op, n)),
                )
            )
        )

    w = Workload(
        (
            arm_query(0, 1, True),  # up arm: x = n, y >= n
            arm_query(1, 0, True),  # right arm: y = n, x >= n
            arm_query(0, 1, False),  # down arm: x = n, y <= n
            arm_query(1, 0, False),  # left arm: y = n, x <= n
        )
    )
    return schema, Dataset(schema, rows), w


def _uniform(spec: GeneratorSpec, seed: int) -> tuple[Schema, Dataset, Workload]:
    d = spec.domain_size
    schema = _numeric_schema([f"c{i}" for i in range(spec.n_columns)], d)
    data_rng = substream(seed, "data")
    rows = data_rng.integers(0, d, size=(spec.n_rows, spec.n_columns), dtype=np.int64)
    q_rng = substream(seed, "queries")
    queries = []
    for _ in range(spec.n_queries):
        n_preds = int(q_rng.integers(1, min(2, spec.n_columns) + 1))
        cols = q_rng.choice(spec.n_columns, size=n_preds, replace=False)
        children = []
        for col in sorted(int(c) for c in cols):
            width = int(q_rng.integers(1, max(2, d // 4)))
            lo = int(q_rng.integers(0, d - width))
            children.append(_range_query(col, lo, lo + width - 1).expr)
        queries.append(Query(children[0] if len(children) == 1 else And(tuple(children))))
    return schema, Dataset(schema, rows), Workload(tuple(queries))


def _clustered(spec: GeneratorSpec, seed: int) -> tuple[Schema, Dataset, Workload]:
    d = spec.domain_size
    k = spec.n_clusters
    schema = _numeric_schema([f"c{i}" for i in range(spec.n_columns)], d)
    rng = substream(seed, "data")
    centers = rng.integers(0, d, size=(k, spec.n_columns), dtype=np.int64)
    which = rng.integers(0, k, size=spec.n_rows)
    spread = max(1, d // (8 * k))
    offsets = rng.integers(-spread, spread + 1, size=(spec.n_rows, spec.n_columns))
    rows = np.clip(centers[which] + offsets, 0, d - 1).astype(np.int64)
    q_rng = substream(seed, "queries")
    queries = []
    for i in range(spec.n_queries):
        c = centers[int(q_rng.integers(0, k))]
        children = []
        for col in range(spec.n_columns):
            lo = max(0, int(c[col]) - spread)
            hi = min(d - 1, int(c[col]) + spread)
            children.extend(
                (
                    Pred(UnaryPredicate(col, ">=", lo)),
                    Pred(UnaryPredicate(col, "<=", hi)),
                )
            )
        queries.append(Query(And(tuple(children))))
    return schema, Dataset(schema, rows), Workload(tuple(queries))


def generate(spec: GeneratorSpec, seed: int) -> tuple[Schema, Dataset, Workload]:
    """Deterministic scenario for (spec, seed)."""
    if spec.kind == "disjunctive-microbench":
        return _microbench(spec, seed)
    if spec.kind == "propeller":
        return _propeller(spec, seed)
    if spec.kind == "uniform":
        return _uniform(spec, seed)
    return _clustered(spec, seed)


@dataclasses.dataclass
class BaselineSpec:
    """A workload-oblivious partitioning: "random" chunks a shuffled row
    order, "range" chunks rows sorted by one column."""

    kind: str
    block_size: int
    column: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in BASELINE_KINDS:
            raise ValueError(
                f"unknown baseline kind {self.kind!r}; expected one of {BASELINE_KINDS}"
            )
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.kind == "range" and self.column is None:
            raise ValueError("range baseline needs a column")


def baseline_partition(
    data: Dataset,
    spec: BaselineSpec,
    seed: int = 0,
    registry: tuple[AdvancedCut, ...] = (),
) -> tuple[tuple[SemanticDescription, ...], BlockAssignment]:
    """Partition rows into contiguous chunks of at least block_size and
    describe each chunk from its rows, so baseline layouts are evaluated by
    the same description-intersection rule as tree layouts."""
    schema = data.schema
    n = data.n_rows
    if n == 0:
        raise ValueError("cannot partition an empty dataset")
    if spec.kind == "random":
        order = substream(seed, "baseline").permutation(n)
    else:
        col = schema.index_of(spec.column)
        order = np.argsort(data.rows[:, col], kind="stable")
    n_blocks = max(1, n // spec.block_size)
    chunks = np.array_split(order, n_blocks)
    descs = tuple(
        description_from_rows(schema, registry, data.rows[chunk]) for chunk in chunks
    )
    return descs, BlockAssignment(tuple(chunks), n)


class TooLarge(ValueError):
    """The instance exceeds what the exhaustive optimizer will attempt."""


@dataclasses.dataclass(frozen=True)
class OracleResult:
    c_opt: int
    access_fraction: Fraction
    n_leaves: int
    block_rows: tuple
    states: int


def oracle_opt(
    data: Dataset,
    w: Workload,
    cuts: Sequence[Cut],
    min_block_size: int,
    max_leaves: Optional[int] = None,
    max_rows: int = 5_000,
    max_cuts: int = 8,
    max_states: int = 200_000,
) -> OracleResult:
    """Best skip total over every tree buildable from `cuts` whose blocks all
    hold at least min_block_size rows (at most max_leaves blocks if given).

    Blocks are scored independently -- a leaf's skip count depends only on
    its row set -- so the search memoizes subproblems keyed by (row set,
    remaining leaf budget) instead of enumerating whole trees.  Raises
    TooLarge beyond the configured instance limits.
    """
    n = data.n_rows
    b = min_block_size
    if n > max_rows:
        raise TooLarge(f"{n} rows > limit {max_rows}")
    if len(cuts) > max_cuts:
        raise TooLarge(f"{len(cuts)} cuts > limit {max_cuts}")
    if b < 1:
        raise ValueError("min_block_size must be >= 1")
    schema, registry = data.schema, w.advanced_cuts
    cut_hits = [c.matches(data.rows) for c in cuts]
    budget_cap = max(1, n // b) if max_leaves is None else max(1, max_leaves)

    merit_memo: dict[bytes, int] = {}

    def leaf_merit(rows_idx: np.ndarray) -> int:
        key = rows_idx.tobytes()
        got = merit_memo.get(key)
        if got is None:
            desc = description_from_rows(schema, registry, data.rows[rows_idx])
            skipped = sum(
                1 for q in w.queries if not intersects(desc, q, schema, registry)
            )
            got = merit_memo[key] = len(rows_idx) * skipped
        return got

    # memo value: (best merit, cut index or None, left budget or None)
    memo: dict[tuple[bytes, int], tuple[int, Optional[int], Optional[int]]] = {}

    def opt(rows_idx: np.ndarray, budget: int) -> tuple[int, Optional[int], Optional[int]]:
        budget = max(1, min(budget, len(rows_idx) // b))
        key = (rows_idx.tobytes(), budget)
        got = memo.get(key)
        if got is not None:
            return got
        if len(memo) > max_states:
            raise TooLarge(f"more than {max_states} distinct subproblems")
        best = (leaf_merit(rows_idx), None, None)
        if budget >= 2 and len(rows_idx) >= 2 * b:
            for ci, hits in enumerate(cut_hits):
                sel = hits[rows_idx]
                left, right = rows_idx[sel], rows_idx[~sel]
                if len(left) < b or len(right) < b:
                    continue
                for k1 in range(1, budget):
                    v = opt(left, k1)[0] + opt(right, budget - k1)[0]
                    if v > best[0]:
                        best = (v, ci, k1)
        memo[key] = best
        return best

    all_rows = np.arange(n, dtype=np.intp)
    c_opt = opt(all_rows, budget_cap)[0]

    blocks: list[np.ndarray] = []

    def collect(rows_idx: np.ndarray, budget: int) -> None:
        budget = max(1, min(budget, len(rows_idx) // b))
        _, ci, k1 = memo[(rows_idx.tobytes(), budget)]
        if ci is None:
            blocks.append(rows_idx)
            return
        sel = cut_hits[ci][rows_idx]
        collect(rows_idx[sel], k1)
        collect(rows_idx[~sel], budget - k1)

    collect(all_rows, budget_cap)
    pairs = n * w.n_queries
    access = Fraction(pairs - c_opt, pairs) if pairs else Fraction(0)
    return OracleResult(
        c_opt=c_opt,
        access_fraction=access,
        n_leaves=len(blocks),
        block_rows=tuple(blocks),
        states=len(memo),
    )
