"""Scenario generators, oblivious baselines, and the exhaustive optimizer."""

from fractions import Fraction

import numpy as np
import pytest

from helpers import ref_query_rows
from skiptree.harness import (
    BaselineSpec,
    GeneratorSpec,
    OracleResult,
    TooLarge,
    baseline_partition,
    generate,
    oracle_opt,
)
from skiptree.greedy import GreedyConfig, greedy_build
from skiptree.metrics import evaluate_blocks, evaluate_partitioning
from skiptree.model import (
    And,
    Column,
    Dataset,
    NUMERIC,
    Pred,
    Query,
    Schema,
    UnaryPredicate,
    Workload,
    extract_cuts,
)
from skiptree.tree import row_matches_description


def all_cuts(w):
    preds, advanced = extract_cuts(w)
    return preds + advanced


class TestGenerators:
    def test_every_kind_is_deterministic_per_seed(self):
        for kind in ("disjunctive-microbench", "propeller", "uniform", "clustered"):
            spec = GeneratorSpec(kind, n_rows=500, n_arm=30)
            _, d1, w1 = generate(spec, seed=5)
            _, d2, w2 = generate(spec, seed=5)
            assert np.array_equal(d1.rows, d2.rows)
            assert w1.queries == w2.queries
            _, d3, _ = generate(spec, seed=6)
            assert not np.array_equal(d1.rows, d3.rows)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="generator kind"):
            GeneratorSpec("zipfian")

    def test_microbench_selectivities(self):
        schema, data, w = generate(GeneratorSpec("disjunctive-microbench"), seed=0)
        assert data.rows.shape == (10_000, 2)
        assert [c.name for c in schema.columns] == ["cpu", "disk"]
        wide = len(ref_query_rows(w.queries[0], data.rows, ())) / data.n_rows
        narrow = len(ref_query_rows(w.queries[1], data.rows, ())) / data.n_rows
        assert abs(wide - 0.20) < 0.02   # cpu < 1000 or cpu > 9000
        assert abs(narrow - 0.01) < 0.005  # disk < 100

    def test_propeller_geometry(self):
        n = 30
        schema, data, w = generate(GeneratorSpec("propeller", n_arm=n), seed=2)
        assert data.n_rows == 4 * n + 1
        assert all(c.domain_size == 2 * n + 1 for c in schema.columns)
        rows = {tuple(r) for r in data.rows.tolist()}
        assert (n, n) in rows  # shared center
        assert len(rows) == data.n_rows  # no duplicate points
        on_axes = sum(1 for (x, y) in rows if x == n or y == n)
        assert on_axes == data.n_rows  # everything lies on the two axes
        for q in w.queries:
            assert len(ref_query_rows(q, data.rows, ())) == n + 1

    def test_uniform_and_clustered_shapes(self):
        spec = GeneratorSpec("uniform", n_rows=300, n_columns=3, domain_size=50, n_queries=5)
        schema, data, w = generate(spec, seed=1)
        assert data.rows.shape == (300, 3)
        assert data.rows.max() < 50
        assert w.n_queries == 5

        spec = GeneratorSpec("clustered", n_rows=300, n_columns=2, domain_size=100, n_clusters=3)
        schema, data, w = generate(spec, seed=1)
        assert data.rows.shape == (300, 2)
        # clustered queries hit their own cluster: noticeably selective
        for q in w.queries:
            assert len(ref_query_rows(q, data.rows, ())) < data.n_rows


class TestBaselines:
    def small_scenario(self):
        schema, data, w = generate(
            GeneratorSpec("uniform", n_rows=230, n_columns=2, domain_size=40, n_queries=4),
            seed=3,
        )
        return schema, data, w

    def test_random_chunks_partition_all_rows(self):
        schema, data, w = self.small_scenario()
        descs, assignment = baseline_partition(data, BaselineSpec("random", 50), seed=9)
        assert assignment.is_partition()
        assert assignment.n_blocks == 230 // 50
        assert all(size >= 50 for size in assignment.sizes)
        for desc, rows_idx in zip(descs, assignment.block_rows):
            for r in rows_idx:
                assert row_matches_description(desc, data.rows[r], schema, ())

    def test_random_is_seeded(self):
        schema, data, w = self.small_scenario()
        _, a1 = baseline_partition(data, BaselineSpec("random", 50), seed=9)
        _, a2 = baseline_partition(data, BaselineSpec("random", 50), seed=9)
        _, a3 = baseline_partition(data, BaselineSpec("random", 50), seed=10)
        assert all(np.array_equal(x, y) for x, y in zip(a1.block_rows, a2.block_rows))
        assert any(
            not np.array_equal(x, y) for x, y in zip(a1.block_rows, a3.block_rows)
        )

    def test_range_chunks_are_sorted_runs(self):
        schema, data, w = self.small_scenario()
        descs, assignment = baseline_partition(
            data, BaselineSpec("range", 40, column="c1")
        )
        col = data.rows[:, 1]
        highs = [col[idx].max() for idx in assignment.block_rows]
        lows = [col[idx].min() for idx in assignment.block_rows]
        for prev_hi, next_lo in zip(highs, lows[1:]):
            assert prev_hi <= next_lo

    def test_range_beats_random_on_its_own_column(self):
        # Sorting by the only queried column gives narrow per-block ranges,
        # so it must skip at least as much as random chunking.
        schema = Schema((Column("v", NUMERIC, 1000),))
        rng = np.random.default_rng(4)
        data = Dataset(schema, rng.integers(0, 1000, size=(400, 1), dtype=np.int64))
        w = Workload(
            tuple(
                Query(And((Pred(UnaryPredicate(0, ">=", lo)), Pred(UnaryPredicate(0, "<=", lo + 49)))))
                for lo in (0, 250, 500, 900)
            )
        )
        reports = {}
        for spec in (BaselineSpec("random", 50), BaselineSpec("range", 50, column="v")):
            descs, assignment = baseline_partition(data, spec, seed=1)
            reports[spec.kind] = evaluate_blocks(
                descs, assignment.sizes, w, schema, data.n_rows
            )
        assert reports["range"].access_fraction <= reports["random"].access_fraction

    def test_validation(self):
        schema, data, w = self.small_scenario()
        with pytest.raises(ValueError, match="baseline kind"):
            BaselineSpec("hash", 50)
        with pytest.raises(ValueError, match="column"):
            BaselineSpec("range", 50)
        with pytest.raises(ValueError, match="block_size"):
            BaselineSpec("random", 0)
        empty = Dataset(schema, np.empty((0, 2), dtype=np.int64))
        with pytest.raises(ValueError, match="empty"):
            baseline_partition(empty, BaselineSpec("random", 50))


def brute_force_best(rows, cut_masks, query_boxes, b, budget):
    """Independent exhaustive search over recursive binary partitions.

    Trees are enumerated directly over row masks; a block's skip count comes
    from interval reasoning alone: a conjunctive box query cannot touch a
    block when, on some column, the block's observed [min, max] misses the
    query's [lo, hi].  No layout-engine code is involved.
    """

    def merit(mask):
        size = int(mask.sum())
        vals = rows[mask]
        skipped = 0
        for box in query_boxes:
            disjoint = False
            for col, (lo, hi) in box.items():
                cmin, cmax = int(vals[:, col].min()), int(vals[:, col].max())
                if cmax < lo or cmin > hi:
                    disjoint = True
                    break
            if disjoint:
                skipped += 1
        return size * skipped

    def best(mask, budget):
        out = merit(mask)
        if budget < 2:
            return out
        for cm in cut_masks:
            left = mask & cm
            right = mask & ~cm
            if left.sum() < b or right.sum() < b:
                continue
            for k1 in range(1, budget):
                out = max(out, best(left, k1) + best(right, budget - k1))
        return out

    return best(np.ones(len(rows), dtype=bool), budget)


def interval_of(pred, domain):
    """Inclusive satisfying interval of a range predicate, by hand."""
    if pred.op == "<":
        return (0, pred.literal - 1)
    if pred.op == "<=":
        return (0, pred.literal)
    if pred.op == ">":
        return (pred.literal + 1, domain - 1)
    return (pred.literal, domain - 1)


def boxes_of(w, schema):
    out = []
    for q in w.queries:
        box = {}
        preds = [q.expr.pred] if isinstance(q.expr, Pred) else [c.pred for c in q.expr.children]
        for p in preds:
            lo, hi = interval_of(p, schema.columns[p.col].domain_size)
            cur = box.get(p.col, (0, schema.columns[p.col].domain_size - 1))
            box[p.col] = (max(cur[0], lo), min(cur[1], hi))
        out.append(box)
    return out


class TestOracle:
    def test_downscaled_disjunction_scenario_matches_brute_force(self):
        schema, data, w = generate(
            GeneratorSpec("disjunctive-microbench", n_rows=2000), seed=7
        )
        cpu, disk = data.rows[:, 0], data.rows[:, 1]
        cut_masks = [cpu < 1000, cpu > 9000, disk < 100]
        # The disjunctive query cannot touch a block whose cpu values sit
        # entirely inside (1000, 9000]; for brute force, express it as the
        # complement check done by hand.
        def merit(mask):
            vals_cpu, vals_disk = cpu[mask], disk[mask]
            q_wide = vals_cpu.min() < 1000 or vals_cpu.max() > 9000
            q_narrow = vals_disk.min() < 100
            return int(mask.sum()) * ((not q_wide) + (not q_narrow))

        def best(mask, budget):
            out = merit(mask)
            if budget < 2:
                return out
            for cm in cut_masks:
                left, right = mask & cm, mask & ~cm
                if left.sum() < 10 or right.sum() < 10:
                    continue
                for k1 in range(1, budget):
                    out = max(out, best(left, k1) + best(right, budget - k1))
            return out

        preds, _ = extract_cuts(w)
        for max_leaves in (2, 3, 4):
            expected = best(np.ones(2000, dtype=bool), max_leaves)
            result = oracle_opt(data, w, preds, 10, max_leaves=max_leaves)
            assert result.c_opt == expected
            assert result.n_leaves <= max_leaves
            pairs = 2000 * 2
            assert result.access_fraction == Fraction(pairs - expected, pairs)

    def test_tiny_instances_match_brute_force(self):
        rng = np.random.default_rng(21)
        for _ in range(30):
            schema = Schema((Column("x", NUMERIC, 10), Column("y", NUMERIC, 10)))
            data = Dataset(
                schema, rng.integers(0, 10, size=(int(rng.integers(6, 15)), 2), dtype=np.int64)
            )
            queries = []
            for _ in range(int(rng.integers(1, 4))):
                col = int(rng.integers(0, 2))
                lo = int(rng.integers(0, 8))
                hi = int(rng.integers(lo, 10))
                queries.append(
                    Query(
                        And(
                            (
                                Pred(UnaryPredicate(col, ">=", lo)),
                                Pred(UnaryPredicate(col, "<=", hi)),
                            )
                        )
                    )
                )
            w = Workload(tuple(queries))
            preds, _ = extract_cuts(w)
            cuts = preds[:3]
            b = int(rng.integers(1, 4))
            # cap the leaf budget so the unmemoized search stays tractable
            budget = min(4, data.n_rows // b)
            result = oracle_opt(data, w, cuts, b, max_leaves=budget)
            cut_masks = [c.matches(data.rows) for c in cuts]
            expected = brute_force_best(
                data.rows, cut_masks, boxes_of(w, schema), b, budget
            )
            assert result.c_opt == expected

    def test_oracle_blocks_form_a_legal_partition(self):
        schema, data, w = generate(
            GeneratorSpec("uniform", n_rows=60, n_columns=2, domain_size=12, n_queries=3),
            seed=8,
        )
        result = oracle_opt(data, w, all_cuts(w)[:4], 5)
        seen = np.concatenate(result.block_rows)
        assert sorted(seen.tolist()) == list(range(60))
        assert all(len(idx) >= 5 for idx in result.block_rows)
        assert result.states >= 1

    def test_oracle_never_below_greedy(self):
        from skiptree.metrics import skipped_under_node

        rng = np.random.default_rng(31)
        for seed in range(6):
            schema, data, w = generate(
                GeneratorSpec("uniform", n_rows=80, n_columns=2, domain_size=16, n_queries=4),
                seed=seed,
            )
            cuts = all_cuts(w)[:4]
            if not cuts:
                continue
            tree = greedy_build(data, w, GreedyConfig(8, cuts))
            c_greedy = skipped_under_node(tree, tree.root_id, data, np.arange(80), w)
            assert oracle_opt(data, w, cuts, 8).c_opt >= c_greedy

    def test_single_leaf_budget(self):
        schema, data, w = generate(
            GeneratorSpec("uniform", n_rows=40, n_columns=2, domain_size=12, n_queries=2),
            seed=4,
        )
        result = oracle_opt(data, w, all_cuts(w)[:2], 4, max_leaves=1)
        assert result.n_leaves == 1
        assert len(result.block_rows[0]) == 40

    def test_instance_limits(self):
        schema, data, w = generate(
            GeneratorSpec("uniform", n_rows=120, n_columns=2, domain_size=20, n_queries=6),
            seed=2,
        )
        cuts = all_cuts(w)
        with pytest.raises(TooLarge, match="rows"):
            oracle_opt(data, w, cuts[:2], 4, max_rows=100)
        with pytest.raises(TooLarge, match="cuts"):
            oracle_opt(data, w, cuts, 4, max_cuts=3)
        with pytest.raises(TooLarge, match="subproblems"):
            oracle_opt(data, w, cuts[:6], 2, max_states=10)
