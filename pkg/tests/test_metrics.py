"""Skip accounting: block merit, access fractions, and their invariants."""

from fractions import Fraction

import numpy as np
import pytest

from helpers import random_dataset, random_schema, random_tree, random_workload
from skiptree.metrics import (
    SkipReport,
    can_skip,
    evaluate_blocks,
    evaluate_partitioning,
    skipped_under_node,
)
from skiptree.model import (
    NUMERIC,
    Column,
    Dataset,
    Pred,
    Query,
    Schema,
    UnaryPredicate,
    Workload,
)
from skiptree.tree import DegenerateCut, QdTree, SemanticDescription


def two_block_layout():
    schema = Schema((Column("c", NUMERIC, 10),))
    data = Dataset(schema, np.arange(10, dtype=np.int64).reshape(-1, 1))
    w = Workload(
        (
            Query(Pred(UnaryPredicate(0, "<", 5))),
            Query(Pred(UnaryPredicate(0, ">=", 5))),
        )
    )
    tree = QdTree.build_root(schema).split(0, UnaryPredicate(0, "<", 5))
    assignment = tree.route_rows(data)
    return tree.freeze(assignment, data), assignment, data, w


class TestHandExample:
    def test_two_blocks_each_skip_one_query(self):
        frozen, assignment, data, w = two_block_layout()
        report = evaluate_partitioning(frozen, assignment, data, w)
        assert report.per_block_skipped == (5, 5)
        assert report.per_query_scanned == (5, 5)
        assert report.total_skipped == 10
        assert report.access_fraction == Fraction(1, 2)
        assert report.per_query_access == (Fraction(1, 2), Fraction(1, 2))

    def test_single_block_skips_nothing(self):
        schema = Schema((Column("c", NUMERIC, 10),))
        data = Dataset(schema, np.arange(10, dtype=np.int64).reshape(-1, 1))
        w = Workload((Query(Pred(UnaryPredicate(0, "<", 5))),))
        tree = QdTree.build_root(schema)
        frozen = tree.freeze(tree.route_rows(data), data)
        report = evaluate_partitioning(frozen, tree.route_rows(data), data, w)
        assert report.total_skipped == 0
        assert report.access_fraction == 1


class TestCanSkip:
    def test_disjoint_range(self):
        schema = Schema((Column("c", NUMERIC, 10),))
        desc = SemanticDescription(((0, 5),), (), 0)
        assert can_skip(desc, Query(Pred(UnaryPredicate(0, ">=", 5))), schema)
        assert not can_skip(desc, Query(Pred(UnaryPredicate(0, "<", 1))), schema)


class TestInvariants:
    def test_conservation_of_tuple_reads(self):
        rng = np.random.default_rng(5)
        for _ in range(40):
            schema = random_schema(rng)
            data = random_dataset(rng, schema, 30)
            w = random_workload(rng, schema, 3, n_advanced=1)
            tree = random_tree(rng, schema, w.advanced_cuts, data, 3)
            assignment = tree.route_rows(data)
            report = evaluate_partitioning(tree.freeze(assignment, data), assignment, data, w)
            assert report.total_skipped + sum(report.per_query_scanned) == (
                data.n_rows * w.n_queries
            )
            assert report.access_fraction == Fraction(
                sum(report.per_query_scanned), data.n_rows * w.n_queries
            )

    def test_subtree_total_matches_partition_report(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            schema = random_schema(rng)
            data = random_dataset(rng, schema, 40)
            w = random_workload(rng, schema, 3, n_advanced=1)
            tree = random_tree(rng, schema, w.advanced_cuts, data, 4)
            assignment = tree.route_rows(data)
            report = evaluate_partitioning(tree.freeze(assignment, data), assignment, data, w)
            under_root = skipped_under_node(
                tree, tree.root_id, data, np.arange(data.n_rows), w
            )
            assert under_root == report.total_skipped

    def test_refining_a_leaf_never_loses_skips(self):
        rng = np.random.default_rng(19)
        trials = 0
        while trials < 30:
            schema = random_schema(rng)
            data = random_dataset(rng, schema, 40)
            w = random_workload(rng, schema, 3)
            tree = random_tree(rng, schema, (), data, 2)
            leaves = tree.leaves()
            leaf = leaves[int(rng.integers(0, len(leaves)))]
            from helpers import random_unary_pred

            try:
                refined = tree.split(leaf.id, random_unary_pred(rng, schema))
            except DegenerateCut:
                continue
            trials += 1

            def total(t):
                a = t.route_rows(data)
                return evaluate_partitioning(t.freeze(a, data), a, data, w).total_skipped

            assert total(refined) >= total(tree)


class TestValidation:
    def test_unfrozen_tree_rejected(self):
        frozen, assignment, data, w = two_block_layout()
        unfrozen = QdTree.build_root(frozen.schema).split(0, UnaryPredicate(0, "<", 5))
        with pytest.raises(ValueError, match="frozen"):
            evaluate_partitioning(unfrozen, assignment, data, w)

    def test_block_count_mismatch_rejected(self):
        frozen, assignment, data, w = two_block_layout()
        import dataclasses

        bad = dataclasses.replace(assignment, block_rows=assignment.block_rows[:1])
        with pytest.raises(ValueError, match="match"):
            evaluate_partitioning(frozen, bad, data, w)

    def test_evaluate_blocks_length_mismatch(self):
        frozen, _, data, w = two_block_layout()
        with pytest.raises(ValueError, match="per block"):
            evaluate_blocks(frozen.leaf_descriptions(), (5,), w, frozen.schema, data.n_rows)


class TestReportOutput:
    def test_json_shape(self):
        frozen, assignment, data, w = two_block_layout()
        report = evaluate_partitioning(frozen, assignment, data, w)
        obj = report.to_json()
        assert obj["access_fraction"] == 0.5
        assert obj["access_fraction_exact"] == [1, 2]
        assert obj["total_skipped"] == 10
        assert obj["per_block_skipped"] == [5, 5]
        assert obj["per_query_scanned"] == [5, 5]

    def test_per_query_csv(self, tmp_path):
        frozen, assignment, data, w = two_block_layout()
        report = evaluate_partitioning(frozen, assignment, data, w)
        path = tmp_path / "per_query.csv"
        report.write_per_query_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "query_index,scanned_tuples,access_fraction"
        assert lines[1] == "0,5,0.5"
        assert lines[2] == "1,5,0.5"
        assert len(lines) == 3

    def test_report_is_value_object(self):
        report = SkipReport(10, 2, (5, 5), (5, 5), 10, Fraction(1, 2))
        assert report == SkipReport(10, 2, (5, 5), (5, 5), 10, Fraction(1, 2))
