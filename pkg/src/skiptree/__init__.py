"""Workload-aware data layouts: routing trees that let scans skip blocks.

The package builds binary routing trees over a table.  Each internal node
holds a cut (a predicate); rows satisfying the cut go left, the rest go
right.  Leaves become storage blocks, and every node carries a semantic
description -- per-column ranges, category bit masks, and flags for
registered multi-column cuts -- precise enough to decide, per query,
whether a block can be skipped without reading it.

Layout quality is the fraction of tuples scanned by a query workload.
Two builders are provided: a greedy splitter that maximizes the number of
(query, tuple) pairs skipped, and a small reinforcement-learning agent
that searches the same cut space with a policy/value network.  Extensions
cover replicated ("overlapping") layouts and a two-tree layout for
heterogeneous workloads.
"""

from .extensions import (
    NoNeighbor,
    OverlapLayout,
    TwoTreeLayout,
    build_overlap,
    build_two_tree,
    evaluate_overlap,
    evaluate_two_tree,
    hypercube_union,
    overlap_from_json,
    overlap_to_json,
    route_query_overlap,
    scan_query_overlap,
    two_tree_from_json,
    two_tree_to_json,
)
from .greedy import (
    BoundReport,
    BoundViolation,
    BuildStats,
    EmptyDataset,
    GreedyConfig,
    UnsupportedQueryShape,
    check_online_bound,
    check_submodularity_condition,
    greedy_build,
)
from .harness import (
    BaselineSpec,
    GeneratorSpec,
    TooLarge,
    baseline_partition,
    generate,
    oracle_opt,
)
from .metrics import (
    SkipReport,
    can_skip,
    evaluate_blocks,
    evaluate_partitioning,
    skipped_under_node,
)
from .model import (
    AdvancedCut,
    AdvRef,
    And,
    Column,
    Dataset,
    Or,
    ParseError,
    Pred,
    Query,
    Schema,
    UnaryPredicate,
    Workload,
    evaluate_query,
    extract_cuts,
    load_dataset,
    load_schema,
    load_workload,
    query_matches,
    save_dataset,
    save_schema,
    save_workload,
    schema_from_json,
    schema_to_json,
    workload_from_json,
    workload_to_json,
)
from .rl import (
    NonFiniteLoss,
    PolicyValueNet,
    RlConfig,
    TrainResult,
    featurize,
    load_policy,
    masked_softmax,
    run_episode,
    save_policy,
    train,
)
from .tree import (
    AssignmentMismatch,
    BlockAssignment,
    DegenerateCut,
    QdTree,
    QdTreeNode,
    SemanticDescription,
    apply_cut,
    description_from_rows,
    description_matches,
    deserialize,
    intersects,
    row_matches_description,
    serialize,
)

__version__ = "0.1.0"

__all__ = [
    "AdvancedCut",
    "AdvRef",
    "And",
    "AssignmentMismatch",
    "BaselineSpec",
    "BlockAssignment",
    "BoundReport",
    "BoundViolation",
    "BuildStats",
    "Column",
    "Dataset",
    "DegenerateCut",
    "EmptyDataset",
    "GeneratorSpec",
    "GreedyConfig",
    "NoNeighbor",
    "NonFiniteLoss",
    "Or",
    "OverlapLayout",
    "ParseError",
    "PolicyValueNet",
    "Pred",
    "QdTree",
    "QdTreeNode",
    "Query",
    "RlConfig",
    "Schema",
    "SemanticDescription",
    "SkipReport",
    "TooLarge",
    "TrainResult",
    "TwoTreeLayout",
    "UnaryPredicate",
    "UnsupportedQueryShape",
    "Workload",
    "apply_cut",
    "baseline_partition",
    "build_overlap",
    "build_two_tree",
    "can_skip",
    "check_online_bound",
    "check_submodularity_condition",
    "description_from_rows",
    "description_matches",
    "deserialize",
    "evaluate_blocks",
    "evaluate_overlap",
    "evaluate_partitioning",
    "evaluate_query",
    "evaluate_two_tree",
    "extract_cuts",
    "featurize",
    "generate",
    "greedy_build",
    "hypercube_union",
    "intersects",
    "load_dataset",
    "load_policy",
    "load_schema",
    "load_workload",
    "masked_softmax",
    "oracle_opt",
    "overlap_from_json",
    "overlap_to_json",
    "query_matches",
    "route_query_overlap",
    "row_matches_description",
    "run_episode",
    "save_dataset",
    "save_policy",
    "save_schema",
    "save_workload",
    "scan_query_overlap",
    "schema_from_json",
    "schema_to_json",
    "serialize",
    "skipped_under_node",
    "train",
    "two_tree_from_json",
    "two_tree_to_json",
    "workload_from_json",
    "workload_to_json",
]
