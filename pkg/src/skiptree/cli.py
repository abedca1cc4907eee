"""Command-line interface.

Subcommands cover the whole workflow: generate a scenario (gen), pull
candidate cuts out of a workload (extract-cuts), build a layout (build),
materialize row placement (route-data), list the blocks a query scans
(route-query), score a layout (eval), compute a small exact optimum
(oracle), and benchmark builders against naive baselines (compare).

Schemas and workloads are JSON, datasets are CSV with a header matching the
schema, and layouts are JSON files tagged with a "kind" of plain, overlap,
two-tree, or baseline.  SKIPTREE_WORKERS sets the number of threads used to
route rows (the assignment does not depend on it).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Optional

from . import __version__
from .extensions import (
    NoNeighbor,
    build_overlap,
    build_two_tree,
    evaluate_overlap,
    evaluate_two_tree,
    overlap_from_json,
    overlap_to_json,
    route_query_overlap,
    two_tree_from_json,
    two_tree_to_json,
)
from .greedy import GreedyConfig, greedy_build
from .harness import (
    GENERATOR_KINDS,
    BaselineSpec,
    GeneratorSpec,
    TooLarge,
    baseline_partition,
    generate,
    oracle_opt,
)
from .metrics import evaluate_blocks, evaluate_partitioning
from .model import (
    ParseError,
    extract_cuts,
    load_dataset,
    load_schema,
    load_workload,
    save_dataset,
    save_schema,
    save_workload,
)
from .rl import RlConfig, save_policy, train
from .tree import cut_from_json, cut_to_json, intersects, tree_from_json, tree_to_json


def _workers() -> int:
    raw = os.environ.get("SKIPTREE_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SKIPTREE_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError("SKIPTREE_WORKERS must be >= 1")
    return n


def _load_inputs(args, need_data: bool = True):
    schema = load_schema(args.schema)
    w = load_workload(args.workload, schema)
    data = load_dataset(args.data, schema) if need_data else None
    return schema, w, data


def _load_cuts(args, w, schema):
    """Cuts from --cuts JSON if given, else extracted from the workload."""
    if getattr(args, "cuts", None):
        with open(args.cuts) as fh:
            obj = json.load(fh)
        raw = obj["cuts"] if isinstance(obj, dict) else obj
        cuts = tuple(
            cut_from_json(c, w.advanced_cuts, f"cuts[{i}]") for i, c in enumerate(raw)
        )
    else:
        preds, advanced = extract_cuts(w)
        cuts = preds + advanced
    for c in cuts:
        if hasattr(c, "validate"):
            c.validate(schema)
    if not cuts:
        raise ValueError("no candidate cuts: the workload has no usable predicates")
    return cuts


def _write_json(payload, path: Optional[str]) -> None:
    if path is None:
        json.dump(payload, sys.stdout, indent=2)
        sys.stdout.write("\n")
    else:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)


def _percent(frac) -> str:
    return f"{100 * float(frac):.4f}%"


def cmd_gen(args) -> int:
    spec = GeneratorSpec(
        kind=args.kind,
        n_rows=args.n_rows,
        n_columns=args.n_columns,
        domain_size=args.domain_size,
        n_queries=args.n_queries,
        n_arm=args.n_arm,
        n_clusters=args.n_clusters,
    )
    schema, data, w = generate(spec, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    save_schema(schema, os.path.join(args.out_dir, "schema.json"))
    save_dataset(data, os.path.join(args.out_dir, "data.csv"))
    save_workload(w, os.path.join(args.out_dir, "workload.json"))
    print(
        f"wrote {args.out_dir}/{{schema.json,data.csv,workload.json}}: "
        f"{data.n_rows} rows, {w.n_queries} queries"
    )
    return 0


def cmd_extract_cuts(args) -> int:
    schema, w, _ = _load_inputs(args, need_data=False)
    preds, advanced = extract_cuts(w)
    cuts = preds + advanced
    _write_json({"cuts": [cut_to_json(c) for c in cuts]}, args.out)
    print(f"{len(preds)} unary cuts, {len(advanced)} advanced cuts", file=sys.stderr)
    return 0


def _build_plain(data, w, cuts, args):
    curve_fh = None
    if args.algo == "greedy":
        cfg = GreedyConfig(min_block_size=args.min_block_size, cuts=cuts)
        tree = greedy_build(data, w, cfg)
    else:
        cfg = _rl_config(args)
        if args.curve_out:
            curve_fh = open(args.curve_out, "w", newline="")
            writer = csv.writer(curve_fh)
            writer.writerow(
                ["episode", "elapsed_ms", "best_access_fraction", "episode_access_fraction"]
            )

            def on_episode(pt):
                writer.writerow(
                    [pt.episode, pt.elapsed_ms, pt.best_access_fraction, pt.episode_access_fraction]
                )

        else:
            on_episode = None
        try:
            result = train(data, w, cuts, cfg, on_episode=on_episode)
        finally:
            if curve_fh is not None:
                curve_fh.close()
        if args.policy_out:
            save_policy(result.policy, args.policy_out)
        tree = result.best_tree
    assignment = tree.route_rows(data, n_workers=_workers())
    return tree.freeze(assignment, data), assignment


def _rl_config(args) -> RlConfig:
    episodes = args.episodes
    if episodes is None and args.timeout_s is None:
        episodes = 200
    return RlConfig(
        min_block_size=args.min_block_size,
        sample_ratio=args.sample_ratio,
        episodes=episodes,
        timeout_s=args.timeout_s,
        hidden_width=args.hidden_width,
        learning_rate=args.learning_rate,
        entropy_weight=args.entropy_weight,
        batch_episodes=args.batch_episodes,
        seed=args.seed,
    )


def cmd_build(args) -> int:
    schema, w, data = _load_inputs(args)
    cuts = _load_cuts(args, w, schema)
    if args.mode == "plain":
        tree, assignment = _build_plain(data, w, cuts, args)
        payload = {"kind": "plain", "tree": tree_to_json(tree)}
        n_blocks, extra = assignment.n_blocks, 0
    elif args.mode == "overlap":
        cfg = (
            GreedyConfig(min_block_size=args.min_block_size, cuts=cuts)
            if args.algo == "greedy"
            else _rl_config(args)
        )
        layout = build_overlap(data, w, cuts, cfg, builder=args.algo)
        payload = overlap_to_json(layout)
        n_blocks, extra = layout.n_blocks, layout.extra_storage_rows
    else:
        cfg = (
            GreedyConfig(min_block_size=args.min_block_size, cuts=cuts)
            if args.algo == "greedy"
            else _rl_config(args)
        )
        k = args.k if args.k is not None else max(1, w.n_queries // 4)
        layout = build_two_tree(
            data,
            w,
            cuts,
            cfg,
            k=k,
            max_iters=args.max_iters,
            builder=args.algo,
            prune=args.prune,
        )
        payload = two_tree_to_json(layout)
        n_blocks = layout.a1.n_blocks + layout.a2.n_blocks
        extra = data.n_rows
    _write_json(payload, args.out)
    where = args.out or "stdout"
    print(
        f"built {args.mode} layout ({args.algo}): {n_blocks} blocks, "
        f"{extra} extra stored rows -> {where}",
        file=sys.stderr,
    )
    return 0


def _load_layout(args, schema, w, data):
    with open(args.layout) as fh:
        obj = json.load(fh)
    kind = obj.get("kind")
    if kind == "plain":
        tree = tree_from_json(obj["tree"], schema, w.advanced_cuts)
        assignment = tree.route_rows(data, n_workers=_workers())
        if not tree.frozen:
            tree = tree.freeze(assignment, data)
        return "plain", (tree, assignment)
    if kind == "overlap":
        return "overlap", overlap_from_json(obj, schema, w.advanced_cuts, data)
    if kind == "two-tree":
        return "two-tree", two_tree_from_json(obj, schema, w.advanced_cuts, data)
    if kind == "baseline":
        spec = BaselineSpec(
            kind=obj["baseline"],
            block_size=int(obj["block_size"]),
            column=obj.get("column"),
        )
        descs, assignment = baseline_partition(
            data, spec, seed=int(obj.get("seed", 0)), registry=w.advanced_cuts
        )
        return "baseline", (descs, assignment)
    raise ParseError(f"unknown layout kind {kind!r}")


def cmd_route_data(args) -> int:
    schema, w, data = _load_inputs(args)
    kind, layout = _load_layout(args, schema, w, data)
    pairs: list[tuple] = []
    if kind == "two-tree":
        header = ["tree", "row", "block"]
        for t, assignment in ((0, layout.a1), (1, layout.a2)):
            for bid, rows in enumerate(assignment.block_rows):
                pairs.extend((t, int(r), bid) for r in rows)
    else:
        header = ["row", "block"]
        assignment = layout[1] if kind in ("plain", "baseline") else layout.assignment
        for bid, rows in enumerate(assignment.block_rows):
            pairs.extend((int(r), bid) for r in rows)
    pairs.sort()
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(pairs)
    print(f"wrote {len(pairs)} placements -> {args.out}", file=sys.stderr)
    return 0


def cmd_route_query(args) -> int:
    schema, w, data = _load_inputs(args)
    if not 0 <= args.query_index < w.n_queries:
        raise ValueError(
            f"query index {args.query_index} outside workload of {w.n_queries}"
        )
    q = w.queries[args.query_index]
    kind, layout = _load_layout(args, schema, w, data)
    if kind == "plain":
        payload = {"blocks": layout[0].route_query(q)}
    elif kind == "overlap":
        payload = {"blocks": [bid for bid, _ in route_query_overlap(layout, q)]}
    elif kind == "two-tree":
        choice = layout.tree_choice[args.query_index]
        tree = layout.t2 if choice == 1 else layout.t1
        payload = {"tree": choice, "blocks": tree.route_query(q)}
    else:
        descs = layout[0]
        payload = {
            "blocks": [
                bid
                for bid, d in enumerate(descs)
                if intersects(d, q, schema, w.advanced_cuts)
            ]
        }
    _write_json(payload, args.out)
    return 0


def _evaluate(kind, layout, data, w, schema):
    if kind == "plain":
        return evaluate_partitioning(layout[0], layout[1], data, w)
    if kind == "overlap":
        return evaluate_overlap(layout, data, w)
    if kind == "two-tree":
        return evaluate_two_tree(layout, data, w)
    descs, assignment = layout
    return evaluate_blocks(descs, assignment.sizes, w, schema, data.n_rows)


def cmd_eval(args) -> int:
    schema, w, data = _load_inputs(args)
    kind, layout = _load_layout(args, schema, w, data)
    report = _evaluate(kind, layout, data, w, schema)
    if args.out:
        _write_json(report.to_json(), args.out)
    if args.per_query:
        report.write_per_query_csv(args.per_query)
    scanned = sum(report.per_query_scanned)
    total = report.n_rows * report.n_queries
    print(
        f"{kind} layout: access fraction {_percent(report.access_fraction)} "
        f"({scanned} of {total} tuple reads, {len(report.per_block_skipped)} blocks)"
    )
    return 0


def cmd_oracle(args) -> int:
    schema, w, data = _load_inputs(args)
    cuts = _load_cuts(args, w, schema)
    result = oracle_opt(
        data,
        w,
        cuts,
        min_block_size=args.min_block_size,
        max_leaves=args.max_leaves,
    )
    payload = {
        "skipped_pairs": result.c_opt,
        "access_fraction": float(result.access_fraction),
        "access_fraction_exact": [
            result.access_fraction.numerator,
            result.access_fraction.denominator,
        ],
        "n_leaves": result.n_leaves,
        "subproblems": result.states,
    }
    _write_json(payload, args.out)
    return 0


def cmd_compare(args) -> int:
    schema, w, data = _load_inputs(args)
    cuts = _load_cuts(args, w, schema)
    rows = []

    def add(name, report):
        rows.append((name, report))

    random_spec = BaselineSpec(kind="random", block_size=args.min_block_size)
    descs, assignment = baseline_partition(
        data, random_spec, seed=args.seed, registry=w.advanced_cuts
    )
    add("baseline/random", evaluate_blocks(descs, assignment.sizes, w, schema, data.n_rows))

    range_col = args.range_column or schema.columns[0].name
    range_spec = BaselineSpec(kind="range", block_size=args.min_block_size, column=range_col)
    descs, assignment = baseline_partition(
        data, range_spec, seed=args.seed, registry=w.advanced_cuts
    )
    add(
        f"baseline/range({range_col})",
        evaluate_blocks(descs, assignment.sizes, w, schema, data.n_rows),
    )

    if args.algo in ("greedy", "both"):
        cfg = GreedyConfig(min_block_size=args.min_block_size, cuts=cuts)
        tree = greedy_build(data, w, cfg)
        assignment = tree.route_rows(data, n_workers=_workers())
        frozen = tree.freeze(assignment, data)
        add("tree/greedy", evaluate_partitioning(frozen, assignment, data, w))
    if args.algo in ("rl", "both"):
        cfg = _rl_config(args)
        result = train(data, w, cuts, cfg)
        tree = result.best_tree
        assignment = tree.route_rows(data, n_workers=_workers())
        frozen = tree.freeze(assignment, data)
        add("tree/learned", evaluate_partitioning(frozen, assignment, data, w))

    width = max(len(name) for name, _ in rows)
    print(f"{'layout'.ljust(width)}  blocks  access")
    for name, report in rows:
        print(
            f"{name.ljust(width)}  {len(report.per_block_skipped):6d}  "
            f"{_percent(report.access_fraction)}"
        )
    if args.out:
        _write_json(
            {name: report.to_json() for name, report in rows},
            args.out,
        )
    return 0


def _add_io_arguments(p, need_data: bool = True) -> None:
    p.add_argument("--schema", required=True, help="schema JSON file")
    p.add_argument("--workload", required=True, help="workload JSON file")
    if need_data:
        p.add_argument("--data", required=True, help="dataset CSV file")


def _add_rl_arguments(p) -> None:
    p.add_argument("--sample-ratio", type=float, default=0.1)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--timeout-s", type=float, default=None)
    p.add_argument("--hidden-width", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=3e-4)
    p.add_argument("--entropy-weight", type=float, default=0.01)
    p.add_argument("--batch-episodes", type=int, default=8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skiptree",
        description="Workload-aware block layouts built from routing trees.",
    )
    parser.add_argument("--version", action="version", version=f"skiptree {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scenario")
    p.add_argument("--kind", required=True, choices=GENERATOR_KINDS)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-rows", type=int, default=10_000)
    p.add_argument("--n-columns", type=int, default=2)
    p.add_argument("--domain-size", type=int, default=10_000)
    p.add_argument("--n-queries", type=int, default=8)
    p.add_argument("--n-arm", type=int, default=100)
    p.add_argument("--n-clusters", type=int, default=4)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("extract-cuts", help="candidate cuts of a workload")
    _add_io_arguments(p, need_data=False)
    p.add_argument("--out", default=None, help="cuts JSON file (default stdout)")
    p.set_defaults(func=cmd_extract_cuts)

    p = sub.add_parser("build", help="build a layout")
    _add_io_arguments(p)
    p.add_argument("--algo", choices=("greedy", "rl"), default="greedy")
    p.add_argument("--mode", choices=("plain", "overlap", "two-tree"), default="plain")
    p.add_argument("--min-block-size", type=int, required=True)
    p.add_argument("--cuts", default=None, help="cuts JSON file (default: extract)")
    p.add_argument("--out", default=None, help="layout JSON file (default stdout)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--curve-out", default=None, help="rl learning-curve CSV")
    p.add_argument("--policy-out", default=None, help="rl policy checkpoint JSON")
    p.add_argument("--k", type=int, default=None, help="two-tree: worst queries to refocus")
    p.add_argument("--max-iters", type=int, default=1, help="two-tree: rebuild rounds")
    p.add_argument("--prune", action="store_true", help="two-tree: drop unused secondary blocks")
    _add_rl_arguments(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("route-data", help="write row-to-block placement CSV")
    _add_io_arguments(p)
    p.add_argument("--layout", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_route_data)

    p = sub.add_parser("route-query", help="blocks a query must scan")
    _add_io_arguments(p)
    p.add_argument("--layout", required=True)
    p.add_argument("--query-index", type=int, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_route_query)

    p = sub.add_parser("eval", help="score a layout against a workload")
    _add_io_arguments(p)
    p.add_argument("--layout", required=True)
    p.add_argument("--out", default=None, help="full report JSON")
    p.add_argument("--per-query", default=None, help="per-query CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="exact optimum on small instances")
    _add_io_arguments(p)
    p.add_argument("--min-block-size", type=int, required=True)
    p.add_argument("--cuts", default=None)
    p.add_argument("--max-leaves", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("compare", help="builders vs naive baselines")
    _add_io_arguments(p)
    p.add_argument("--min-block-size", type=int, required=True)
    p.add_argument("--algo", choices=("greedy", "rl", "both"), default="greedy")
    p.add_argument("--cuts", default=None)
    p.add_argument("--range-column", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    _add_rl_arguments(p)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ValueError, OSError, TooLarge, NoNeighbor) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
