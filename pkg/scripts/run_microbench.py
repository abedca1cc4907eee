#!/usr/bin/env python3
"""Disjunctive two-query microbenchmark: baselines vs greedy vs learned.

Generates the scenario (a narrow filter plus a wide disjunction over a
second column), builds every layout at the same block-size floor, and
prints one access-fraction row per layout.  The learned builder also
reports its episode budget and wall-clock time.

Example:
    python3 scripts/run_microbench.py --n-rows 100000 --min-block-size 500
"""

from __future__ import annotations

import argparse
import json
import time

from skiptree.greedy import BuildStats, GreedyConfig, greedy_build
from skiptree.harness import BaselineSpec, GeneratorSpec, baseline_partition, generate
from skiptree.metrics import evaluate_blocks, evaluate_partitioning
from skiptree.model import extract_cuts
from skiptree.rl import RlConfig, train


def evaluate_tree(tree, data, w):
    assignment = tree.route_rows(data)
    frozen = tree.freeze(assignment, data)
    return evaluate_partitioning(frozen, assignment, data, w)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n-rows", type=int, default=100_000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--min-block-size", type=int, default=500)
    parser.add_argument("--episodes", type=int, default=500)
    parser.add_argument("--timeout-s", type=float, default=120.0)
    parser.add_argument("--sample-ratio", type=float, default=0.1)
    parser.add_argument("--out", default=None, help="write all reports to a JSON file")
    args = parser.parse_args()

    spec = GeneratorSpec("disjunctive-microbench", n_rows=args.n_rows)
    schema, data, w = generate(spec, args.seed)
    preds, advanced = extract_cuts(w)
    cuts = preds + advanced
    b = args.min_block_size
    print(
        f"{data.n_rows} rows, {w.n_queries} queries, "
        f"{len(preds)} unary + {len(advanced)} advanced cuts, b={b}"
    )

    rows = []

    for kind in ("random", "range"):
        spec = BaselineSpec(
            kind=kind,
            block_size=b,
            column=schema.columns[0].name if kind == "range" else None,
        )
        descs, assignment = baseline_partition(
            data, spec, seed=args.seed, registry=w.advanced_cuts
        )
        report = evaluate_blocks(descs, assignment.sizes, w, schema, data.n_rows)
        rows.append((f"baseline/{kind}", report, None))

    stats = BuildStats()
    start = time.perf_counter()
    tree = greedy_build(data, w, GreedyConfig(min_block_size=b, cuts=cuts), stats=stats)
    greedy_s = time.perf_counter() - start
    rows.append(("tree/greedy", evaluate_tree(tree, data, w), greedy_s))

    cfg = RlConfig(
        min_block_size=b,
        sample_ratio=args.sample_ratio,
        episodes=args.episodes,
        timeout_s=args.timeout_s,
        seed=args.seed,
    )
    start = time.perf_counter()
    result = train(data, w, cuts, cfg)
    learned_s = time.perf_counter() - start
    rows.append(("tree/learned", evaluate_tree(result.best_tree, data, w), learned_s))

    width = max(len(name) for name, _, _ in rows)
    print(f"\n{'layout'.ljust(width)}  blocks  access    build")
    for name, report, seconds in rows:
        built = f"{seconds:7.2f}s" if seconds is not None else "       -"
        print(
            f"{name.ljust(width)}  {len(report.per_block_skipped):6d}  "
            f"{100 * float(report.access_fraction):7.4f}%  {built}"
        )

    greedy_af = float(rows[-2][1].access_fraction)
    learned_af = float(rows[-1][1].access_fraction)
    print(
        f"\nlearned layout reads {greedy_af / learned_af:.2f}x fewer tuples "
        f"than greedy ({result.episodes_run} episodes, "
        f"best found at sample fraction {result.best_access_fraction:.4f})"
    )

    if args.out:
        payload = {name: report.to_json() for name, report, _ in rows}
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2)
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
