#!/usr/bin/env python3
"""Propeller scenario: what replicating one hub row buys at query time.

Four overlapping range queries share a single center row.  Any disjoint
partitioning must hand that row to one block, so three of the four queries
drag in a second block; replicating the center into each arm's block lets
every query scan exactly one block.  Prints per-query scanned tuples for
the plain and the replicated layout plus the storage overhead.

Example:
    python3 scripts/run_propeller.py --n-arm 1000
"""

from __future__ import annotations

import argparse

from skiptree.extensions import build_overlap, evaluate_overlap
from skiptree.greedy import GreedyConfig, greedy_build
from skiptree.harness import GeneratorSpec, generate
from skiptree.metrics import evaluate_partitioning
from skiptree.model import extract_cuts


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n-arm", type=int, default=1000, help="rows per arm")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument(
        "--min-block-size",
        type=int,
        default=None,
        help="block-size floor (default: one arm)",
    )
    args = parser.parse_args()
    n = args.n_arm
    b = args.min_block_size if args.min_block_size is not None else n

    schema, data, w = generate(GeneratorSpec("propeller", n_arm=n), seed=args.seed)
    preds, advanced = extract_cuts(w)
    cuts = preds + advanced
    print(f"{data.n_rows} rows ({n} per arm + 1 hub), b={b}")

    tree = greedy_build(data, w, GreedyConfig(min_block_size=b, cuts=cuts))
    assignment = tree.route_rows(data)
    plain = evaluate_partitioning(tree.freeze(assignment, data), assignment, data, w)

    layout = build_overlap(data, w, cuts, GreedyConfig(min_block_size=b, cuts=cuts))
    overlap = evaluate_overlap(layout, data, w)

    print(f"\nquery   plain  overlap")
    for qi in range(w.n_queries):
        print(
            f"q{qi}    {plain.per_query_scanned[qi]:7d}  "
            f"{overlap.per_query_scanned[qi]:7d}"
        )
    print(
        f"\nplain:   {plain.access_fraction!s:>10} access fraction "
        f"({100 * float(plain.access_fraction):.4f}%), "
        f"{len(plain.per_block_skipped)} blocks"
    )
    print(
        f"overlap: {overlap.access_fraction!s:>10} access fraction "
        f"({100 * float(overlap.access_fraction):.4f}%), "
        f"{layout.n_blocks} blocks, "
        f"{layout.extra_storage_rows} extra stored row(s), "
        f"{len(layout.replica_map)} replicated block(s)"
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
