#!/usr/bin/env python3
"""One simulated-rater optimization run, end to end.

Synthesizes a 3-class corpus, runs the full loop (optimize, explain,
rate, select, shrink) and prints the grade trajectory plus the final
model's test metrics. The run directory keeps every artifact.
"""
import argparse
from pathlib import Path

from xailoop.harness import LoopConfig, SynthDatasetConfig, run_hitl_loop, synthesize_dataset

THREE = ("Basal", "LuminalA", "LuminalB")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/demo")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--per-class", type=int, default=60)
    parser.add_argument("--iterations", type=int, default=3)
    parser.add_argument("--trials", type=int, default=12)
    args = parser.parse_args()

    corpus = synthesize_dataset(
        SynthDatasetConfig(active_classes=THREE, per_class_count=args.per_class, seed=1)
    )
    config = LoopConfig(
        iterations=args.iterations,
        trials_per_iteration=args.trials,
        top_n=3,
        seed=args.seed,
        epochs=12,
    )
    report = run_hitl_loop(corpus, list(THREE), config, Path(args.out))
    print(f"run directory: {args.out}")
    print(f"grade trajectory: {report['gradeTrajectory']}")
    final = report["final"]
    print(
        f"selected trial {final['trial']['index']} "
        f"(grade {final['trial']['meanGrade']}, point {final['trial']['point']})"
    )
    print(f"test metrics: {final['testMetrics']}")


if __name__ == "__main__":
    main()
