#!/usr/bin/env python3
"""Desk-scale versions of the four classification experiment shapes.

Experiments 1/2 train on plain synthetic corpora with 4 and 3 classes;
experiments 3/4 add expert-corrected masks to the training set. Prints
an accuracy / macro-F1 table over the shared test splits.
"""
import argparse
import tempfile
from pathlib import Path

import numpy as np

from xailoop.harness import (
    SynthDatasetConfig,
    apply_corrections_to_samples,
    compute_metrics,
    split_dataset,
    synthesize_dataset,
)
from xailoop.imaging import CorrectionAnnotation, TissueClass, corrections_to_json
from xailoop.refmodel import RefModelAdapter, TrainConfig, class_subset, train_model


def synthetic_corrections(samples, out_dir: Path, count: int, seed: int) -> None:
    """Fake 'expert' corrections: grow the carcinoma of a few samples."""
    rng = np.random.default_rng(seed)
    for s in samples[:count]:
        side = s.mask.width
        cx, cy = rng.uniform(0.2 * side, 0.8 * side, size=2)
        r = rng.uniform(0.08 * side, 0.18 * side)
        poly = [
            (cx + r * np.cos(a), cy + r * np.sin(a))
            for a in np.linspace(0.0, 2.0 * np.pi, 8, endpoint=False)
        ]
        doc = corrections_to_json(
            [CorrectionAnnotation(tuple(poly), TissueClass.CARCINOMA)]
        )
        (out_dir / f"{s.index:05d}.json").write_text(doc)


def run_experiment(n_classes: int, corrected: bool, seed: int, per_class: int, epochs: int):
    classes = [c.value for c in class_subset(n_classes)]
    corpus = synthesize_dataset(
        SynthDatasetConfig(active_classes=tuple(classes), per_class_count=per_class, seed=seed)
    )
    split = split_dataset(corpus, seed=seed)
    train_samples = list(split.train)
    if corrected:
        with tempfile.TemporaryDirectory() as tmp:
            synthetic_corrections(split.train, Path(tmp), count=max(3, len(split.train) // 10), seed=seed)
            train_samples += apply_corrections_to_samples(split.train, tmp, seed=seed)
    model, _ = train_model(
        [(s.image, s.label) for s in train_samples],
        [(s.image, s.label) for s in split.validation],
        TrainConfig(dropout_rate=0.2, learning_rate=0.05, batch_size=8, epochs=epochs, seed=seed),
        classes,
    )
    adapter = RefModelAdapter(model)
    probs = adapter.predict_proba([s.image for s in split.test])
    return compute_metrics(probs, [s.label for s in split.test], classes)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--per-class", type=int, default=40)
    parser.add_argument("--epochs", type=int, default=12)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    shapes = [
        ("Experiment 1", 4, False),
        ("Experiment 2", 3, False),
        ("Experiment 3", 4, True),
        ("Experiment 4", 3, True),
    ]
    print("| Experiment | Classes | Corrected masks | Accuracy | Macro F1 |")
    print("|---|---|---|---|---|")
    for name, n_classes, corrected in shapes:
        metrics = run_experiment(n_classes, corrected, args.seed, args.per_class, args.epochs)
        print(
            f"| {name} | {n_classes} | {'yes' if corrected else 'no'} | "
            f"{metrics['accuracy']:.4f} | {metrics['macroF1']:.4f} |"
        )


if __name__ == "__main__":
    main()
