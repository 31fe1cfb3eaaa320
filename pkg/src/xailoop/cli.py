"""Command-line entry points.

Subcommands: synth, train, explain, optimize, serve, report. Failures
print one machine-parsable JSON object ``{"error": code, "detail": text}``
to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import BadParameter, XailoopError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xailoop")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic segmented-tissue corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, choices=(3, 4), default=3)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--side", type=int, default=128)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--data", required=True)
    p.add_argument("--dropout", type=float, required=True)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--batch", type=int, required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("explain", help="explain one prediction")
    p.add_argument("--model")
    p.add_argument("--adapter-cmd", help="external model command (line-JSON protocol)")
    p.add_argument("--adapter-classes", help="comma-separated class names for --adapter-cmd")
    p.add_argument("--image", required=True)
    p.add_argument("--mask")
    p.add_argument("--method", choices=("lime", "kshap", "gradcam"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--json", dest="json_out")
    p.add_argument("--target")
    p.add_argument("--regions", type=int, default=40)
    p.add_argument("--grid", help="use an exact ROWSxCOLS block partition instead of SLIC")
    p.add_argument("--samples", type=int, default=300)
    p.add_argument("--exhaustive", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("optimize", help="run the optimization loop")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--rater", choices=("simulated", "file", "interactive"))
    p.add_argument("--out", required=True)
    p.add_argument("--port", type=int, default=8765)

    p = sub.add_parser("serve", help="serve rating sessions over HTTP")
    p.add_argument("--run", required=True)
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--ui", help="static UI bundle directory")

    p = sub.add_parser("report", help="render report.md from report.json")
    p.add_argument("--run", required=True)
    return parser


def _cmd_synth(args) -> int:
    from .harness import SynthDatasetConfig, save_dataset, synthesize_dataset
    from .refmodel import class_subset

    classes = tuple(c.value for c in class_subset(args.classes))
    config = SynthDatasetConfig(
        active_classes=classes,
        per_class_count=args.per_class,
        image_side=args.side,
        seed=args.seed,
    )
    samples = synthesize_dataset(config)
    save_dataset(samples, args.out, classes)
    print(json.dumps({"samples": len(samples), "classes": list(classes), "dir": args.out}))
    return 0


def _cmd_train(args) -> int:
    from .harness import compute_metrics, load_dataset, split_dataset
    from .refmodel import RefModelAdapter, TrainConfig, save_checkpoint, train_model

    samples, classes = load_dataset(args.data)
    split = split_dataset(samples, seed=args.seed)
    config = TrainConfig(
        dropout_rate=args.dropout,
        learning_rate=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        seed=args.seed,
    )
    model, _history = train_model(
        [(s.image, s.label) for s in split.train],
        [(s.image, s.label) for s in split.validation],
        config,
        classes,
    )
    save_checkpoint(model, args.out)
    adapter = RefModelAdapter(model)
    val = compute_metrics(
        adapter.predict_proba([s.image for s in split.validation]),
        [s.label for s in split.validation],
        classes,
    )
    test = compute_metrics(
        adapter.predict_proba([s.image for s in split.test]),
        [s.label for s in split.test],
        classes,
    )
    print(
        json.dumps(
            {
                "accuracy": val["accuracy"],
                "macroF1": val["macroF1"],
                "testAccuracy": test["accuracy"],
                "testMacroF1": test["macroF1"],
                "model": args.out,
            }
        )
    )
    return 0


def _load_adapter(args):
    from .refmodel import RefModelAdapter, SubprocessAdapter, load_checkpoint

    if args.model:
        return RefModelAdapter(load_checkpoint(args.model))
    if args.adapter_cmd:
        if not args.adapter_classes:
            raise BadParameter("--adapter-cmd needs --adapter-classes")
        scratch = Path(args.out).parent / ".adapter_scratch"
        return SubprocessAdapter(
            args.adapter_cmd.split(), args.adapter_classes.split(","), scratch
        )
    raise BadParameter("explain needs --model or --adapter-cmd")


def _parse_grid(spec: str, image):
    from .explainers import grid_map

    try:
        rows, cols = (int(v) for v in spec.lower().split("x"))
    except ValueError:
        raise BadParameter(f"--grid wants ROWSxCOLS, got {spec!r}") from None
    return grid_map(image.height, image.width, rows, cols)


def _cmd_explain(args) -> int:
    from .explainers import (
        explain_grad_cam,
        explain_lime,
        highlight_pixels,
        kernel_shap,
        render_explanation,
        superpixels,
    )
    from .imaging import decode_image, decode_mask, encode_image

    image = decode_image(Path(args.image).read_bytes())
    mask = decode_mask(Path(args.mask).read_bytes()) if args.mask else None
    adapter = _load_adapter(args)
    spmap = _parse_grid(args.grid, image) if args.grid else None
    if args.method == "lime":
        explanation, spmap = explain_lime(
            adapter,
            image,
            target_class=args.target,
            regions=args.regions,
            n_samples=args.samples,
            seed=args.seed,
            spmap=spmap,
        )
    elif args.method == "kshap":
        if spmap is None:
            spmap = superpixels(image, args.regions, seed=args.seed)
        explanation = kernel_shap(
            adapter,
            image,
            spmap,
            target_class=args.target,
            exhaustive=args.exhaustive,
            n_samples=None if args.exhaustive else args.samples,
            seed=args.seed,
        )
    else:
        explanation = explain_grad_cam(adapter, image, target_class=args.target)
    render = render_explanation(image, spmap, explanation)
    Path(args.out).write_bytes(encode_image(render))
    if args.json_out:
        Path(args.json_out).write_text(explanation.to_json())
    summary = {
        "method": explanation.method,
        "targetClass": explanation.target_class,
        "highlight": list(explanation.highlight),
        "render": args.out,
    }
    if mask is not None and spmap is not None:
        from .rating import simulated_rater

        summary["simulatedGrade"] = simulated_rater(
            highlight_pixels(spmap, explanation.highlight), mask
        )
    print(json.dumps(summary))
    return 0


def _cmd_optimize(args) -> int:
    from .harness import LoopConfig, load_dataset, make_rater, run_hitl_loop

    config = LoopConfig.from_json_dict(json.loads(Path(args.config).read_text()))
    if args.rater:
        config.rater_kind = args.rater
    samples, classes = load_dataset(args.data)
    server = None
    try:
        if config.rater_kind == "interactive":
            from .service import start_in_thread

            _thread, server = start_in_thread(args.out, args.port)
            print(f"serving rating sessions on http://127.0.0.1:{args.port}", file=sys.stderr)
        report = run_hitl_loop(samples, classes, config, args.out, make_rater(config))
    finally:
        if server is not None:
            server.should_exit = True
    final = report["final"]
    print(
        json.dumps(
            {
                "runId": report["runId"],
                "selectedTrial": final["trial"]["index"],
                "meanGrade": final["trial"]["meanGrade"],
                "testMetrics": final["testMetrics"],
            }
        )
    )
    return 0


def _cmd_serve(args) -> int:
    from .service import serve_blocking

    serve_blocking(args.run, args.port, args.ui)
    return 0


def _cmd_report(args) -> int:
    from .harness import render_report
    from .runstore import RunDir

    run = RunDir(args.run)
    report = json.loads(run.report_json_path.read_text())
    run.report_md_path.write_text(render_report(report))
    print(json.dumps({"report": str(run.report_md_path)}))
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "explain": _cmd_explain,
    "optimize": _cmd_optimize,
    "serve": _cmd_serve,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except XailoopError as exc:
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}), file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(json.dumps({"error": "FileNotFound", "detail": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
