"""Command-line interface.

Thin client over the library: every subcommand assembles the same
components the HTTP service uses, so a CLI classification and a POST
/classify with identical inputs produce identical responses.

Exit codes: 0 success, 2 configuration/input error, 3 backend failure,
1 any other pipeline error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import MODES, build_arbiter, build_backends, load_service_config
from .backends import SampleRef
from .datasets import dataset_stats, load_manifest, scan_image_folder
from .errors import BackendError, CascadeError, ConfigError, StructuralError
from .evaluation import (
    metrics,
    read_records_jsonl,
    run_pipeline,
    sweep_trigger,
    write_records_jsonl,
    write_sweep_csv,
    write_sweep_svg,
)
from .fusion import RouterConfig
from .pipeline import classify_sample
from .service import outcome_to_response
from .training import (
    TrainConfig,
    fused_top1,
    make_blobs,
    make_toy_ensemble,
    save_checkpoint,
    train,
    write_curves,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def cmd_classify(args) -> int:
    config = load_service_config(args.config)
    if args.mode:
        config = config.with_mode(args.mode)
    backends = build_backends(config)
    arbiter, descriptors = build_arbiter(config)
    features = (np.asarray(_parse_floats(args.features), dtype=np.float64)
                if args.features else None)
    sample = SampleRef(sample_id=args.sample_id, features=features,
                       image_path=args.image)
    outcome = classify_sample(backends, sample, config.fusion, config.router,
                              arbiter=arbiter, descriptors=descriptors)
    response = outcome_to_response(args.sample_id, outcome, config.class_names)
    print(response.model_dump_json(indent=2))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = load_service_config(args.config)
    if args.mode:
        config = config.with_mode(args.mode)
    backends = build_backends(config)
    arbiter, descriptors = build_arbiter(config)
    manifest = load_manifest(args.manifest)
    records = run_pipeline(manifest, backends, config.fusion, config.router,
                           arbiter=arbiter, split=args.split,
                           descriptors=descriptors, workers=args.workers)
    if not records:
        raise ConfigError(f"split {args.split!r} has no samples")
    report = metrics(records, len(manifest.class_names))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_records_jsonl(out / "records.jsonl", records)
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2)
    print(report.format_table())
    return EXIT_OK


def _parse_arbiter_model(text: str):
    if text == "perfect":
        return "perfect"
    kind, sep, value = text.partition(":")
    if kind == "fixed" and sep:
        try:
            return ("fixed", float(value))
        except ValueError:
            pass
    raise ConfigError(
        f"arbiter model must be 'perfect' or 'fixed:<p>', got {text!r}")


def cmd_sweep(args) -> int:
    records = read_records_jsonl(args.records)
    grid = [RouterConfig(tau_conf=c, tau_gap=g)
            for c in _parse_floats(args.tau_conf)
            for g in _parse_floats(args.tau_gap)]
    result = sweep_trigger(records, grid,
                           arbiter_model=_parse_arbiter_model(args.arbiter_model),
                           seed=args.seed)
    write_sweep_csv(args.out, result)
    if args.svg:
        write_sweep_svg(args.svg, result)
    op = result.operating_point
    print(f"operating point: tau_conf={op.tau_conf:g} tau_gap={op.tau_gap:g} "
          f"trigger_rate={op.trigger_rate:.4f} top1={op.top1:.4f}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    dataset = make_blobs(seed=args.seed, n_samples=args.n_samples,
                         n_classes=args.n_classes)
    val = make_blobs(seed=args.seed + 1, n_samples=args.n_samples // 4 or 1,
                     n_classes=args.n_classes)
    ensemble = make_toy_ensemble(seed=args.seed, n_models=args.n_models,
                                 n_classes=args.n_classes)
    config = TrainConfig(epochs=args.epochs, lr=args.lr,
                         batch_size=args.batch_size,
                         accum_steps=args.accum_steps, seed=args.seed)
    report = train(dataset, ensemble, config, val_dataset=val)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.bin", report.final_params,
                    [bb.model_id for bb in ensemble])
    write_curves(out / "curves.csv", report)
    top1 = fused_top1(ensemble, dataset)
    print(f"trained {args.epochs} epochs: train_top1={top1:.4f} "
          f"optimizer_steps={report.optimizer_steps} "
          f"skipped_batches={report.skipped_batch_count}")
    return EXIT_OK


def cmd_stats(args) -> int:
    if bool(args.manifest) == bool(args.scan):
        raise ConfigError("give exactly one of --manifest or --scan")
    manifest = (load_manifest(args.manifest) if args.manifest
                else scan_image_folder(args.scan))
    stats = dataset_stats(manifest)
    if args.json:
        blob = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in vars(stats).items()}
        print(json.dumps(blob, indent=2))
        return EXIT_OK
    lines = [
        f"samples          {stats.total_samples}",
        f"classes          {stats.n_classes}",
        "splits           " + " ".join(
            f"{k}={v}" for k, v in stats.split_sizes.items()),
        f"largest class    {stats.max_class} ({stats.max_count})",
        f"smallest class   {stats.min_class} ({stats.min_count})",
        f"mean per class   {stats.mean_count:.2f}",
        f"imbalance        {stats.imbalance_ratio:.2f}:1",
    ]
    lines.append("head: " + ", ".join(f"{n}={c}" for n, c in stats.head[:5]))
    lines.append("tail: " + ", ".join(f"{n}={c}" for n, c in stats.tail[:5]))
    print("\n".join(lines))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    config = load_service_config(args.config)
    app = create_app(config)
    uvicorn.run(app, host=args.host or config.listen_host,
                port=args.port or config.listen_port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="softcascade",
        description="Entropy-weighted ensemble classification with "
                    "LLM-arbitrated escalation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("classify", help="classify one sample, print JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--sample-id", required=True)
    p.add_argument("--features", help="comma-separated feature vector")
    p.add_argument("--image", help="path to an image payload")
    p.add_argument("--mode", choices=MODES, help="override the configured mode")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="run a manifest split end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--mode", choices=MODES, help="override the configured mode")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="re-apply router thresholds to a record log")
    p.add_argument("--records", required=True, help="records.jsonl from evaluate")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--svg", help="optional SVG plot path")
    p.add_argument("--tau-conf", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--tau-gap", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--arbiter-model", default="perfect",
                   help="'perfect' or 'fixed:<p>'")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train-toy", help="train the synthetic ensemble")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--accum-steps", type=int, default=1)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--n-samples", type=int, default=500)
    p.add_argument("--n-classes", type=int, default=5)
    p.add_argument("--n-models", type=int, default=4)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("stats", help="summarize a dataset manifest")
    p.add_argument("--manifest", help="manifest JSON path")
    p.add_argument("--scan", help="ImageFolder root to scan instead")
    p.add_argument("--json", action="store_true", help="emit JSON, not a table")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--config", required=True)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, StructuralError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except CascadeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
