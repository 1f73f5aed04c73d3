"""``mast`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analyzer
from .data_io import (
    checkpoint_to_params,
    load_checkpoint,
    read_manifest,
    read_tensor,
    read_wav,
    synth_dataset,
    write_tensor,
)
from .errors import ConfigError, InputError, MastError
from .frontend import SpectrogramConfig, log_mel
from .metrics import cluster_report, mean_average_precision, topk_accuracy
from .schedule import load_schedule, make_schedule

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
LOSS_ALIASES = {"ce": "ce-singlelabel", "bce": "bce-multilabel"}


def _print_trace(schedule, input_shape=None) -> None:
    feats = analyzer.shape_trace(schedule, input_shape)
    print("shape trace: " + " -> ".join(str(f) for f in feats))


def cmd_summarize(args) -> int:
    schedule = load_schedule(args.schedule)
    report = analyzer.analyze(schedule, mode=args.mode)
    if args.format == "csv":
        print(report.to_csv(), end="")
    elif args.format == "json":
        doc = json.loads(report.to_json())
        doc["trace"] = [str(f) for f in analyzer.shape_trace(schedule)]
        if args.compare:
            doc["compare"] = analyzer.compare(schedule, load_schedule(args.compare), schedule.input_shape).to_dict()
        print(json.dumps(doc, indent=2))
        return EXIT_OK
    else:
        _print_trace(schedule)
        print(report.to_text())
    if args.compare:
        other = load_schedule(args.compare)
        cmp = analyzer.compare(schedule, other, schedule.input_shape)
        print()
        print(cmp.to_text())
    return EXIT_OK


def cmd_spectrogram(args) -> int:
    cfg = SpectrogramConfig.from_json(args.config) if args.config else SpectrogramConfig()
    samples, rate = read_wav(args.input)
    if rate != cfg.sample_rate:
        raise ConfigError(f"{args.input} is sampled at {rate} Hz; expected {cfg.sample_rate} Hz (resampling is not supported)")
    spec = log_mel(samples, cfg)
    write_tensor(args.out, spec.values)
    print(f"wrote {args.out} {spec.values.shape[0]}x{spec.values.shape[1]}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, train_loop

    schedule = load_schedule(args.schedule)
    manifest = read_manifest(args.manifest)
    cfg = TrainConfig(
        base_lr=args.lr,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        batch_size=args.batch_size,
        loss=LOSS_ALIASES.get(args.loss, args.loss),
        seed=args.seed,
    )
    if manifest.entries:
        first = read_tensor(manifest.entries[0].path)
        if tuple(first.shape) != tuple(schedule.input_shape):
            schedule = _reshape_input(schedule, first.shape, args.schedule)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
    _, history = train_loop(
        manifest,
        schedule,
        cfg,
        out,
        log_path,
        log=None if args.quiet else lambda e: print(f"epoch {e.epoch:4d}  lr {e.lr:.3e}  loss {e.loss:.4f}  metric {e.metric:.4f}"),
    )
    print(f"wrote {out} and {log_path}")
    return EXIT_OK


def _reshape_input(schedule, shape, ref):
    from dataclasses import replace

    try:
        return replace(schedule, input_shape=tuple(int(s) for s in shape))
    except ConfigError as exc:
        raise ConfigError(f"schedule {ref!r} cannot take {tuple(shape)} inputs: {exc}") from exc


def _load_model(args):
    from .training import predict

    ckpt = load_checkpoint(args.ckpt)
    params = checkpoint_to_params(ckpt)
    manifest = read_manifest(args.manifest)
    if len(manifest) == 0:
        raise InputError("manifest is empty")
    manifest.validate(params.schedule.head_sizes)
    x = manifest.load_arrays()
    scores, emb = predict(params, x, args.batch_size)
    return manifest, params, scores, emb


def cmd_eval(args) -> int:
    manifest, params, scores, _ = _load_model(args)
    result = {}
    for j, c in enumerate(params.schedule.head_sizes):
        groups = [e.labels if j == 0 else e.labels2 for e in manifest.entries]
        if args.metric == "map":
            t = np.zeros((len(groups), c))
            for i, g in enumerate(groups):
                t[i, g] = 1
            value = mean_average_precision(scores[j], t)
        else:
            k = 1 if args.metric == "top1" else 5
            value = topk_accuracy(scores[j], np.array([g[0] for g in groups]), min(k, c))
        result[f"head{j}"] = value
    if len(scores) > 1 and args.metric == "top1":
        both = np.ones(len(manifest), dtype=bool)
        for j in range(len(scores)):
            labels = np.array([(e.labels if j == 0 else e.labels2)[0] for e in manifest.entries])
            both &= scores[j].argmax(1) == labels
        result["action"] = float(both.mean())
    result["metric"] = args.metric
    result["n"] = len(manifest)
    print(json.dumps(result))
    return EXIT_OK


def cmd_embed(args) -> int:
    manifest, _, _, emb = _load_model(args)
    write_tensor(args.out, emb.astype(np.float32))
    labels_path = Path(args.out).with_suffix(".labels.json")
    labels_path.write_text(json.dumps([e.labels[0] for e in manifest.entries]))
    print(f"wrote {args.out} {emb.shape[0]}x{emb.shape[1]} and {labels_path}")
    return EXIT_OK


def _read_labels(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".jsonl":
        return np.array([e.labels[0] for e in read_manifest(path).entries])
    if path.suffix == ".mtsr":
        return read_tensor(path).astype(np.int64).reshape(-1)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError:
        doc = [int(t) for t in path.read_text().split()]
    return np.asarray(doc, dtype=np.int64).reshape(-1)


def cmd_cluster_metrics(args) -> int:
    emb = read_tensor(args.embeddings)
    if emb.ndim != 2:
        raise InputError(f"embeddings must be a 2-d matrix, got shape {emb.shape}")
    labels = _read_labels(args.labels)
    if len(labels) != len(emb):
        raise InputError(f"{len(labels)} labels for {len(emb)} embeddings")
    print(json.dumps(cluster_report(emb, labels, seed=args.seed, restarts=args.restarts)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .training import grad_check

    schedule = make_schedule(args.schedule) if not Path(args.schedule).exists() else load_schedule(args.schedule)
    report = grad_check(
        schedule,
        seed=args.seed,
        n_coords=args.coords,
        corrupt="layer_norm" if args.corrupt else None,
        loss=LOSS_ALIASES.get(args.loss, args.loss),
    )
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_synth(args) -> int:
    shape = tuple(int(s) for s in args.shape.split("x"))
    if len(shape) != 2:
        raise ConfigError("--shape must look like 32x128")
    path = synth_dataset(args.out, args.n, args.classes, args.seed, shape)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mast", description="Multiscale spectrogram transformer toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("summarize", help="shape trace, parameter and MAC report")
    s.add_argument("--schedule", required=True, help="preset name or JSON schedule file")
    s.add_argument("--mode", choices=analyzer.MODES, default="projections-only")
    s.add_argument("--compare", help="second schedule for ratio lines")
    s.add_argument("--format", choices=("text", "csv", "json"), default="text")
    s.set_defaults(func=cmd_summarize)

    s = sub.add_parser("spectrogram", help="16-bit PCM WAV to a log-mel MTSR tensor")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON frontend config")
    s.set_defaults(func=cmd_spectrogram)

    s = sub.add_parser("train", help="train on a manifest and write a checkpoint")
    s.add_argument("--manifest", required=True)
    s.add_argument("--schedule", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="JSONL log path (default: <out>.log.jsonl)")
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--lr", type=float, default=1e-5)
    s.add_argument("--weight-decay", type=float, default=0.01)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--loss", choices=("ce", "bce", "ce-singlelabel", "bce-multilabel"), default="ce")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "score a checkpoint"), ("embed", cmd_embed, "dump class-token embeddings")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--manifest", required=True)
        s.add_argument("--ckpt", required=True)
        if name == "eval":
            s.add_argument("--metric", choices=("map", "top1", "top5"), default="top1")
        else:
            s.add_argument("--out", required=True)
        s.add_argument("--batch-size", type=int, default=16)
        s.set_defaults(func=func)

    s = sub.add_parser("cluster-metrics", help="silhouette, ARI and homogeneity of embeddings")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--labels", required=True, help="JSON list, whitespace-separated ints, MTSR vector or manifest")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--restarts", type=int, default=10)
    s.set_defaults(func=cmd_cluster_metrics)

    s = sub.add_parser("gradcheck", help="finite-difference check of the tiny network")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--schedule", default="gradcheck-tiny")
    s.add_argument("--coords", type=int, default=200)
    s.add_argument("--loss", choices=("ce", "bce", "ce-singlelabel", "bce-multilabel"), default="bce")
    s.add_argument("--corrupt", action="store_true", help="negate one backward rule to confirm the check fails")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic spectrogram dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n", type=int, default=32)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--shape", default="32x128")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MastError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
