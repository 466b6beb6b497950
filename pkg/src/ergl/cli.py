"""Command-line interface.

Exit codes: 0 ok, 2 input error, 3 numeric failure, 4 compatibility error.
Every subcommand accepts ``--json`` for machine-readable output; training
always streams one JSON epoch report per line on stdout.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .audio import log_mel, read_wav
from .config import read_config
from .exceptions import (CheckpointError, CompatibilityError, ConfigurationError, FormatError,
                         InputTooShortError, NumericalError)
from .export import ACTIVE_THRESHOLD, build_export, to_dot
from .manifest import DatasetManifest
from .ranking import EventVocabulary, accumulate, project_labels, select_top_n
from .synth import EVENT_NAMES_FILE, file_digest, gen_synth_dataset
from .training import Dataset, evaluate, predict_outputs, train

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_COMPAT = 0, 2, 3, 4

log = logging.getLogger("ergl")


class CLIError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _emit(obj, as_json, text, stream=None):
    stream = stream or sys.stdout
    print(json.dumps(obj, sort_keys=True) if as_json else text, file=stream, flush=True)


# -- shared helpers ----------------------------------------------------------

def _event_names(manifest_path):
    path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), EVENT_NAMES_FILE)
    if not os.path.exists(path):
        return {}
    with open(path) as fh:
        return {int(k): v for k, v in json.load(fh).items()}


def _dataset(manifest, rows, vocab, scene_labels, cache_dir):
    targets = None
    if vocab is not None:
        targets = project_labels(manifest.pseudo_labels(rows), vocab)
    try:
        labels = manifest.label_indices(rows, scene_labels)
    except FormatError as exc:
        raise CLIError(f"manifest scenes do not match the checkpoint: {exc}", EXIT_COMPAT) from None
    return Dataset(manifest.features(rows, cache_dir), labels, targets, [r.clip_id for r in rows])


def _fit(config, manifest, manifest_path, cache_dir, on_epoch=None):
    """Vocabulary from the train split, then joint training; returns (result, vocab)."""
    train_rows = manifest.split("train")
    if not train_rows:
        raise CLIError(f"{manifest_path}: no train rows")
    vocab = select_top_n(accumulate(manifest.pseudo_labels(train_rows)), config.n_events,
                         _event_names(manifest_path))
    tr = _dataset(manifest, train_rows, vocab, manifest.scene_labels, cache_dir)
    val_rows = manifest.split("val")
    va = _dataset(manifest, val_rows, None, manifest.scene_labels, cache_dir) if val_rows else None
    return train(config, tr, va, on_epoch=on_epoch), vocab


def _load_checkpoint(path):
    ck = ckpt_io.load(path)
    if len(ck.vocabulary.event_ids) != ck.config.n_events:
        raise CLIError(
            f"{path}: vocabulary has {len(ck.vocabulary.event_ids)} events but config says n={ck.config.n_events}",
            EXIT_COMPAT,
        )
    try:
        model = ck.build_model()
    except (KeyError, ValueError) as exc:
        raise CLIError(f"{path}: tensors do not fit the stored config ({exc})", EXIT_COMPAT) from None
    return ck, model


def _check_vocab(ck, vocab_path):
    if not vocab_path:
        return
    other = EventVocabulary.load(vocab_path)
    if other.event_ids != ck.vocabulary.event_ids:
        raise CLIError(
            f"vocabulary {vocab_path} lists events {other.event_ids}, checkpoint was trained on "
            f"{ck.vocabulary.event_ids}",
            EXIT_COMPAT,
        )


def _clip_features(wav_path, dtype):
    feats = log_mel(read_wav(wav_path))
    return feats[None].astype(dtype)


def _scene_name(ck, k):
    return ck.scene_labels[k] if k < len(ck.scene_labels) else f"scene_{k}"


def _softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


# -- subcommands -------------------------------------------------------------

def cmd_train(args):
    config = read_config(args.config)
    manifest = DatasetManifest.read(args.manifest)
    if len(manifest.scene_labels) != config.n_scenes:
        config = dataclasses.replace(config, n_scenes=max(2, len(manifest.scene_labels)))
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "log.jsonl")
    with open(log_path, "w") as log_fh:
        def on_epoch(rep):
            line = rep.to_json()
            print(line, flush=True)
            log_fh.write(line + "\n")
            log_fh.flush()

        result, vocab = _fit(config, manifest, args.manifest, args.cache, on_epoch)
    ck = ckpt_io.Checkpoint.from_model(result.model, config, vocab, manifest.scene_labels,
                                       optimizer=result.optimizer,
                                       extra={"best_epoch": result.best_epoch})
    ckpt_path = os.path.join(args.out, "model.erglckpt")
    ckpt_io.save(ck, ckpt_path)
    vocab.save(os.path.join(args.out, "vocab.json"))
    summary = {"checkpoint": ckpt_path, "best_epoch": result.best_epoch,
               "epochs": len(result.reports), "sha256": file_digest(ckpt_path)}
    _emit(summary, args.json,
          f"saved {ckpt_path} (best epoch {result.best_epoch}, sha256 {summary['sha256'][:16]})",
          sys.stderr if not args.json else None)
    return EXIT_OK


def cmd_eval(args):
    ck, model = _load_checkpoint(args.checkpoint)
    _check_vocab(ck, args.vocab)
    manifest = DatasetManifest.read(args.manifest)
    rows = manifest.split(args.split)
    if not rows:
        raise CLIError(f"{args.manifest}: split {args.split!r} is empty")
    ds = _dataset(manifest, rows, None, ck.scene_labels, args.cache)
    with ad.precision(ck.config.precision):
        acc, cm = evaluate(model, ds, ck.config.n_scenes)
    names = [_scene_name(ck, k) for k in range(ck.config.n_scenes)]
    out = {"split": args.split, "accuracy": round(100 * acc, 2), "n_clips": len(ds),
           "labels": names, "confusion": cm.tolist()}
    conf_path = args.confusion or os.path.join(
        os.path.dirname(os.path.abspath(args.checkpoint)), f"confusion_{args.split}.json")
    with open(conf_path, "w") as fh:
        json.dump(out, fh, indent=2)
    _emit(out, args.json, f"Acc: {100 * acc:.2f}% on {len(ds)} {args.split} clips (confusion: {conf_path})")
    return EXIT_OK


def _infer(ck, model, wav_path, keep_graphs=False):
    feats = _clip_features(wav_path, model.parameters()[0].data.dtype)
    model.config.backbone_config().check_input(feats.shape[1])
    with ad.precision(ck.config.precision), ad.no_grad():
        model.eval()
        return model(ad.Tensor(feats), keep_graphs=keep_graphs)


def cmd_classify(args):
    ck, model = _load_checkpoint(args.checkpoint)
    out = _infer(ck, model, args.wav)
    logits = out.logits.data[0].astype(np.float64)
    probs = _softmax(logits)
    k = int(probs.argmax())
    events = [{"index": idx, "name": ck.vocabulary.name(i), "probability": float(out.event_probs.data[0, i])}
              for i, idx in enumerate(ck.vocabulary.event_ids)]
    events.sort(key=lambda e: (-e["probability"], e["index"]))
    result = {
        "scene": _scene_name(ck, k),
        "scene_probabilities": {_scene_name(ck, j): float(p) for j, p in enumerate(probs)},
        "events": events[: args.top] if args.top else events,
    }
    text = [f"scene: {result['scene']} ({probs[k]:.4f})"]
    text += [f"  {e['name']:<24s} {e['probability']:.4f}" for e in result["events"]]
    _emit(result, args.json, "\n".join(text))
    return EXIT_OK


def cmd_export_graph(args):
    if args.format not in ("json", "dot"):
        raise CLIError(f"unknown export format {args.format!r}; choose json or dot")
    ck, model = _load_checkpoint(args.checkpoint)
    out = _infer(ck, model, args.wav, keep_graphs=True)
    graph = out.graphs[args.layer]
    names = [ck.vocabulary.name(i) for i in range(ck.vocabulary.n)]
    scene = _scene_name(ck, int(out.logits.data[0].argmax()))
    export = build_export(names, out.event_probs.data[0], graph.edge_feats.data[0],
                          args.threshold, scene)
    export.layout["layer"] = graph.layer_index
    body = export.to_json() if args.format == "json" else to_dot(export)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(body if body.endswith("\n") else body + "\n")
        summary = {"path": args.out, "format": args.format, "active": sorted(export.active_set()),
                   "n_edges": len(export.edges)}
        _emit(summary, args.json, f"wrote {args.out}: {len(export.active_set())} active nodes, "
                                  f"{len(export.edges)} edges")
    else:
        sys.stdout.write(body if body.endswith("\n") else body + "\n")
    return EXIT_OK


def _parse_values(axis, text):
    try:
        values = [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise CLIError(f"--values must be integers, got {text!r}") from None
    if not values:
        raise CLIError("--values is empty")
    lo, hi = (1, 527) if axis == "n" else (1, 64)
    bad = [v for v in values if not lo <= v <= hi]
    if bad:
        raise CLIError(f"values {bad} out of range [{lo}, {hi}] for axis {axis}")
    return values


def sweep_table(rows, axis):
    label = "n" if axis == "n" else "U"
    lines = [f"{label:>4s} | Acc (%) mean ± std | runs", "-----+--------------------+-----"]
    for r in rows:
        lines.append(f"{r['value']:>4d} | {r['mean']:7.2f} ± {r['std']:<9.2f}| {r['runs']:>4d}")
    return "\n".join(lines)


def cmd_sweep(args):
    base = read_config(args.config)
    manifest = DatasetManifest.read(args.manifest)
    values = _parse_values(args.axis, args.values)
    eval_split = "test" if manifest.split("test") else "val"
    rows = manifest.split(eval_split)
    if not rows:
        raise CLIError(f"{args.manifest}: no test or val rows to score the sweep")
    overrides = {"n_scenes": max(2, len(manifest.scene_labels))}
    if args.epochs:
        overrides["epochs"] = args.epochs
    table = []
    for value in values:
        key = "n_events" if args.axis == "n" else "n_layers"
        accs = []
        for s in range(args.seeds):
            cfg = dataclasses.replace(base, **overrides, **{key: value, "seed": base.seed + s})
            result, _ = _fit(cfg, manifest, args.manifest, args.cache)
            ds = _dataset(manifest, rows, None, manifest.scene_labels, args.cache)
            with ad.precision(cfg.precision):
                acc, _ = evaluate(result.model, ds, cfg.n_scenes)
            accs.append(100 * acc)
            log.info("%s=%d seed=%d acc=%.2f", args.axis, value, cfg.seed, 100 * acc)
        table.append({"value": value, "mean": float(np.mean(accs)), "std": float(np.std(accs)),
                      "runs": len(accs), "accuracies": accs})
    _emit({"axis": args.axis, "split": eval_split, "rows": table}, args.json, sweep_table(table, args.axis))
    return EXIT_OK


def cmd_gen_synth(args):
    path = gen_synth_dataset(args.out, seed=args.seed, clips_per_scene=args.clips_per_scene,
                             duration=args.duration)
    info = {"manifest": path, "sha256": file_digest(path)}
    _emit(info, args.json, f"wrote {path}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="ergl", description="Event-relational graph scene classification")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        sp.set_defaults(func=fn)
        return sp

    sp = add("train", cmd_train, "train on a manifest")
    sp.add_argument("--config", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--cache", default=None, help="directory for cached log-mel features")

    sp = add("eval", cmd_eval, "accuracy and confusion matrix on a split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--vocab", default=None, help="vocabulary JSON the data was labelled with")
    sp.add_argument("--confusion", default=None, help="where to write the confusion JSON")
    sp.add_argument("--cache", default=None)

    sp = add("classify", cmd_classify, "classify one WAV clip")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("wav")
    sp.add_argument("--top", type=int, default=0, help="show only the top-k events")

    sp = add("export-graph", cmd_export_graph, "export the event-relational graph of one clip")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("wav")
    sp.add_argument("--format", default="json")
    sp.add_argument("--out", default=None)
    sp.add_argument("--layer", type=int, default=-1, help="graph layer to export (default: last)")
    sp.add_argument("--threshold", type=float, default=ACTIVE_THRESHOLD)

    sp = add("sweep", cmd_sweep, "accuracy over n or U values and seeds")
    sp.add_argument("--config", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--axis", required=True, choices=("n", "U"))
    sp.add_argument("--values", required=True, help="comma-separated integers")
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--epochs", type=int, default=0, help="override config epochs")
    sp.add_argument("--cache", default=None)

    sp = add("gen-synth", cmd_gen_synth, "write the synthetic scene corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--clips-per-scene", type=int, default=20)
    sp.add_argument("--duration", type=float, default=2.0)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    as_json = getattr(args, "json", False)
    try:
        return args.func(args)
    except CLIError as exc:
        code, msg = exc.code, str(exc)
    except CompatibilityError as exc:
        code, msg = EXIT_COMPAT, str(exc)
    except NumericalError as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    except (ConfigurationError, FormatError, InputTooShortError, CheckpointError) as exc:
        code, msg = EXIT_INPUT, str(exc)
    except (OSError, ValueError) as exc:
        code, msg = EXIT_INPUT, str(exc)
    if as_json:
        print(json.dumps({"error": msg, "exit_code": code}), flush=True)
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
