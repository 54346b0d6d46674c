"""Single entry point exposing the pipeline as reproducible subcommands.

Every command reads its inputs, writes all artifacts under one output
directory (never touching inputs), and finishes by writing run metadata.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure; failures
print one machine-readable line `error: <category>: <message>` to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, dataio, persist
from .dataio import SyntheticSpec
from .fusion import resolve_layer_set
from .model import TrainConfig, gradient_check, train
from .quantize import OPENSMILE_CATEGORIES, assign, fit_opensmile_codebooks, kmeans_fit, quantize_opensmile, reconstruct
from .sweep import (
    AUGMENTATIONS,
    CodebookCache,
    SweepGrid,
    augmentation_report,
    evaluate,
    gains_to_csv,
    load_dataset,
    prepare_items,
    rows_to_csv,
    rows_to_text,
    run_sweep,
)

GRADCHECK_THRESHOLD = 1e-3


class ConfigError(Exception):
    exit_code = 2


class DataError(Exception):
    exit_code = 3


class NumericError(Exception):
    exit_code = 4


# --- config plumbing ----------------------------------------------------------


def _load_json_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top-level value must be an object")
    return doc


def _field(doc: dict, path: str, kind, required=True, default=None, pred=None, pred_desc=""):
    """Fetch doc[leaf] with a dotted path for error messages."""
    leaf = path.split(".")[-1]
    if leaf not in doc:
        if required:
            raise ConfigError(f"{path}: missing required field")
        return default
    value = doc[leaf]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is not None and (not isinstance(value, kind) or isinstance(value, bool) and kind is not bool):
        raise ConfigError(f"{path}: expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    if pred is not None and not pred(value):
        raise ConfigError(f"{path}: {pred_desc}")
    return value


def _train_config_from(doc: dict, prefix: str) -> TrainConfig:
    kwargs = {}
    fields = {
        "learning_rate": (float, lambda v: v >= 0, "must be >= 0"),
        "batch_size": (int, lambda v: v >= 1, "must be >= 1"),
        "epochs": (int, lambda v: v >= 1, "must be >= 1"),
        "seed": (int, None, ""),
        "beta1": (float, lambda v: 0 <= v < 1, "must be in [0, 1)"),
        "beta2": (float, lambda v: 0 <= v < 1, "must be in [0, 1)"),
        "adam_eps": (float, lambda v: v > 0, "must be > 0"),
        "clip_norm": (float, lambda v: v > 0, "must be > 0"),
        "hidden": (int, lambda v: v >= 1, "must be >= 1"),
    }
    for name, (kind, pred, desc) in fields.items():
        value = _field(doc, f"{prefix}{name}", kind, required=False, pred=pred, pred_desc=desc)
        if value is not None:
            kwargs[name] = value
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"{prefix}{sorted(unknown)[0]}: unknown field")
    return TrainConfig(**kwargs)


def _synthetic_spec_from(doc: dict) -> SyntheticSpec:
    _field(doc, "n_per_class", int, pred=lambda v: v >= 1, pred_desc="must be >= 1")
    _field(doc, "layer_count", int, pred=lambda v: v >= 1, pred_desc="must be >= 1")
    _field(doc, "feature_dim", int, pred=lambda v: v >= 1, pred_desc="must be >= 1")
    _field(doc, "t_range", list, pred=lambda v: len(v) == 2, pred_desc="must be [min, max]")
    _field(doc, "layer_informativeness", list)
    _field(doc, "paralinguistic_gain", float, pred=lambda v: v >= 0, pred_desc="must be >= 0")
    _field(doc, "noise_sigma", float, pred=lambda v: v > 0, pred_desc="must be > 0")
    _field(doc, "seed", int)
    try:
        return SyntheticSpec.from_json(doc)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"synthetic spec: {exc}") from exc


def _grid_from(doc: dict) -> SweepGrid:
    _field(doc, "ks", list, pred=lambda v: len(v) >= 1, pred_desc="must be non-empty")
    _field(doc, "layer_sets", list, pred=lambda v: len(v) >= 1, pred_desc="must be non-empty")
    _field(doc, "seeds", list, pred=lambda v: len(v) >= 1, pred_desc="must be non-empty")
    augs = _field(doc, "augmentations", list, required=False, default=["none"])
    for aug in augs:
        if aug != "none" and aug not in AUGMENTATIONS:
            raise ConfigError(f"augmentations: unknown augmentation {aug!r}")
    train_doc = _field(doc, "train", dict, required=False, default={})
    grid_doc = dict(doc)
    grid_doc["train"] = {}
    try:
        grid = SweepGrid.from_json(grid_doc)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"sweep grid: {exc}") from exc
    return replace(grid, train=_train_config_from(train_doc, "train."))


# --- run directory and metadata -------------------------------------------------


def _out_dir(args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get("DISQ_RUN_DIR", "runs")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_digest(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _write_metadata(out: Path, command: str, argv, config_payload, seeds, started: float) -> None:
    outputs = sorted(
        str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "run_metadata.json"
    )
    doc = {
        "command": command,
        "argv": list(argv),
        "config_digest": _config_digest(config_payload),
        "seeds": list(seeds),
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "disq": __version__,
        },
        "wall_time_s": round(time.time() - started, 3),
        "outputs": outputs,
    }
    (out / "run_metadata.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# --- shared data helpers ---------------------------------------------------------


def _load_dataset(dataset_dir):
    try:
        return load_dataset(dataset_dir)
    except (FileNotFoundError, dataio.FeatureFileError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"dataset {dataset_dir}: {exc}") from exc


def _train_layer_frames(manifest, layer: int) -> np.ndarray:
    frames = []
    for rec in manifest.records:
        seq = dataio.read_feature_file(manifest.root / rec.layer_paths[layer], stream_id=f"layer:{layer}")
        frames.append(seq.frames)
    return np.concatenate(frames).astype(np.float64)


# --- subcommands ------------------------------------------------------------------


def cmd_gen(args, argv) -> int:
    started = time.time()
    doc = _load_json_config(args.spec)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.n_per_class is not None:
        doc["n_per_class"] = args.n_per_class
    spec = _synthetic_spec_from(doc)
    out = _out_dir(args, "gen")
    try:
        dataio.generate_synthetic(spec, out)
    except OSError as exc:
        raise DataError(str(exc)) from exc
    _write_metadata(out, "gen", argv, spec.to_json(), [spec.seed], started)
    print(f"dataset written to {out}")
    return 0


def cmd_codebooks(args, argv) -> int:
    started = time.time()
    out = _out_dir(args, "codebooks")
    try:
        manifest = dataio.load_split(args.dataset, "train")
    except (FileNotFoundError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"dataset {args.dataset}: {exc}") from exc
    try:
        _, layers = resolve_layer_set(args.layers, manifest.layer_count)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.k < 1:
        raise ConfigError("--k: must be >= 1")

    index = {"k": args.k, "seed": args.seed, "layers": list(layers), "opensmile": bool(args.opensmile)}
    try:
        for layer in layers:
            frames = _train_layer_frames(manifest, layer)
            cb = kmeans_fit(frames, args.k, args.seed, stream_id=f"layer:{layer}")
            persist.save_codebook(cb, out / f"layer_{layer:02d}", extra={"train_frames": len(frames)})
        if args.opensmile:
            osm_frames = []
            for rec in manifest.records:
                if rec.opensmile_path is not None:
                    osm_frames.append(dataio.read_feature_file(manifest.root / rec.opensmile_path).frames)
            if not osm_frames:
                raise DataError("no opensmile streams in the train split")
            stacked = np.concatenate(osm_frames).astype(np.float64)
            for name, cb in fit_opensmile_codebooks(stacked, args.seed).items():
                persist.save_codebook(cb, out / f"osm_{name}", extra={"train_frames": len(stacked)})
    except dataio.FeatureFileError as exc:
        raise DataError(str(exc)) from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    _write_metadata(out, "codebooks", argv, index, [args.seed], started)
    print(f"codebooks written to {out}")
    return 0


def _load_codebook_dir(codebook_dir):
    codebook_dir = Path(codebook_dir)
    index_path = codebook_dir / "index.json"
    if not index_path.is_file():
        raise DataError(f"{codebook_dir}: missing index.json")
    index = json.loads(index_path.read_text())
    layer_books = {
        layer: persist.load_codebook(codebook_dir / f"layer_{layer:02d}") for layer in index["layers"]
    }
    osm_books = None
    if index.get("opensmile"):
        osm_books = {
            cat.name: persist.load_codebook(codebook_dir / f"osm_{cat.name}")
            for cat in OPENSMILE_CATEGORIES.categories
        }
    return index, layer_books, osm_books


def cmd_tokenize(args, argv) -> int:
    started = time.time()
    out = _out_dir(args, "tokenize")
    try:
        manifest = dataio.load_split(args.dataset, args.split)
        index, layer_books, osm_books = _load_codebook_dir(args.codebooks)
    except (FileNotFoundError, ValueError, json.JSONDecodeError, dataio.FeatureFileError) as exc:
        raise DataError(str(exc)) from exc

    def dump_tokens(path, payload):
        path.write_text(json.dumps(payload, indent=None, sort_keys=True) + "\n")

    try:
        for rec in manifest.records:
            utt = dataio.load_utterance(manifest, rec)
            utt_dir = out / "tokens" / rec.utt_id
            utt_dir.mkdir(parents=True, exist_ok=True)
            for layer, cb in layer_books.items():
                tokens = assign(cb, utt.layers[layer])
                dump_tokens(
                    utt_dir / f"layer_{layer:02d}.tokens.json",
                    {"stream_id": cb.stream_id, "k": cb.k, "indices": tokens.indices.tolist()},
                )
                dataio.write_feature_file(
                    reconstruct(cb, tokens), utt_dir / f"layer_{layer:02d}.recon.dsqf"
                )
            if osm_books is not None and utt.opensmile is not None:
                tokens, recon = quantize_opensmile(utt.opensmile, osm_books)
                dump_tokens(
                    utt_dir / "opensmile.tokens.json",
                    {
                        name: {"k": seq.k, "indices": seq.indices.tolist()}
                        for name, seq in tokens.items()
                    },
                )
                dataio.write_feature_file(recon, utt_dir / "opensmile.recon.dsqf")
    except (ValueError, dataio.FeatureFileError) as exc:
        raise DataError(str(exc)) from exc
    _write_metadata(out, "tokenize", argv, {"split": args.split, "k": index["k"]}, [index["seed"]], started)
    print(f"tokens written to {out}")
    return 0


def _train_doc_from_args(args) -> dict:
    doc = _load_json_config(args.config) if args.config else {}
    if args.layer_set is not None:
        doc["layer_set"] = args.layer_set
    if args.k is not None:
        doc["k"] = args.k
    if args.continuous:
        doc["k"] = None
    if args.aug is not None:
        doc["aug"] = args.aug
    if args.seed is not None:
        doc.setdefault("train", {})["seed"] = args.seed
    if args.epochs is not None:
        doc.setdefault("train", {})["epochs"] = args.epochs
    return doc


def _validate_train_doc(doc: dict, layer_count: int):
    layer_set = _field(doc, "layer_set", str, required=False, default="all")
    try:
        name, layers = resolve_layer_set(layer_set, layer_count)
    except ValueError as exc:
        raise ConfigError(f"layer_set: {exc}") from exc
    k = doc.get("k", 256)
    if k is not None and (not isinstance(k, int) or isinstance(k, bool) or k < 1):
        raise ConfigError("k: expected a positive integer or null")
    aug = _field(doc, "aug", str, required=False, default="none")
    if aug != "none" and aug not in AUGMENTATIONS:
        raise ConfigError(f"aug: unknown augmentation {aug!r}")
    codebook_seed = _field(doc, "codebook_seed", int, required=False, default=0)
    train_cfg = _train_config_from(doc.get("train", {}), "train.")
    return name, layers, k, aug, codebook_seed, train_cfg


def cmd_train(args, argv) -> int:
    started = time.time()
    out = _out_dir(args, "train")
    ds = _load_dataset(args.dataset)
    doc = _train_doc_from_args(args)
    name, layers, k, aug, codebook_seed, train_cfg = _validate_train_doc(doc, ds.layer_count)

    cache = CodebookCache()
    try:
        splits = {
            split: prepare_items(ds, split, layers, k, cache, codebook_seed, aug)
            for split in ("train", "dev", "test")
        }
        result = train(splits["train"], splits["dev"], train_cfg)
    except FloatingPointError as exc:
        raise NumericError(str(exc)) from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    meta = {
        "layer_set": name,
        "layers": list(layers),
        "k": k,
        "aug": aug,
        "codebook_seed": codebook_seed,
        "train": vars(train_cfg).copy(),
        "train_hash": ds.train_hash,
        "best_epoch": result.best_epoch,
        "dev_macro_f1": result.history[result.best_epoch].dev_macro_f1,
    }
    persist.save_checkpoint(out / "checkpoint", result.params, meta)
    history = [[h.train_loss, h.dev_macro_f1] for h in result.history]
    (out / "history.json").write_text(json.dumps(history) + "\n")
    _write_metadata(out, "train", argv, meta, [train_cfg.seed], started)
    print(
        f"checkpoint written to {out / 'checkpoint'} "
        f"(best epoch {result.best_epoch}, dev macro F1 {meta['dev_macro_f1']:.4f})"
    )
    return 0


def cmd_eval(args, argv) -> int:
    started = time.time()
    out = _out_dir(args, "eval")
    if args.split not in dataio.SPLITS:
        raise ConfigError(f"--split: must be one of {dataio.SPLITS}")
    ds = _load_dataset(args.dataset)
    try:
        params, meta = persist.load_checkpoint(args.checkpoint)
    except (FileNotFoundError, json.JSONDecodeError, dataio.FeatureFileError, KeyError) as exc:
        raise DataError(f"checkpoint {args.checkpoint}: {exc}") from exc
    if meta["train_hash"] != ds.train_hash:
        raise DataError("checkpoint was trained on a different dataset (train manifest hash mismatch)")

    cache = CodebookCache()
    try:
        items = prepare_items(
            ds, args.split, tuple(meta["layers"]), meta["k"], cache, meta["codebook_seed"], meta["aug"]
        )
        row = evaluate(
            params,
            items,
            tuple(meta["layers"]),
            layer_set=meta["layer_set"],
            k=meta["k"],
            seed=meta["train"]["seed"],
            aug=meta["aug"],
        )
    except FloatingPointError as exc:
        raise NumericError(str(exc)) from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    metrics_doc = {
        "split": args.split,
        "macro_f1": row.macro_f1,
        "per_class_f1": [float(v) for v in row.per_class_f1],
        "mean_alpha": {str(layer): v for layer, v in sorted(row.mean_alpha.items())},
    }
    (out / "metrics.json").write_text(json.dumps(metrics_doc, indent=1, sort_keys=True) + "\n")
    (out / "row.csv").write_text(rows_to_csv([row]))
    _write_metadata(out, "eval", argv, metrics_doc, [meta["train"]["seed"]], started)
    print(f"{args.split} macro F1 = {row.macro_f1:.4f} (metrics in {out})")
    return 0


def cmd_sweep(args, argv) -> int:
    started = time.time()
    out = _out_dir(args, "sweep")
    grid = _grid_from(_load_json_config(args.grid))
    if args.workers < 1:
        raise ConfigError("--workers: must be >= 1")
    ds = _load_dataset(args.dataset)
    result = run_sweep(grid, ds, workers=args.workers)
    if not result.rows:
        for failure in result.failures:
            print(f"failed cell: {failure}", file=sys.stderr)
        raise NumericError("every sweep cell failed")

    (out / "results.csv").write_text(rows_to_csv(result.rows))
    (out / "results.txt").write_text(rows_to_text(result.rows))
    if any(r.aug != "none" for r in result.rows):
        gains = augmentation_report(result.rows)
        (out / "aug_report.csv").write_text(gains_to_csv(gains))
    if result.failures:
        lines = [
            f"{f.layer_set} K={f.k} aug={f.aug} seed={f.seed}: {f.error}" for f in result.failures
        ]
        (out / "failures.txt").write_text("\n".join(lines) + "\n")
        print(f"warning: {len(result.failures)} cell runs failed (see failures.txt)", file=sys.stderr)
    grid_payload = {
        "ks": list(grid.ks),
        "layer_sets": list(grid.layer_sets),
        "seeds": list(grid.seeds),
        "augmentations": list(grid.augmentations),
        "include_continuous": grid.include_continuous,
        "codebook_seed": grid.codebook_seed,
        "train": vars(grid.train).copy(),
    }
    _write_metadata(out, "sweep", argv, grid_payload, list(grid.seeds), started)
    print(f"sweep results written to {out} ({len(result.rows)} rows)")
    return 0


def cmd_gradcheck(args, argv) -> int:
    started = time.time()
    out = _out_dir(args, "gradcheck")
    err = gradient_check(seed=args.seed)
    report = {"seed": args.seed, "max_rel_err": err, "threshold": GRADCHECK_THRESHOLD}
    (out / "gradcheck.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    _write_metadata(out, "gradcheck", argv, {"seed": args.seed}, [args.seed], started)
    print(f"gradcheck seed={args.seed} max_rel_err={err:.6e} threshold={GRADCHECK_THRESHOLD:g}")
    if not err < GRADCHECK_THRESHOLD:
        raise NumericError(f"gradient check failed: {err:.6e} >= {GRADCHECK_THRESHOLD:g}")
    return 0


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="disq",
        description="Discrete-token classification pipeline: synthetic data, codebooks, fusion training, sweeps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset from a spec JSON")
    p.add_argument("--spec", required=True, help="path to a synthetic spec JSON")
    p.add_argument("--out", help="output directory (default: $DISQ_RUN_DIR/gen or ./runs/gen)")
    p.add_argument("--seed", type=int, help="override the spec's seed")
    p.add_argument("--n-per-class", type=int, help="override the spec's utterances per class")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("codebooks", help="train per-layer k-means codebooks on the train split")
    p.add_argument("--dataset", required=True, help="dataset directory (with manifest_train.json)")
    p.add_argument("--layers", default="all", help="layer set name or comma-separated indices")
    p.add_argument("--k", type=int, default=256, help="codebook size (default 256)")
    p.add_argument("--seed", type=int, default=0, help="codebook training seed (default 0)")
    p.add_argument("--opensmile", action="store_true", help="also fit the 7 category codebooks")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_codebooks)

    p = sub.add_parser("tokenize", help="dump token indices and reconstructions for one split")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--split", default="train", choices=dataio.SPLITS, help="split to tokenize")
    p.add_argument("--codebooks", required=True, help="codebook directory from `disq codebooks`")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("train", help="train the fusion + pooling + classifier head")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--config", help="train config JSON (flags override its scalars)")
    p.add_argument("--layer-set", help="layer set name or comma-separated indices")
    p.add_argument("--k", type=int, help="codebook size")
    p.add_argument("--continuous", action="store_true", help="bypass quantization (raw features)")
    p.add_argument("--aug", help="paralinguistic augmentation: none, a category name, or all")
    p.add_argument("--seed", type=int, help="training seed override")
    p.add_argument("--epochs", type=int, help="epoch count override")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory from `disq train`")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--split", default="test", help="split to evaluate (train, dev, test)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run an experiment grid and render CSV + text tables")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--grid", required=True, help="sweep grid JSON")
    p.add_argument("--workers", type=int, default=1, help="parallel cell workers (default 1)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--seed", type=int, default=0, help="random seed for the check (default 0)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return DataError.exit_code
    except NumericError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return NumericError.exit_code
    except dataio.FeatureFileError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return DataError.exit_code
    except FileNotFoundError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return DataError.exit_code
    except FloatingPointError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return NumericError.exit_code


if __name__ == "__main__":
    sys.exit(main())
