"""Command-line pipeline: prepare, train, evaluate, ablate.

Every run writes a plain-text manifest of resolved settings next to its
artifacts so results can be reproduced bit for bit. Exit codes: 0 success,
1 runtime failure (bad files, mismatched hashes, diverged training),
2 usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import subprocess
import sys
from datetime import datetime, timezone

import numpy as np

from . import evaluation, ingest, training
from .checkpoint import load_checkpoint, save_checkpoint
from .numeric import Rng


class UsageError(ValueError):
    """Bad flag combination or malformed argument; maps to exit code 2."""


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _git_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            capture_output=True,
            text=True,
            timeout=10,
            check=False,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _write_manifest(path, entries: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in entries.items():
            fh.write(f"{key} = {value}\n")


def _manifest_config_entries(cfg: training.TrainConfig) -> dict:
    entries = {}
    for line in cfg.to_text().strip().splitlines():
        key, value = line.split(" = ", 1)
        entries[f"config.{key}"] = value
    return entries


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    data = ingest.load_interactions(args.input, args.format, args.threshold)
    stats = data.stats()
    print(f"loaded: {stats.describe()}")
    known = ingest.match_known_dataset(stats)
    if known:
        print(f"recognized corpus: {known}")
    if args.expect:
        want = ingest.KNOWN_DATASETS.get(args.expect)
        if want is None:
            raise UsageError(
                f"--expect {args.expect!r} is not a known corpus "
                f"({', '.join(sorted(ingest.KNOWN_DATASETS))})"
            )
        got = (stats.n_users, stats.n_items, stats.n_interactions)
        if got != want:
            raise RuntimeError(
                f"corpus check failed: expected {want} (users, items, interactions) "
                f"for {args.expect}, loaded {got}"
            )
        print(f"corpus check passed for {args.expect}")

    rng = Rng(args.seed).child("split")
    tagged = ingest.split(data, args.test_fraction, rng, args.min_train)
    n_tr = int(np.sum(tagged.split == ingest.TRAIN))
    n_te = int(np.sum(tagged.split == ingest.TEST))
    print(f"split: {n_tr} train / {n_te} test pairs")

    os.makedirs(args.out, exist_ok=True)
    ingest.write_prepared(
        args.out,
        tagged,
        header={
            "source": os.path.abspath(args.input),
            "source_sha256": _sha256_file(args.input),
            "format": args.format,
            "rating_threshold": args.threshold,
            "test_fraction": args.test_fraction,
            "min_train_per_user": args.min_train,
            "split_seed": args.seed,
        },
    )
    _write_manifest(
        os.path.join(args.out, "manifest.txt"),
        {
            "command": "prepare",
            "input": os.path.abspath(args.input),
            "input_sha256": _sha256_file(args.input),
            "format": args.format,
            "rating_threshold": args.threshold,
            "test_fraction": args.test_fraction,
            "min_train_per_user": args.min_train,
            "seed": args.seed,
            "manifest_sha256": _sha256_file(os.path.join(args.out, ingest.MANIFEST_NAME)),
            "git_revision": _git_revision(),
            "created_utc": datetime.now(timezone.utc).isoformat(),
        },
    )
    print(f"prepared dataset written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_OVERRIDABLE = {
    "lam": float,
    "beta": float,
    "align_weight": float,
    "embed_dim": int,
    "n_layers": int,
    "hidden_dim": int,
    "latent_dim": int,
    "dropout": float,
    "learning_rate": float,
    "batch_size": int,
    "negatives": int,
    "mc_rows": int,
    "max_epochs": int,
    "patience": int,
    "val_fraction": float,
    "seed": int,
    "score_source": str,
}


def _resolve_config(args) -> training.TrainConfig:
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = training.TrainConfig.from_text(fh.read())
    else:
        cfg = training.TrainConfig()
    overrides = {}
    for name in _OVERRIDABLE:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    if getattr(args, "variant", None):
        cfg = training.ablate(cfg, args.variant)
    return cfg


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--lambda", dest="lam", type=float, default=None,
                        help="similarity-constraint weight")
    parser.add_argument("--beta", type=float, default=None, help="generative-branch weight")
    parser.add_argument("--align-weight", dest="align_weight", type=float, default=None)
    parser.add_argument("--embed-dim", dest="embed_dim", type=int, default=None)
    parser.add_argument("--layers", dest="n_layers", type=int, default=None)
    parser.add_argument("--hidden-dim", dest="hidden_dim", type=int, default=None)
    parser.add_argument("--latent-dim", dest="latent_dim", type=int, default=None)
    parser.add_argument("--dropout", type=float, default=None)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    parser.add_argument("--negatives", type=int, default=None)
    parser.add_argument("--mc-rows", dest="mc_rows", type=int, default=None)
    parser.add_argument("--epochs", dest="max_epochs", type=int, default=None)
    parser.add_argument("--patience", type=int, default=None)
    parser.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--score-source", dest="score_source", default=None,
                        choices=training.SCORE_SOURCES)


def _train_once(prepared_dir, cfg: training.TrainConfig, out_dir, variant: str = "full",
                quiet: bool = False):
    data = ingest.read_prepared(prepared_dir)
    dataset_hash = _sha256_file(os.path.join(prepared_dir, ingest.MANIFEST_NAME))
    result = training.fit(data, cfg)
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    save_checkpoint(
        ckpt_path,
        result.state.store,
        seed=cfg.seed,
        config_hash=cfg.content_hash(),
        metadata={
            "config": cfg.to_text(),
            "dataset_hash": dataset_hash,
            "variant": variant,
            "n_users": result.state.n_users,
            "n_items": result.state.n_items,
            "best_epoch": result.best_epoch,
            "best_val_ndcg20": result.best_metric,
            "epochs_run": len(result.history),
        },
    )
    training.write_history(os.path.join(out_dir, "history.csv"), result.history)
    if not quiet:
        for row in result.history[-3:]:
            print(
                f"  epoch {row['epoch']:>3}  rec {row['loss_rec']:.4f}  "
                f"mc {row['loss_mc']:.4f}  vae {row['loss_vae']:.4f}  "
                f"val ndcg@20 {row['val_ndcg20']:.4f}"
            )
        tag = "stopped early" if result.stopped_early else "ran to max_epochs"
        print(f"  best epoch {result.best_epoch} (val ndcg@20 {result.best_metric:.4f}), {tag}")
    return result, dataset_hash, ckpt_path


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    variant = args.variant or "full"
    print(f"training variant '{variant}' on {args.prepared}")
    result, dataset_hash, ckpt_path = _train_once(args.prepared, cfg, args.out, variant)
    entries = {
        "command": "train",
        "variant": variant,
        "prepared_dir": os.path.abspath(args.prepared),
        "dataset_hash": dataset_hash,
        "checkpoint": os.path.abspath(ckpt_path),
        "history": os.path.abspath(os.path.join(args.out, "history.csv")),
        "config_hash": cfg.content_hash(),
        "best_epoch": result.best_epoch,
        "best_val_ndcg20": result.best_metric,
        "git_revision": _git_revision(),
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    entries.update(_manifest_config_entries(cfg))
    _write_manifest(os.path.join(args.out, "manifest.txt"), entries)
    print(f"checkpoint and history written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def restore_state(prepared_dir, checkpoint_path) -> tuple[training.ModelState, dict]:
    """Rebuild a scoring-ready ModelState from a prepared dir and checkpoint."""
    data = ingest.read_prepared(prepared_dir)
    store, header = load_checkpoint(checkpoint_path)
    meta = header["metadata"]
    cfg = training.TrainConfig.from_text(meta["config"])
    if cfg.content_hash() != header["config_hash"]:
        raise RuntimeError("checkpoint config hash does not match its embedded config text")
    dataset_hash = _sha256_file(os.path.join(prepared_dir, ingest.MANIFEST_NAME))
    if meta.get("dataset_hash") and meta["dataset_hash"] != dataset_hash:
        raise RuntimeError(
            "checkpoint was trained on different data: "
            f"dataset hash {meta['dataset_hash'][:12]}... != {dataset_hash[:12]}... "
            f"(prepared dir {prepared_dir}); re-run prepare/train or point at the right directory"
        )
    state = training.init_model(data, cfg)
    expect = {name: state.store.params[name].shape for name in state.store.names()}
    got = {name: store.params[name].shape for name in store.names()}
    if expect != got:
        raise RuntimeError(
            f"checkpoint parameters {sorted(got)} incompatible with config, expected {sorted(expect)}"
        )
    state.store = store
    return state, {**header, "data": data}


def cmd_evaluate(args) -> int:
    ks = tuple(int(k) for k in args.ks.split(","))
    state, header = restore_state(args.prepared, args.checkpoint)
    data = header["data"]
    report = evaluation.evaluate(state, data, ks=ks)
    print(report)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())

    if args.sparsity_groups:
        rows = evaluation.sparsity_report(state, data, args.sparsity_groups, k=min(ks))
        path = os.path.join(args.out, "sparsity.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"group,min_degree,max_degree,n_users,ndcg{min(ks)}\n")
            for row in rows:
                fh.write(
                    f"{row['group']},{row['min_degree']},{row['max_degree']},"
                    f"{row['n_users']},{row[f'ndcg{min(ks)}']!r}\n"
                )
        print(f"sparsity report ({len(rows)} groups) -> {path}")

    if args.heatmap_users or args.heatmap_items:
        if not (args.heatmap_users and args.heatmap_items):
            raise UsageError("--heatmap-users and --heatmap-items must be given together")
        path = os.path.join(args.out, "heatmap.csv")
        evaluation.export_heatmap(
            state, data, args.heatmap_users.split(","), args.heatmap_items.split(","), path
        )
        print(f"score heatmap -> {path}")

    _write_manifest(
        os.path.join(args.out, "eval_manifest.txt"),
        {
            "command": "evaluate",
            "checkpoint": os.path.abspath(args.checkpoint),
            "prepared_dir": os.path.abspath(args.prepared),
            "config_hash": header["config_hash"],
            "ks": args.ks,
            "git_revision": _git_revision(),
            "created_utc": datetime.now(timezone.utc).isoformat(),
        },
    )
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def cmd_ablate(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")]
    ks = tuple(int(k) for k in args.ks.split(","))
    base = _resolve_config(args)
    os.makedirs(args.out, exist_ok=True)
    data = ingest.read_prepared(args.prepared)

    if args.sweep:
        if args.values is None:
            raise UsageError("--sweep requires --values")
        values = [float(v) for v in args.values.split(",")]
        rows = []
        for value in values:
            for seed in seeds:
                cfg = dataclasses.replace(base, seed=seed, **{
                    "lam" if args.sweep == "lambda" else "beta": value
                })
                result = training.fit(data, cfg)
                report = evaluation.evaluate(result.state, data, ks=ks)
                rows.append((value, seed, report))
                print(
                    f"{args.sweep} = {value:<7g} seed {seed}: "
                    f"ndcg@{ks[0]} {report.ndcg[ks[0]]:.4f}"
                )
        path = os.path.join(args.out, "sweep.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"param,value,seed,recall{ks[0]},ndcg{ks[0]}\n")
            for value, seed, report in rows:
                fh.write(
                    f"{args.sweep},{value!r},{seed},"
                    f"{report.recall[ks[0]]!r},{report.ndcg[ks[0]]!r}\n"
                )
        spath = os.path.join(args.out, "sweep_summary.csv")
        with open(spath, "w", encoding="utf-8") as fh:
            fh.write(f"param,value,mean_recall{ks[0]},mean_ndcg{ks[0]}\n")
            for value in values:
                sel = [r for v, _, r in rows if v == value]
                mr = float(np.mean([r.recall[ks[0]] for r in sel]))
                mn = float(np.mean([r.ndcg[ks[0]] for r in sel]))
                fh.write(f"{args.sweep},{value!r},{mr!r},{mn!r}\n")
        print(f"sweep grid -> {path}, summary -> {spath}")
        return 0

    variants = args.variants.split(",")
    for v in variants:
        if v not in training.VARIANTS:
            raise UsageError(f"unknown variant '{v}', expected subset of {training.VARIANTS}")
    rows = []
    for variant in variants:
        for seed in seeds:
            cfg = training.ablate(dataclasses.replace(base, seed=seed), variant)
            result = training.fit(data, cfg)
            report = evaluation.evaluate(result.state, data, ks=ks)
            rows.append((variant, seed, report))
            print(
                f"{variant:<8} seed {seed}: "
                + "  ".join(
                    f"r@{k} {report.recall[k]:.4f} n@{k} {report.ndcg[k]:.4f}" for k in ks
                )
            )
    path = os.path.join(args.out, "ablation.csv")
    with open(path, "w", encoding="utf-8") as fh:
        header_ks = ",".join(f"recall{k},ndcg{k}" for k in ks)
        fh.write(f"variant,seed,{header_ks}\n")
        for variant, seed, report in rows:
            cells = ",".join(f"{report.recall[k]!r},{report.ndcg[k]!r}" for k in ks)
            fh.write(f"{variant},{seed},{cells}\n")
    print("\nmean over seeds:")
    summary_path = os.path.join(args.out, "ablation_summary.csv")
    with open(summary_path, "w", encoding="utf-8") as fh:
        header_ks = ",".join(f"recall{k},ndcg{k}" for k in ks)
        fh.write(f"variant,{header_ks}\n")
        for variant in variants:
            sel = [r for v, _, r in rows if v == variant]
            cells = {
                k: (
                    float(np.mean([r.recall[k] for r in sel])),
                    float(np.mean([r.ndcg[k] for r in sel])),
                )
                for k in ks
            }
            fh.write(
                f"{variant}," + ",".join(f"{cells[k][0]!r},{cells[k][1]!r}" for k in ks) + "\n"
            )
            print(
                f"  {variant:<8}"
                + "  ".join(f"r@{k} {cells[k][0]:.4f} n@{k} {cells[k][1]:.4f}" for k in ks)
            )
    print(f"ablation grid -> {path}, summary -> {summary_path}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphfill",
        description="Graph-convolutional recommender with similarity constraints "
        "and variational completion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="load, validate, and split a ratings file")
    p.add_argument("--input", required=True)
    p.add_argument("--format", default="tsv-rating", choices=ingest.FORMATS)
    p.add_argument("--threshold", type=float, default=1.0,
                   help="keep ratings >= this value")
    p.add_argument("--test-fraction", dest="test_fraction", type=float, default=0.2)
    p.add_argument("--min-train", dest="min_train", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--expect", default=None,
                   help="fail unless the loaded stats match this known corpus")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fit a model on a prepared dataset")
    p.add_argument("--prepared", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default=None, choices=training.VARIANTS)
    _add_override_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prepared", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ks", default="20,40")
    p.add_argument("--sparsity-groups", dest="sparsity_groups", type=int, default=0)
    p.add_argument("--heatmap-users", dest="heatmap_users", default=None)
    p.add_argument("--heatmap-items", dest="heatmap_items", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="variant comparison or weight sweep")
    p.add_argument("--prepared", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", default=",".join(training.VARIANTS))
    p.add_argument("--ks", default="20,40")
    p.add_argument("--sweep", default=None, choices=("lambda", "beta"))
    p.add_argument("--values", default=None)
    _add_override_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 2
    except (BrokenPipeError, KeyboardInterrupt):
        return 1
    except Exception as err:  # deliberate catch-all: CLI boundary
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
