"""``mojito`` command line: synth -> preprocess -> train -> evaluate -> diagnose-heads."""
import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import data as dio
from .config import load_config, parse_config_text
from .errors import ConfigError, MojitoError
from .evaluation import evaluate, format_mean_std, head_redundancy
from .model import MojitoModel
from .optim import load_store_state, read_checkpoint, save_checkpoint
from .synthetic import generate, parse_spec_text, write_events_tsv
from .train import Trainer

log = logging.getLogger("mojito")

CKPT_NAME = "checkpoint.ckpt"


class RefusalError(MojitoError):
    pass


def _atomic_json(path, obj):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def write_manifest(path, command, args, t0, **fields):
    """Atomic RunManifest: the command, its arguments and wall-clock time."""
    _atomic_json(path, {"command": command, "args": args,
                        "timings": {"total_seconds": time.perf_counter() - t0}, **fields})


def _prepare_out_dir(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise RefusalError(f"{path} exists and is not empty; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(spec_path, out_path):
    t0 = time.perf_counter()
    with open(spec_path, encoding="utf-8") as fh:
        spec = parse_spec_text(fh.read())
    events = generate(spec)
    write_events_tsv(events, out_path)
    write_manifest(f"{out_path}.manifest.json", "synth", {"spec": os.path.abspath(spec_path)}, t0,
                   seeds={"seed": spec.seed}, reports={"events": os.path.abspath(out_path)})
    print(f"wrote {len(events)} events for {spec.n_users} users to {out_path}")
    return out_path


def cmd_preprocess(input_path, out_dir, k_user=1, k_item=1, schema=dio.DEFAULT_SCHEMA, fmt="tsv",
                   delimiter=None, column_map=None, skip_header=False, force=False):
    _prepare_out_dir(out_dir, force)
    t0 = time.perf_counter()
    ctx_schema = dio.ContextSchema.parse(schema)
    events, n_bad = dio.load_events(input_path, fmt, column_map, delimiter, skip_header)
    before = (len(events), len({e.user_id for e in events}), len({e.item_id for e in events}))
    kept = dio.k_core_filter(events, k_user, k_item)
    dataset = dio.build_dataset(kept, ctx_schema)
    stats = {
        "input": os.path.abspath(input_path),
        "k_user": k_user,
        "k_item": k_item,
        "malformed_rows": n_bad,
        "before": {"events": before[0], "users": before[1], "items": before[2]},
        "after": {"events": dataset.n_events, "users": dataset.n_users, "items": dataset.n_items},
    }
    dio.write_dataset_dir(dataset, out_dir, stats)
    write_manifest(os.path.join(out_dir, "manifest.json"), "preprocess",
                   {"input": os.path.abspath(input_path), "k_user": k_user, "k_item": k_item,
                    "schema": str(ctx_schema), "format": fmt, "delimiter": delimiter,
                    "column_map": column_map, "skip_header": skip_header},
                   t0, dataset_stats=stats, dataset_fingerprint=dataset.fingerprint())
    print(f"before k-core: {before[0]} events, {before[1]} users, {before[2]} items")
    print(f"after  k-core: {dataset.n_events} events, {dataset.n_users} users, "
          f"{dataset.n_items} items ({time.perf_counter() - t0:.1f}s)")
    return out_dir


def _load_split(dataset_dir):
    dataset, stats = dio.read_dataset_dir(dataset_dir)
    return dio.leave_one_out_split(dataset), stats


def cmd_train(dataset_dir, config_path, out_dir, no_context=False, force=False):
    t0 = time.perf_counter()
    cfg = load_config(config_path)
    if no_context:
        cfg = cfg.replace(use_context=False)
    split, stats = _load_split(dataset_dir)
    if cfg.schema != str(split.schema):
        raise ConfigError(f"schema={cfg.schema} does not match the dataset schema {split.schema}")
    _prepare_out_dir(out_dir, force)
    model = MojitoModel(cfg, split.n_users, split.n_items)
    trainer = Trainer(model, split, dump_dir=out_dir)
    t_train = time.perf_counter()
    log_path = os.path.join(out_dir, "epochs.tsv")
    result = trainer.fit(log_path=log_path)
    t_train = time.perf_counter() - t_train
    ckpt = os.path.join(out_dir, CKPT_NAME)
    meta = {
        "config": cfg.to_text(),
        "config_hash": cfg.hash(),
        "dataset_fingerprint": split.fingerprint,
        "n_users": split.n_users,
        "n_items": split.n_items,
        "best_epoch": result.best_epoch,
    }
    save_checkpoint(ckpt, model.store, meta)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    write_manifest(
        os.path.join(out_dir, "manifest.json"), "train",
        {"dataset": os.path.abspath(dataset_dir), "config": os.path.abspath(config_path),
         "no_context": no_context},
        t0,
        config=cfg.to_text(),
        config_hash=cfg.hash(),
        dataset_stats=stats,
        dataset_fingerprint=split.fingerprint,
        seeds={"seed": cfg.seed},
        checkpoint=os.path.abspath(ckpt),
        reports={"epoch_log": os.path.abspath(log_path)},
        best_epoch=result.best_epoch,
        best_val_ndcg10=result.best_val_ndcg10,
        train_seconds=t_train,
    )
    print(f"best epoch {result.best_epoch}: val NDCG@10 {result.best_val_ndcg10:.4f}; "
          f"checkpoint {ckpt}")
    return ckpt


def load_model(checkpoint, dataset_dir=None):
    """Rebuild a model from a checkpoint; with ``dataset_dir`` also load the
    split and refuse if the dataset fingerprint differs."""
    meta, params, adam = read_checkpoint(checkpoint)
    cfg = parse_config_text(meta["config"])
    model = MojitoModel(cfg, meta["n_users"], meta["n_items"])
    load_store_state(model.store, params, adam)
    split = None
    if dataset_dir is not None:
        split, _ = _load_split(dataset_dir)
        if split.fingerprint != meta["dataset_fingerprint"]:
            raise RefusalError(
                f"checkpoint was trained on dataset {meta['dataset_fingerprint']} but "
                f"{dataset_dir} has fingerprint {split.fingerprint}"
            )
    return model, split, meta


def cmd_evaluate(checkpoint, dataset_dir, split_name="test", seed=0, out_path=None):
    t0 = time.perf_counter()
    model, split, meta = load_model(checkpoint, dataset_dir)
    report = evaluate(model, split, split_name, seed)
    text = report.to_json()
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
        write_manifest(f"{out_path}.manifest.json", "evaluate",
                       {"checkpoint": os.path.abspath(checkpoint),
                        "dataset": os.path.abspath(dataset_dir), "split": split_name}, t0,
                       config_hash=meta["config_hash"], seeds={"eval_seed": seed},
                       checkpoint=os.path.abspath(checkpoint),
                       reports={"eval": os.path.abspath(out_path)})
    else:
        sys.stdout.write(text)
    return report


def cmd_diagnose_heads(checkpoint, dataset_dir, n_probes=100, seed=0, out_path=None):
    t0 = time.perf_counter()
    model, split, meta = load_model(checkpoint, dataset_dir)
    rng = np.random.default_rng(seed)
    users = np.sort(rng.choice(split.users, size=min(n_probes, len(split.users)), replace=False))
    items, ctx = [], []
    for u in users:
        seq, c, _, _ = split.eval_input(u, "test")
        i_w, c_w = dio.pad_window(seq, c, model.config.L)
        items.append(i_w)
        ctx.append(c_w)
    mean, std = head_redundancy(model, np.stack(items), np.stack(ctx))
    p = model.mixture_weights()
    sig = model.sigmas()
    report = {
        "head_redundancy": format_mean_std(mean, std),
        "head_redundancy_mean": mean,
        "head_redundancy_std": std,
        "n_probes": int(len(users)),
        "seed": seed,
        "blocks": [
            {
                "block": b,
                "sigma": {"it": float(sig[b, 0]), "c": float(sig[b, 1])},
                "heads": [{"head": j, "p_it": float(p[b, j, 0]), "p_c": float(p[b, j, 1])}
                          for j in range(p.shape[1])],
            }
            for b in range(p.shape[0])
        ],
    }
    text = json.dumps(report, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
        write_manifest(f"{out_path}.manifest.json", "diagnose-heads",
                       {"checkpoint": os.path.abspath(checkpoint),
                        "dataset": os.path.abspath(dataset_dir), "n_probes": n_probes}, t0,
                       config_hash=meta["config_hash"], seeds={"probe_seed": seed},
                       checkpoint=os.path.abspath(checkpoint),
                       reports={"diagnostics": os.path.abspath(out_path)})
    else:
        sys.stdout.write(text)
    print(f"head redundancy: {report['head_redundancy']}", file=sys.stderr)
    return report


# ---------------------------------------------------------------------------
# argparse
# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="mojito", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic event file")
    p.add_argument("spec")
    p.add_argument("--out", required=True)

    p = sub.add_parser("preprocess", help="k-core filter and index an event file")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--k-user", type=int, default=1)
    p.add_argument("--k-item", type=int, default=1)
    p.add_argument("--schema", default=dio.DEFAULT_SCHEMA)
    p.add_argument("--format", choices=("tsv", "csv"), default="tsv")
    p.add_argument("--delimiter", default=None, help="overrides --format, e.g. '::'")
    p.add_argument("--user-col", type=int, default=0)
    p.add_argument("--item-col", type=int, default=1)
    p.add_argument("--time-col", type=int, default=2)
    p.add_argument("--skip-header", action="store_true")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="train MOJITO on a preprocessed dataset")
    p.add_argument("dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-context", action="store_true",
                   help="ablation: zero context embeddings and pin heads to the item component")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("evaluate", help="HR@10 / NDCG@10 with sampled negatives")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("diagnose-heads", help="head redundancy and mixture weights")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--n-probes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            cmd_synth(args.spec, args.out)
        elif args.command == "preprocess":
            cmd_preprocess(
                args.input, args.out, args.k_user, args.k_item, args.schema, args.format,
                args.delimiter, {"user": args.user_col, "item": args.item_col, "time": args.time_col},
                args.skip_header, args.force,
            )
        elif args.command == "train":
            cmd_train(args.dataset, args.config, args.out, args.no_context, args.force)
        elif args.command == "evaluate":
            cmd_evaluate(args.checkpoint, args.dataset, args.split, args.seed, args.out)
        elif args.command == "diagnose-heads":
            cmd_diagnose_heads(args.checkpoint, args.dataset, args.n_probes, args.seed, args.out)
    except (MojitoError, OSError) as exc:
        print(f"mojito {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
