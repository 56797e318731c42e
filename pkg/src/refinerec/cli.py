"""Command-line interface: ingest / train / eval / retrieve / synth / inspect.

All knobs come from a flat key=value config file plus ``--set key=value``
overrides. Every run writes its fully-resolved config next to its outputs.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as C
from . import data as D
from .errors import ConfigError, DataError, NumericError, RefineRecError, UsageError
from .retrieval import evaluate_split, topn, user_vectors
from .training import (fit, load_checkpoint, model_from_checkpoint, save_checkpoint)


def _add_common(sub):
    sub.add_argument("-c", "--config", help="flat key=value config file")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override one config key")


def _resolve(args) -> C.RunConfig:
    file_vals = C.parse_config_file(args.config) if args.config else {}
    return C.resolve(file_vals, C.parse_overrides(args.overrides))


def _load_dataset(rc: C.RunConfig) -> D.Dataset:
    path = rc.require("data_path")
    ds = D.ingest(path, filter_min=rc.filter_min, max_seq_len=rc.max_seq_len,
                  dedupe=rc.dedupe)
    return D.split_users(ds, seed=rc.split_seed)


def _write_resolved(rc: C.RunConfig, out_dir: str) -> None:
    with open(os.path.join(out_dir, "resolved_config.txt"), "w", encoding="utf-8") as fh:
        fh.write(rc.resolved_text())


def cmd_ingest(args) -> int:
    rc = _resolve(args)
    ds = _load_dataset(rc)
    print(f"users={ds.n_users}")
    print(f"items={ds.n_items}")
    print(f"interactions={ds.n_interactions}")
    print(f"digest={ds.digest()}")
    for split in ("train", "valid", "test"):
        print(f"{split}_users={len(ds.users_in(split))}")
    if args.out:
        D.write_interactions(ds, args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    rc = _resolve(args)
    out_dir = str(rc.require("output_dir"))
    os.makedirs(out_dir, exist_ok=True)
    ds = _load_dataset(rc)
    _write_resolved(rc, out_dir)
    resume = load_checkpoint(args.resume) if args.resume else None

    def progress(entry):
        print("iter={iteration} loss={loss:.5f} rec={rec_loss:.5f} "
              "recon={recon_loss:.5f} valid_recall50={valid_recall50:.5f}".format(**entry))

    result = fit(ds, rc, resume_from=resume, progress=progress)
    save_checkpoint(result.best, os.path.join(out_dir, "checkpoint_best.ckpt"))
    save_checkpoint(result.last, os.path.join(out_dir, "checkpoint_last.ckpt"))
    with open(os.path.join(out_dir, "train_log.tsv"), "w", encoding="utf-8") as fh:
        fh.write("iteration\tloss\trec_loss\trecon_loss\tvalid_recall50\n")
        for entry in result.log:
            fh.write("{iteration}\t{loss!r}\t{rec_loss!r}\t{recon_loss!r}"
                     "\t{valid_recall50!r}\n".format(**entry))
    print(f"best_iteration={result.best.meta['iteration']}")
    print(f"best_valid_recall50={result.best.meta['best_metric']!r}")
    return 0


def _eval_config(ck, args) -> C.RunConfig:
    """Checkpoint config rules the model; data/eval/run keys may be overridden."""
    flat = dict(ck.meta["config"])
    file_vals = C.parse_config_file(args.config) if args.config else {}
    for source in (file_vals, C.parse_overrides(args.overrides)):
        for key, value in source.items():
            if key.startswith(("data.", "eval.", "run.")):
                flat[key] = value
            elif flat.get(key) != value and not isinstance(value, list):
                raise ConfigError(
                    f"{key}: checkpoint was trained with "
                    f"{flat.get(key)!r}; model keys cannot be overridden at eval time")
    return C.config_from_flat(flat)


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    rc = _eval_config(ck, args)
    ds = _load_dataset(rc)
    if ds.digest() != ck.meta["dataset_digest"]:
        raise DataError("checkpoint/dataset digest mismatch: "
                        "the checkpoint was trained on different data")
    model, _, _, _ = model_from_checkpoint(ck)
    cats = D.load_categories(rc.categories_path, ds) if rc.categories_path else None
    out_dir = str(rc.require("output_dir"))
    os.makedirs(out_dir, exist_ok=True)
    _write_resolved(rc, out_dir)
    combined = {}
    for n in rc.n_list:
        report = evaluate_split(model, ds, args.split, n, rc, cats=cats)
        name = f"metrics_{args.split}_N{n}.txt"
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            fh.write(report.to_text())
        combined[str(n)] = report.to_dict()
        print(f"N={n} recall={report.recall!r} hr={report.hr!r} ndcg={report.ndcg!r}")
    with open(os.path.join(out_dir, f"metrics_{args.split}.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(combined, sort_keys=True) + "\n")
    return 0


def cmd_retrieve(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    rc = _eval_config(ck, args)
    ds = _load_dataset(rc)
    if ds.digest() != ck.meta["dataset_digest"]:
        raise DataError("checkpoint/dataset digest mismatch")
    model, _, _, _ = model_from_checkpoint(ck)
    from .numerics import RngHub
    hub = RngHub(rc.seed)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    emitted = 0
    try:
        for uid, row, mask, length, _ in D.eval_examples(ds, args.split):
            if args.limit and emitted >= args.limit:
                break
            rng = None if rc.deterministic_eps0 else hub.stream(f"infer/{uid}")
            Z = user_vectors(model, row, mask, rc, rng)
            exclude = set(int(i) for i in row[mask > 0]) if rc.exclude_history else None
            result = topn(Z, model.extractor.embed.values, args.n, exclude)
            cells = ",".join(f"{ds.item_tokens[item - 1]}:{score:.6f}"
                             for item, score, _ in result.items)
            out.write(f"{ds.user_tokens[uid - 1]}\t{cells}\n")
            emitted += 1
    finally:
        if args.out:
            out.close()
    return 0


def cmd_synth(args) -> int:
    rc = _resolve(args)
    out_dir = str(rc.require("output_dir"))
    os.makedirs(out_dir, exist_ok=True)
    ds, truth = D.synth_generate(
        rc.synth_users, rc.synth_items, rc.synth_clusters, rc.synth_noise_dims,
        seed=rc.synth_seed, pref_range=(rc.synth_pref_min, rc.synth_pref_max),
        pool_range=(rc.synth_pool_min, rc.synth_pool_max),
        len_range=(rc.synth_len_min, rc.synth_len_max),
        distractor_frac=rc.synth_distractor_frac, max_seq_len=rc.max_seq_len)
    _write_resolved(rc, out_dir)
    D.write_interactions(ds, os.path.join(out_dir, "interactions.tsv"))
    D.write_categories(D.categories_from_clusters(truth), ds,
                       os.path.join(out_dir, "categories.tsv"))
    truth_blob = {
        "n_clusters": truth.n_clusters,
        "noise_dims": truth.noise_dims,
        "item_cluster": {ds.item_tokens[i - 1]: int(truth.item_cluster[i])
                         for i in range(1, ds.n_items + 1)},
        "user_clusters": {ds.user_tokens[u - 1]: truth.user_clusters[u]
                          for u in sorted(truth.user_clusters)},
    }
    with open(os.path.join(out_dir, "truth.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(truth_blob, sort_keys=True) + "\n")
    print(f"users={ds.n_users} items={ds.n_items} interactions={ds.n_interactions}")
    print(f"wrote {out_dir}/interactions.tsv, categories.tsv, truth.json")
    return 0


def cmd_inspect(args) -> int:
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        rc = ck.config()
        print(f"format_version=1 iteration={ck.meta['iteration']}")
        print(f"dataset_digest={ck.meta['dataset_digest']}")
        print(f"best_metric={ck.meta.get('best_metric')!r}")
        print("arrays:")
        for name, arr in ck.arrays.items():
            print(f"  {name} shape={tuple(arr.shape)}")
    else:
        rc = _resolve(args)
    from .diffusion import build_schedule
    sched = build_schedule(rc.steps, rc.scale, rc.alpha_min, rc.alpha_max)
    print("schedule:")
    for t in range(1, sched.steps + 1):
        print(f"  t={t} bar_alpha={sched.bar_alpha[t]!r} alpha={sched.alpha[t]!r} "
              f"beta={sched.beta[t]!r}")
    if args.user:
        if not args.checkpoint:
            raise ConfigError("--user needs --checkpoint")
        ds = _load_dataset(rc)
        if args.user not in ds.user_index:
            raise DataError(f"user {args.user!r} not in the dataset index")
        model, _, _, _ = model_from_checkpoint(ck)
        uid = ds.user_index[args.user]
        row, mask, n = D.history_window(ds.sequences[uid], len(ds.sequences[uid]),
                                        ds.max_seq_len)
        from .extractor import extract
        out = extract(model.extractor, row, mask)
        print(f"attention user={args.user} length={n}:")
        for k in range(out.attn.values.shape[0]):
            cells = " ".join(f"{w:.4f}" for w in out.attn.values[k])
            print(f"  interest{k}: {cells}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refinerec",
        description="multi-interest retrieval with diffusion-refined interest vectors")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("ingest", help="parse, filter, and index an interaction log")
    _add_common(p)
    p.add_argument("--out", help="write the filtered log back out")
    p.set_defaults(func=cmd_ingest)

    p = subs.add_parser("train", help="train a model and keep the best checkpoint")
    _add_common(p)
    p.add_argument("--resume", help="resume from a previous last-checkpoint")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint on a held-out split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["valid", "test"])
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("retrieve", help="emit per-user top-N retrieval lists")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["valid", "test"])
    p.add_argument("-n", type=int, default=50)
    p.add_argument("--limit", type=int, default=0, help="stop after this many users")
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_retrieve)

    p = subs.add_parser("synth", help="generate a clustered synthetic corpus")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("inspect", help="print checkpoint manifest and schedule table")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--user", help="print attention weights for this user token")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, UsageError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except RefineRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
