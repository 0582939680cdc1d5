"""``glamor`` command line: synthetic data, splitting, training, evaluation, inference, verification.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error,
3 IO or file-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import EMOTIONS, SampleRecord, generate_synthetic_dataset, read_manifest, write_manifest
from .data.preprocess import CONTEXT_CROP, CONTEXT_RESIZE, load_image, prepare_sample
from .data.split import ncaer_split, split_table
from .errors import ConfigError, DegenerateTableError, FormatError, GlamorError, InputError
from .metrics import confusion, export_attention, paired_table, stuart_maxwell
from .model import GlamorNet, ModelConfig
from .tensor import Rng
from .training import PreparedSet, TrainConfig, evaluate, fit

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


def default_config():
    """Every flat key a --config JSON file may set, with its default."""
    model = ModelConfig()
    cfg = asdict(TrainConfig())
    cfg.update(variant=model.attention.value, fusion=model.fusion.value, ablation=model.ablation.value,
               channels=list(model.channels), hidden=model.hidden, n_classes=model.n_classes,
               dropout=model.dropout, face_size=list(model.face_size),
               context_size=list(model.context_size), context_resize=None, threads=1)
    return cfg


def context_resize_for(context_size):
    """Pre-crop resize that keeps the 128x171 : 112x112 proportions for any crop size."""
    if tuple(context_size) == CONTEXT_CROP:
        return CONTEXT_RESIZE
    h, w = context_size
    return (round(h * CONTEXT_RESIZE[0] / CONTEXT_CROP[0]),
            round(w * CONTEXT_RESIZE[1] / CONTEXT_CROP[1]))


def resolve_config(path, overrides):
    """Defaults, then the JSON file, then command-line flags (``None`` flags are unset)."""
    cfg = default_config()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                from_file = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(from_file, dict):
            raise ConfigError(f"{path}: expected a JSON object of flat keys")
        unknown = sorted(set(from_file) - set(cfg))
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {unknown}")
        cfg.update(from_file)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def build_configs(cfg):
    model = ModelConfig(channels=cfg["channels"], hidden=cfg["hidden"], n_classes=cfg["n_classes"],
                        attention=cfg["variant"], fusion=cfg["fusion"], ablation=cfg["ablation"],
                        dropout=cfg["dropout"], face_size=cfg["face_size"],
                        context_size=cfg["context_size"])
    try:
        train = TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return model, train


def _records_for(manifest, split):
    records = read_manifest(manifest)
    if split != "all":
        records = [r for r in records if (r.split or "train") == split]
    if not records:
        raise InputError(f"{manifest}: no records for split {split!r}")
    return records


def _context_resize(model_cfg: ModelConfig, explicit=None):
    return tuple(explicit) if explicit else context_resize_for(model_cfg.context_size)


def _stored_resize(net, meta):
    return _context_resize(net.config, (meta.get("config") or {}).get("context_resize"))


def _prepare(records, model_cfg: ModelConfig, context_resize, threads=1):
    return PreparedSet.from_records(records, mask=model_cfg.ablation.masks_context,
                                    face_size=model_cfg.face_size, context_resize=context_resize,
                                    crop=model_cfg.context_size, dtype=np.float32, threads=threads)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args):
    path, records = generate_synthetic_dataset(args.per_class, args.out, seed=args.seed,
                                               image_dims=tuple(args.image_dims))
    print(f"manifest: {path}")
    counts = np.bincount([int(r.label) for r in records], minlength=len(EMOTIONS))
    for name, c in zip(EMOTIONS, counts):
        print(f"  {name:<9}{c:>6}")
    print(f"  {'Total':<9}{len(records):>6}")
    return EXIT_OK


def format_split_table(table):
    lines = [f"{'Class':<10}" + "".join(f"{s:>8}" for s in table)]
    for k, name in enumerate(EMOTIONS[:len(next(iter(table.values())))]):
        lines.append(f"{name.capitalize():<10}" + "".join(f"{table[s][k]:>8}" for s in table))
    lines.append(f"{'Total':<10}" + "".join(f"{sum(table[s]):>8}" for s in table))
    return "\n".join(lines)


def cmd_split(args):
    records = read_manifest(args.manifest)
    if not records:
        raise InputError(f"{args.manifest}: manifest has no records (zero videos)")
    out = ncaer_split(records, Rng(args.seed), segment_seconds=args.segment_seconds,
                      balance_tol=args.balance_tol)
    print(format_split_table(split_table(out)))
    if args.out:
        write_manifest(args.out, out)
        print(f"wrote {len(out)} records to {args.out}")
    return EXIT_OK


def cmd_train(args):
    overrides = {"variant": args.variant, "fusion": args.fusion, "ablation": args.ablation,
                 "seed": args.seed, "learning_rate": args.lr, "batch_size": args.batch_size,
                 "epochs_branch_pretrain": args.epochs_pretrain, "epochs_joint": args.epochs_joint,
                 "precision": args.precision, "threads": args.threads}
    cfg = resolve_config(args.config, overrides)
    model_cfg, train_cfg = build_configs(cfg)
    log_path = args.log or f"{args.out}.log.jsonl"
    os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)

    records = _records_for(args.manifest, "train")
    data = _prepare(records, model_cfg, _context_resize(model_cfg, cfg["context_resize"]),
                    threads=int(cfg["threads"]))
    net = GlamorNet(model_cfg, seed=train_cfg.seed, precision=train_cfg.precision)

    effective = {"stage": "config", **cfg, "config_hash": train_cfg.digest(),
                 "n_train": len(data)}
    print(json.dumps(effective, sort_keys=True))
    with open(log_path, "w", encoding="utf-8") as fh:
        def sink(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            print(json.dumps(rec, sort_keys=True), flush=True)

        fh.write(json.dumps(effective, sort_keys=True) + "\n")
        result = fit(net, data, train_cfg, sink=sink)

    final = result.history[-1] if result.history else {}
    save_checkpoint(net, args.out, training={"epoch": train_cfg.epochs_joint,
                                             "config_hash": train_cfg.digest(), "config": cfg})
    print(f"checkpoint: {args.out}")
    print(f"log: {log_path}")
    if "accuracy" in final:
        print(f"final train accuracy: {final['accuracy']:.4f}")
    return EXIT_OK


def _read_preds(path, n):
    with open(path, encoding="utf-8") as fh:
        tokens = [t for t in fh.read().split() if t]
    preds = []
    for t in tokens:
        preds.append(int(t) if t.lstrip("-").isdigit() else EMOTIONS.index(t.lower())
                     if t.lower() in EMOTIONS else -1)
    if len(preds) != n or min(preds, default=0) < 0:
        raise InputError(f"{path}: expected {n} class indices or names, one per sample")
    return np.array(preds)


def _print_test(title, table):
    try:
        res = stuart_maxwell(table)
    except DegenerateTableError as exc:
        print(f"{title}: not testable ({exc})")
        return
    print(f"{title}: statistic={res.statistic:.6g} dof={res.dof} p={res.p_value:.6g}")


def cmd_eval(args):
    net, meta = load_checkpoint(args.ckpt)
    records = _records_for(args.manifest, args.split)
    data = _prepare(records, net.config, _stored_resize(net, meta), threads=args.threads)
    ev = evaluate(net, data, batch_size=args.batch_size)
    k = net.config.n_classes
    names = list(EMOTIONS[:k]) if k <= len(EMOTIONS) else None
    cm = confusion(ev["preds"], data.labels, k)
    print(f"samples: {len(data)}")
    print(f"accuracy: {ev['accuracy']:.4f}")
    print("confusion matrix (rows: truth, columns: prediction):")
    print(cm.to_text(names))
    print(f"confusion_json: {cm.to_json(names)}")
    _print_test("stuart-maxwell (prediction vs truth)", cm)
    if args.compare:
        other = _read_preds(args.compare, len(data))
        _print_test("stuart-maxwell (model vs compare)", paired_table(ev["preds"], other, k))
    if args.save_preds:
        with open(args.save_preds, "w", encoding="utf-8") as fh:
            fh.write("\n".join(str(int(p)) for p in ev["preds"]) + "\n")
    return EXIT_OK


def _parse_bbox(text):
    try:
        box = tuple(int(v) for v in text.split(","))
    except ValueError:
        box = ()
    if len(box) != 4:
        raise argparse.ArgumentTypeError("bbox must be x,y,w,h integers")
    return box


def cmd_infer(args):
    net, meta = load_checkpoint(args.ckpt)
    cfg = net.config
    image = load_image(args.image)
    rec = SampleRecord(args.image, args.bbox, 0, "infer")
    smp = prepare_sample(rec, "eval", mask=cfg.ablation.masks_context, face_size=cfg.face_size,
                         context_resize=_stored_resize(net, meta),
                         context_crop=cfg.context_size, image=image)
    dtype = net.precision.dtype
    out = net.forward(smp.face[None].astype(dtype), smp.context[None].astype(dtype))
    logits = out.logits[0].astype(np.float64)
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    names = EMOTIONS[:cfg.n_classes] if cfg.n_classes <= len(EMOTIONS) else \
        [str(i) for i in range(cfg.n_classes)]
    top = int(np.argmax(probs))
    print(f"prediction: {names[top]} ({probs[top]:.4f})")
    for name, p in zip(names, probs):
        print(f"  {name:<9}{p:.6f}")
    if out.fusion_weights is not None:
        print(f"fusion weights: face={out.fusion_weights[0, 0]:.4f} "
              f"context={out.fusion_weights[0, 1]:.4f}")
    if args.attn_out:
        if out.attention is None:
            raise ConfigError("this model has no context branch, so there is no attention map")
        h, w = args.attn_size or cfg.context_size
        export_attention(out.attention[0], h, w, args.attn_out, args.attn_text)
        print(f"attention map: {args.attn_out}")
    return EXIT_OK


def cmd_verify(args):
    from .verify import run_battery

    results = run_battery(seeds=tuple(range(args.seeds)), out=sys.stdout)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError("size must look like HxW, e.g. 112x112") from None
    return h, w


def build_parser():
    p = argparse.ArgumentParser(prog="glamor", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic PPM corpus and manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--per-class", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-dims", type=_size, default=(144, 192), help="HxW (default 144x192)")
    g.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("split", help="leak-free per-video split with class balancing")
    s.add_argument("--manifest", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--segment-seconds", type=float, default=2.0)
    s.add_argument("--balance-tol", type=float, default=0.1)
    s.add_argument("--out", help="write the split manifest here")
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="staged pretraining then joint training")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config", help="JSON file of flat config keys")
    t.add_argument("--variant", choices=["gla", "ca", "none"])
    t.add_argument("--fusion", choices=["net", "add", "max"])
    t.add_argument("--ablation", choices=["full", "wF", "wmC", "wfC"])
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs-pretrain", type=int)
    t.add_argument("--epochs-joint", type=int)
    t.add_argument("--precision", choices=["f32", "f64"])
    t.add_argument("--threads", type=int, help="parallel image loading (default 1)")
    t.add_argument("--log", help="JSON-lines log path (default: <out>.log.jsonl)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy, confusion matrix and marginal-homogeneity test")
    e.add_argument("--manifest", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=["train", "val", "test", "all"], default="all")
    e.add_argument("--compare", help="baseline predictions, one class index or name per line")
    e.add_argument("--save-preds", help="write this model's predictions (one index per line)")
    e.add_argument("--batch-size", type=int, default=32)
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="classify one image and export its attention map")
    i.add_argument("--image", required=True)
    i.add_argument("--bbox", required=True, type=_parse_bbox, help="face box x,y,w,h")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--attn-out", help="attention map PGM path")
    i.add_argument("--attn-text", help="also write the raw attention grid as text")
    i.add_argument("--attn-size", type=_size, help="PGM size HxW (default: context input size)")
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("verify", help="run the gradient-check and invariant battery")
    v.add_argument("--seeds", type=int, default=3, help="random draws per gradient check")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError, DegenerateTableError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GlamorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
