"""Command-line entry point: ``capelab <subcommand> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .contrastive import embed, pretrain, read_embeddings
from .datamodel import open_store
from .eval import auroc, mae
from .experiments import (
    ExperimentConfig,
    _write_csv,
    config_from_dict,
    load_config,
    read_csv,
    report,
    run_matrix,
    run_ood,
    synth_stores,
)
from .nn.heads import train_head

TASKS = {"age": "age-regression", "sex": "sex-classification"}


def _config(args, kind: str | None = None) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "scale", None) is not None:
        kw["scale"] = args.scale
    if kind is not None:
        kw["kind"] = kind
    return cfg.replace(**kw) if kw else cfg


def _stores(cfg: ExperimentConfig, out: Path):
    paths = {s.name: out / "stores" / f"{s.name}.ecgc" for s in cfg.cohort_specs()}
    if not all(p.exists() for p in paths.values()):
        paths = synth_stores(cfg, out)
    return {name: open_store(p) for name, p in paths.items()}


def cmd_synth(args) -> int:
    cfg = _config(args)
    for name, path in synth_stores(cfg, Path(args.out)).items():
        print(f"{name}\t{path}\t{len(open_store(path))} records")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    stores = _stores(cfg, out)
    path = out / "checkpoints" / f"{args.mode}.ckpt"
    path.parent.mkdir(parents=True, exist_ok=True)
    res = pretrain(
        list(stores.values()),
        dataclasses.replace(cfg.pretrain, mode=args.mode, seed=cfg.seed),
        cfg.encoder, cfg.augment, cfg.preprocess,
        mains_by_cohort=cfg.mains_by_cohort(), checkpoint_path=path,
        cohort_names={s.cohort_id: s.name for s in cfg.cohort_specs()},
    )
    for epoch, loss in enumerate(res.loss_history, 1):
        print(f"epoch {epoch}\tloss {loss:.5f}")
    print(path)
    return 0


def cmd_embed(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    stores = _stores(cfg, out)
    tag = Path(args.checkpoint).stem
    for name, store in stores.items():
        path = out / "embeddings" / tag / f"{name}.emb"
        path.parent.mkdir(parents=True, exist_ok=True)
        emb = embed(args.checkpoint, store, None, cfg.preprocess, cfg.encoder, cfg.mains_by_cohort(), path)
        print(f"{name}\t{path}\t{len(emb)} embeddings, {emb.n_skipped} skipped")
    return 0


def cmd_head(args) -> int:
    cfg = _config(args)
    task = TASKS[args.task]
    emb = read_embeddings(args.embeddings)
    ok = np.isfinite(emb.ages) & np.isin(emb.sexes, (0, 1))
    emb = emb.subset(emb.record_ids[ok])
    seed = cfg.seed
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(emb))
    n_tr = int(np.floor(0.5 * len(emb)))
    n_va = int(np.floor(0.1 * len(emb)))
    parts = {"train": perm[:n_tr], "val": perm[n_tr : n_tr + n_va], "test": perm[n_tr + n_va :]}
    y = emb.ages if task == "age-regression" else emb.sexes.astype(np.float64)
    head, val_metric = train_head(emb.X, y, task, cfg.head.for_task(task, seed), (parts["train"], parts["val"]))
    out = Path(args.out)
    rows = []
    for split, idx in parts.items():
        pred = head.predict(emb.X[idx]) if task == "age-regression" else head.decision_function(emb.X[idx])
        rows += [[int(emb.record_ids[i]), split, float(y[i]), float(p)] for i, p in zip(idx, pred)]
    rows.sort()
    path = _write_csv(out / f"predictions_{args.task}.csv", ["record_id", "split", "truth", "prediction"], rows)
    print(f"validation {'MAE' if task == 'age-regression' else 'AUROC'} {val_metric:.4f}")
    print(path)
    return 0


def cmd_eval(args) -> int:
    rows = [r for r in read_csv(args.predictions) if r["split"] == args.split]
    truth = np.array([float(r["truth"]) for r in rows])
    pred = np.array([float(r["prediction"]) for r in rows])
    binary = set(np.unique(truth).tolist()) <= {0.0, 1.0}
    name, value = ("auroc", auroc(pred, truth)) if binary else ("mae", mae(pred, truth))
    print("metric,value,n")
    print(f"{name},{value!r},{len(rows)}")
    return 0


def cmd_matrix(args) -> int:
    m = run_matrix(_config(args, "matrix"), args.out, resume=args.resume)
    print(m.path)
    return 0


def cmd_ood(args) -> int:
    m = run_ood(_config(args, "ood"), args.out, resume=args.resume)
    print(m.path)
    return 0


def cmd_report(args) -> int:
    print(report(args.manifests, args.out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capelab", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="experiment JSON config")
        sp.add_argument("--seed", type=int, help="base seed (data, pretraining, splits)")
        sp.add_argument("--out", required=out_required, help="output directory")

    sp = sub.add_parser("synth", help="generate the synthetic cohort stores")
    common(sp)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("pretrain", help="pretrain an encoder on all configured cohorts")
    common(sp)
    sp.add_argument("--mode", choices=("random", "idb"), default="random")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("embed", help="embed every cohort store with a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(fn=cmd_embed)

    sp = sub.add_parser("head", help="train an age or sex head on one embedding cache (50/10/40 split)")
    common(sp)
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--task", choices=tuple(TASKS), required=True)
    sp.set_defaults(fn=cmd_head)

    sp = sub.add_parser("eval", help="score a predictions CSV written by `head`")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.set_defaults(fn=cmd_eval)

    for name, fn, helptext in (("matrix", cmd_matrix, "pretraining cohort x label cohort experiment"),
                               ("ood", cmd_ood, "random vs in-distribution batching, out-of-distribution heads")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--scale", type=float, help="fraction of the full-scale split sizes")
        sp.add_argument("--resume", action="store_true", help="skip stages whose artifacts are intact")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("report", help="render Markdown and CSV from experiment directories")
    sp.add_argument("manifests", nargs="+", help="experiment output directories")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"capelab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
