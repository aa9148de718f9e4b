"""mspm command line: dataset synthesis/import, training, eval, embed, heatmaps.

Exit codes: 0 success, 2 usage error, 3 data/config error, 4 divergence.
"""

import argparse
import sys

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from . import data as datamod
from . import evaluation
from .errors import Divergence, MspmError
from .model import DescriptorModel
from .optim import format_record, train_loop

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _build_parser():
    p = argparse.ArgumentParser(prog="mspm",
                                description="multiscale attention patch matcher")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic pseudo-multimodal PPDB")
    g.add_argument("--out", required=True)
    g.add_argument("--pairs", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--neg-frac", type=float, default=0.0)

    i = sub.add_parser("import-strip", help="convert a strip image to PPDB")
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--labels", default=None)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--train", default=None, help="training PPDB (overrides config)")
    t.add_argument("--val", default=None, help="validation PPDB (overrides config)")
    t.add_argument("--out-ckpt", required=True,
                   help="best checkpoint path; '<path>.final' gets the last epoch")
    t.add_argument("--log", default=None, help="log file (default: <out-ckpt>.log)")

    e = sub.add_parser("eval", help="report FPR95/FPR99 on a labeled PPDB")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)

    m = sub.add_parser("embed", help="write descriptors for every patch to a DESC file")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--out", required=True)

    h = sub.add_parser("heatmap", help="export attention heatmaps for one pair")
    h.add_argument("--ckpt", required=True)
    h.add_argument("--data", required=True)
    h.add_argument("--index", type=int, required=True)
    h.add_argument("--out", required=True, help="output prefix; writes <out>_a.pgm etc.")
    h.add_argument("--overlay", action="store_true", help="also write PNG overlays")
    return p


def _load_model(path):
    tensors, cfg_dict = ckpt.load_checkpoint(path)
    model_cfg, normalization = cfgmod.model_config_from_checkpoint(cfg_dict)
    model = DescriptorModel(model_cfg)
    model.store.load_arrays(tensors)
    return model, normalization


def cmd_gen_synth(args):
    if args.pairs < 1:
        raise UsageError("--pairs must be at least 1")
    pairs = datamod.gen_synthetic(args.pairs, args.seed, args.neg_frac)
    datamod.write_ppdb(args.out, pairs)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return EXIT_OK


def cmd_import_strip(args):
    pairs = datamod.import_strip(args.image, labels_path=args.labels)
    datamod.write_ppdb(args.out, pairs)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return EXIT_OK


def cmd_train(args):
    run = cfgmod.load_runconfig(args.config)
    train_path = args.train or run.train_path
    val_path = args.val or run.val_path
    if not train_path or not val_path:
        raise UsageError("training needs --train/--val or train_path/val_path keys")
    train_set = datamod.read_ppdb(train_path)
    val_set = datamod.read_ppdb(val_path)
    model = DescriptorModel(run.model)
    model.init(run.seed)

    from .loss import MiningConfig

    mining = MiningConfig(margin=run.margin, duplicate_floor=run.duplicate_floor)
    stats = datamod.dataset_stats(train_set) if run.normalization == "dataset" else None
    log_path = args.log or f"{args.out_ckpt}.log"
    log_fh = open(log_path, "w")

    def log(line):
        print(line)
        log_fh.write(line + "\n")
        log_fh.flush()

    sched = run.schedule
    log(f"preset={run.preset} lr={sched.base_lr:g} batch={sched.batch_size} "
        f"epochs={sched.epochs} warmup={sched.warmup_epochs} seed={run.seed} "
        f"params={model.param_count()}")
    try:
        result = train_loop(model, train_set, val_set, sched, run.seed,
                            mining=mining, hflip=run.hflip, rot90=run.rot90,
                            normalization=run.normalization, dataset_stats=stats,
                            log_fn=log)
    finally:
        log_fh.close()
    cfg_block = cfgmod.checkpoint_config(run)
    final_path = f"{args.out_ckpt}.final"
    ckpt.save_checkpoint(final_path, model.store, cfg_block)
    if result.best_tensors is not None:
        model.store.load_arrays(result.best_tensors)
    ckpt.save_checkpoint(args.out_ckpt, model.store, cfg_block)
    if result.status == "div":
        print("status=DIV training diverged (non-finite loss)", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"best_epoch={result.best_epoch} best_val_fpr95={result.best_val_fpr95:.6f} "
          f"ckpt={args.out_ckpt}")
    return EXIT_OK


def cmd_eval(args):
    model, normalization = _load_model(args.ckpt)
    pairs = datamod.read_ppdb(args.data)
    stats = datamod.dataset_stats(pairs) if normalization == "dataset" else None
    report = evaluation.evaluate(model, pairs, normalization=normalization,
                                 dataset_stats=stats)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_embed(args):
    model, normalization = _load_model(args.ckpt)
    pairs = datamod.read_ppdb(args.data)
    stats = datamod.dataset_stats(pairs) if normalization == "dataset" else None
    spec = datamod.BatchSpec(batch_size=64, seed=0, c_in=model.cfg.c_in,
                             normalization=normalization, dataset_stats=stats)
    bank_a, bank_b = [], []
    for x, y in datamod.make_batches(pairs, spec):
        bank_a.append(model.embed(x)[0].data)
        bank_b.append(model.embed(y)[0].data)
    rows = np.concatenate([np.concatenate(bank_a), np.concatenate(bank_b)])
    ckpt.write_desc(args.out, rows)
    print(f"wrote {rows.shape[0]} descriptors of dim {rows.shape[1]} to {args.out}")
    return EXIT_OK


def cmd_heatmap(args):
    model, normalization = _load_model(args.ckpt)
    pairs = datamod.read_ppdb(args.data)
    if not 0 <= args.index < len(pairs):
        raise UsageError(f"--index {args.index} out of range for {len(pairs)} pairs")
    one = datamod.PatchPairSet(pairs.a[args.index:args.index + 1].copy(),
                               pairs.b[args.index:args.index + 1].copy())
    stats = datamod.dataset_stats(pairs) if normalization == "dataset" else None
    spec = datamod.BatchSpec(batch_size=1, seed=0, c_in=model.cfg.c_in,
                             normalization=normalization, dataset_stats=stats)
    x, y = next(datamod.make_batches(one, spec))
    level = model.levels[0]
    for tag, batch, patch in (("a", x, one.a[0]), ("b", y, one.b[0])):
        _, record = model.embed(batch, capture_attention=True)
        evaluation.export_heatmap(
            record, patch, f"{args.out}_{tag}.pgm",
            overlay_path=f"{args.out}_{tag}.png" if args.overlay else None,
            level=level)
    print(f"wrote {args.out}_a.pgm and {args.out}_b.pgm")
    return EXIT_OK


class UsageError(Exception):
    pass


_COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "import-strip": cmd_import_strip,
    "train": cmd_train,
    "eval": cmd_eval,
    "embed": cmd_embed,
    "heatmap": cmd_heatmap,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except Divergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MspmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
