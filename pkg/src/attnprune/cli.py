"""Command-line interface.

Relative output paths are resolved under the output directory: ``--out-dir``,
else ``$ATTNPRUNE_OUT``, else the working directory. Inputs are never
modified in place.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, costmodel
from .errors import AttnPruneError
from .netgraph import attach_attention, build_architecture, freeze_base, load_model, save_model
from .netgraph.architectures import ARCHITECTURES
from .pipeline import runner
from .pipeline.data import load_cifar10_binary, make_synth_dataset
from .pipeline.train import TrainConfig, attention_schedule, collect_stats, evaluate, finetune, train_attention, train_base
from .solver import CompressionRequest, derive_residual_masks, g_curve, load_masks, save_masks, solve_threshold, default_t_max
from .stats import load_stats, save_stats
from .surgery import apply_masks

OUT_ENV = "ATTNPRUNE_OUT"
log = logging.getLogger("attnprune")


def _out_dir(args) -> Path:
    d = Path(args.out_dir or os.environ.get(OUT_ENV) or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _out(args, name) -> Path:
    p = Path(name)
    return p if p.is_absolute() else _out_dir(args) / p


def _dataset(args, num_classes, resolution, split="train"):
    if args.data == "synthetic":
        n = args.n if split == "train" else args.n_test
        return make_synth_dataset(args.seed, n, num_classes, resolution, args.noise, split=split)
    return load_cifar10_binary(args.data, split)


def _train_cfg(args, **extra) -> TrainConfig:
    kw = dict(
        epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, momentum=args.momentum,
        seed=args.seed, decay_every=args.decay_every, lr_decay=args.lr_decay,
        hflip=args.hflip, crop=args.crop, pad=args.pad,
    )
    kw.update(extra)
    return TrainConfig(**kw)


# --- subcommands ------------------------------------------------------------


def cmd_train_base(args):
    graph = build_architecture(args.arch, args.res, args.classes, shape_only=False, seed=args.seed)
    data = _dataset(args, graph.num_classes, graph.input_resolution)
    tlog = train_base(graph, data, _train_cfg(args))
    path = _out(args, args.output)
    save_model(graph, path)
    print(f"final loss {tlog.losses[-1]:.4f}; saved {path}" if tlog.losses else f"saved {path}")


def cmd_attach(args):
    graph = load_model(args.model)
    targets = args.targets.split(",") if args.targets else "all_prunable"
    ids = attach_attention(graph, targets, fc_mode=args.fc_mode, rng=np.random.default_rng(args.seed), bn_gamma_init=args.gamma_init)
    freeze_base(graph)
    path = _out(args, args.output)
    save_model(graph, path)
    print(f"attached {len(ids)} modules ({', '.join(ids)}); saved {path}")


def cmd_train_attn(args):
    graph = load_model(args.model)
    data = _dataset(args, graph.num_classes, graph.input_resolution)
    cfg = _train_cfg(args)
    schedule = attention_schedule(cfg, len(data), args.alpha, args.warmup_epochs)
    train_attention(graph, data, cfg, schedule)
    path = _out(args, args.output)
    save_model(graph, path)
    print(f"alpha reached {schedule.current():g}; saved {path}")


def cmd_stats(args):
    graph = load_model(args.model)
    data = _dataset(args, graph.num_classes, graph.input_resolution)
    stats = collect_stats(graph, data, args.alpha, args.batch_size)
    path = _out(args, args.output)
    save_stats(stats, path, args.alpha)
    print(f"{stats.sample_count} samples over {len(stats.layout)} layers; saved {path}")


def cmd_solve(args):
    criteria, _ = load_stats(args.stats)
    req = CompressionRequest(args.ratio, t_max=args.t_max, steps=args.steps, min_keep=args.min_keep, method=args.method)
    sol = solve_threshold(criteria, req)
    masks = sol.masks
    if args.model:
        masks = derive_residual_masks(masks, load_model(args.model))
    path = _out(args, args.output)
    save_masks(masks, path, sol.t_star, sol.achieved_ratio)
    print(f"t*={sol.t_star:.6g} g(t*)={sol.g_star:.6f} achieved={sol.achieved_ratio:.6f} pruned={masks.pruned_count()}/{masks.total()}")


def cmd_prune(args):
    graph = load_model(args.model)
    masks, _ = load_masks(args.masks)
    masks = derive_residual_masks(masks, graph)
    pruned, report = apply_masks(graph, masks)
    path = _out(args, args.output)
    save_model(pruned, path)
    report.save(_out(args, args.report))
    print(
        f"params {report.params_before} -> {report.params_after}, "
        f"FLOPs {report.flops_before} -> {report.flops_after}; saved {path}"
    )


def cmd_finetune(args):
    graph = load_model(args.model)
    data = _dataset(args, graph.num_classes, graph.input_resolution)
    finetune(graph, data, _train_cfg(args))
    path = _out(args, args.output)
    save_model(graph, path)
    print(f"saved {path}")


def cmd_eval(args):
    graph = load_model(args.model)
    data = _dataset(args, graph.num_classes, graph.input_resolution, split=args.split)
    alpha = args.alpha if graph.attachments else None
    print(json.dumps(evaluate(graph, data, alpha), sort_keys=True))


def cmd_count(args):
    if args.model:
        graph = load_model(args.model)
    else:
        graph = build_architecture(args.arch, args.res, args.classes, shape_only=True)
    report = costmodel.cost_report(graph, fma_mode=args.fma)
    if args.table:
        print(costmodel.format_table(report))
    else:
        print(costmodel.summary_line(report))
    if args.json:
        _out(args, args.json).write_text(report.to_json() + "\n")


def cmd_report(args):
    """Per-layer criteria rows followed by g(t) curve samples."""
    criteria, _ = load_stats(args.stats)
    t_max = args.t_max if args.t_max is not None else default_t_max(criteria)
    ts = np.linspace(0.0, t_max, args.grid)
    g = g_curve(criteria, ts)
    path = _out(args, args.output)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "layer", "index", "x", "value"])
        for lid, a in criteria.items():
            for c, v in enumerate(a):
                # x is the value on the global scale, C_l * a_{l,c}
                w.writerow(["stat", lid, c, repr(float(a.size * v)), repr(float(v))])
        for i, (t, gv) in enumerate(zip(ts, g)):
            w.writerow(["curve", "", i, repr(float(t)), repr(float(gv))])
    print(f"{sum(a.size for a in criteria.values())} stat rows, {args.grid} curve rows; saved {path}")


def cmd_run_all(args):
    cfg = runner.load_config(args.config, seed=args.seed)
    manifest = runner.run_all(cfg, _out_dir(args))
    metrics = json.loads((_out_dir(args) / "metrics.json").read_text())
    print(json.dumps({k: metrics[k] for k in ("base", "pruned", "achieved_ratio") if k in metrics}, sort_keys=True))
    print(f"{len(manifest['artifacts'])} artifacts; manifest at {_out_dir(args) / 'manifest.json'}")


# --- parser -------------------------------------------------------------------


def _data_args(p):
    p.add_argument("--data", default="synthetic", help="'synthetic' or a CIFAR-10 binary file/directory")
    p.add_argument("--n", type=int, default=2000, help="synthetic training samples")
    p.add_argument("--n-test", type=int, default=4000, help="synthetic test samples")
    p.add_argument("--noise", type=float, default=1.5)


def _train_args(p, epochs, lr, decay_every=0):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--decay-every", type=int, default=decay_every)
    p.add_argument("--lr-decay", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--hflip", action="store_true")
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--pad", type=int, default=0)


def _arch_args(p, arch=None):
    p.add_argument("--arch", choices=[a for a in ARCHITECTURES if a != "custom"], default=arch, required=arch is None)
    p.add_argument("--res", type=int, nargs="+", default=None, help="input resolution (one or two ints)")
    p.add_argument("--classes", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    common.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_ENV} or .)")
    common.add_argument("-v", "--verbose", action="store_true")
    ap = argparse.ArgumentParser(prog="attnprune", description="Attention-statistics channel pruning.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add("train-base", help="train a base network")
    _arch_args(p, "tiny_cnn")
    _data_args(p)
    _train_args(p, 12, 0.1, 9)
    p.add_argument("-o", "--output", default="base.model")
    p.set_defaults(func=cmd_train_base)

    p = add("attach", help="attach attention modules and freeze the base")
    p.add_argument("--model", required=True)
    p.add_argument("--targets", default=None, help="comma-separated layer ids (default: all prunable)")
    p.add_argument("--fc-mode", action="store_true")
    p.add_argument("--gamma-init", type=float, default=0.1)
    p.add_argument("-o", "--output", default="attn.model")
    p.set_defaults(func=cmd_attach)

    p = add("train-attn", help="train attention modules on the frozen base")
    p.add_argument("--model", required=True)
    p.add_argument("--alpha", type=float, default=0.06)
    p.add_argument("--warmup-epochs", type=int, default=None)
    _data_args(p)
    _train_args(p, 8, 0.05, 4)
    p.add_argument("-o", "--output", default="attn.model")
    p.set_defaults(func=cmd_train_attn)

    p = add("stats", help="collect attention statistics")
    p.add_argument("--model", required=True)
    p.add_argument("--alpha", type=float, default=0.06)
    p.add_argument("--batch-size", type=int, default=256)
    _data_args(p)
    p.add_argument("-o", "--output", default="stats.json")
    p.set_defaults(func=cmd_stats)

    p = add("solve", help="find the global threshold for a compression ratio")
    p.add_argument("--stats", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--steps", type=int, default=10000)
    p.add_argument("--t-max", type=float, default=None)
    p.add_argument("--min-keep", type=int, default=1)
    p.add_argument("--method", choices=("grid", "exact"), default="grid")
    p.add_argument("--model", default=None, help="model file, to derive residual samplers")
    p.add_argument("-o", "--output", default="masks.json")
    p.set_defaults(func=cmd_solve)

    p = add("prune", help="remove masked channels")
    p.add_argument("--model", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("-o", "--output", default="pruned.model")
    p.add_argument("--report", default="surgery_report.json")
    p.set_defaults(func=cmd_prune)

    p = add("finetune", help="fine-tune a pruned model")
    p.add_argument("--model", required=True)
    _data_args(p)
    _train_args(p, 2, 0.01)
    p.add_argument("-o", "--output", default="finetuned.model")
    p.set_defaults(func=cmd_finetune)

    p = add("eval", help="top-1 (and top-5) accuracy")
    p.add_argument("--model", required=True)
    p.add_argument("--alpha", type=float, default=0.06)
    p.add_argument("--split", choices=("train", "test"), default="test")
    _data_args(p)
    p.set_defaults(func=cmd_eval)

    p = add("count", help="parameter and FLOP counts")
    _arch_args(p, "vgg16")
    p.add_argument("--model", default=None, help="count a saved model instead of --arch")
    p.add_argument("--fma", action="store_true", help="count a multiply-accumulate as one operation")
    p.add_argument("--table", action="store_true")
    p.add_argument("--json", default=None, help="also write the report as JSON")
    p.set_defaults(func=cmd_count)

    p = add("report", help="criteria and g(t) curve as CSV")
    p.add_argument("--stats", required=True)
    p.add_argument("--grid", type=int, default=200)
    p.add_argument("--t-max", type=float, default=None)
    p.add_argument("-o", "--output", default="report.csv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run-all", help="full pipeline from one JSON config")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None, help="overrides the seed in the config")
    p.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_ENV} or .)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_run_all)
    return ap


def run(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except AttnPruneError as exc:
        print(f"error: kind={exc.kind} command={args.command} message={json.dumps(str(exc))}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: kind=io command={args.command} message={json.dumps(str(exc))}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
