"""End-to-end runs driven by one JSON configuration.

Phases: base training, attention training on the frozen base, statistics,
threshold solve, surgery, fine-tuning. Every artifact lands in one output
directory together with ``manifest.json``, which records the resolved
configuration and the sha256 of each artifact (no timestamps, so repeated
runs with the same seed produce identical manifests).
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .. import costmodel
from ..errors import FormatError, InvalidInputError
from ..netgraph import attach_attention, build_architecture, freeze_base, save_model
from ..solver import CompressionRequest, derive_residual_masks, random_masks, save_masks, solve_threshold
from ..stats import save_stats
from ..surgery import apply_masks
from .data import load_cifar10_binary, make_synth_dataset
from .train import TrainConfig, attention_schedule, collect_stats, evaluate, finetune, train_attention, train_base

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "arch": "tiny_cnn",
    "resolution": [16, 16],
    "num_classes": 4,
    "seed": 0,
    "dataset": {"kind": "synthetic", "n_train": 2000, "n_test": 4000, "noise": 1.5},
    "base": {"epochs": 12, "lr": 0.1, "decay_every": 9, "lr_decay": 0.1, "batch_size": 64},
    "attention": {
        "epochs": 8,
        "lr": 0.05,
        "decay_every": 4,
        "lr_decay": 0.1,
        "batch_size": 64,
        "alpha_target": 0.06,
        "bn_gamma_init": 0.1,
    },
    "compression": {"r": 0.3, "steps": 10000, "min_keep": 1},
    "finetune": {"epochs": 2, "lr": 0.01, "batch_size": 64},
    "random_baseline": False,
    "fc_two_step": None,
}

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, seed=None, overrides=None) -> dict:
    """Defaults, then the file at ``path``, then ``overrides``; ``seed`` wins last."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON run configuration ({exc})") from None
    if overrides:
        cfg = _merge(cfg, overrides)
    if seed is not None:
        cfg["seed"] = int(seed)
    unknown = set(cfg) - set(DEFAULT_CONFIG)
    if unknown:
        raise InvalidInputError(f"unknown run configuration keys: {sorted(unknown)}")
    return cfg


def train_config(section: dict, seed: int) -> TrainConfig:
    kw = {k: v for k, v in section.items() if k in _TRAIN_KEYS}
    kw.setdefault("seed", seed)
    return TrainConfig(**kw)


def load_datasets(cfg: dict):
    d = cfg["dataset"]
    if d["kind"] == "synthetic":
        res = tuple(cfg["resolution"])
        tr = make_synth_dataset(cfg["seed"], d["n_train"], cfg["num_classes"], res, d.get("noise", 0.5))
        te = make_synth_dataset(cfg["seed"], d["n_test"], cfg["num_classes"], res, d.get("noise", 0.5), split="test")
        return tr, te
    if d["kind"] == "cifar10":
        return load_cifar10_binary(d["path"], "train"), load_cifar10_binary(d["path"], "test")
    raise InvalidInputError(f"unknown dataset kind {d['kind']!r}")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def prune_phase(graph, train, cfg, seed, fc_mode, out: Path, tag: str, artifacts: dict):
    """Attention training, statistics, solve and surgery for one layer kind."""
    seed = int(seed)
    acfg = cfg["attention"]
    instrumented = graph.copy()
    module_kw = {k: acfg[k] for k in ("bn_gamma_init", "bn_beta_init", "variant", "kernel_size") if k in acfg}
    attach_attention(instrumented, fc_mode=fc_mode, rng=np.random.default_rng(seed), **module_kw)
    freeze_base(instrumented)
    tcfg = train_config(acfg, seed)
    schedule = attention_schedule(tcfg, len(train), acfg["alpha_target"], acfg.get("warmup_epochs"))
    train_attention(instrumented, train, tcfg, schedule)
    save_model(instrumented, out / f"{tag}attn.model")
    stats = collect_stats(instrumented, train, acfg["alpha_target"])
    save_stats(stats, out / f"{tag}stats.json", acfg["alpha_target"])
    ccfg = cfg["compression"] if not fc_mode else _merge(cfg["compression"], cfg["fc_two_step"] or {})
    request = CompressionRequest(
        r=ccfg["r"], steps=ccfg.get("steps", 10000), min_keep=ccfg.get("min_keep", 1), t_max=ccfg.get("t_max")
    )
    solution = solve_threshold(stats.means(), request)
    masks = derive_residual_masks(solution.masks, graph)
    save_masks(masks, out / f"{tag}masks.json", solution.t_star, solution.achieved_ratio)
    pruned, report = apply_masks(graph, masks)
    report.save(out / f"{tag}surgery_report.json")
    for name in ("attn.model", "stats.json", "masks.json", "surgery_report.json"):
        artifacts[tag + name] = sha256_file(out / f"{tag}{name}")
    return pruned, solution, stats


def run_all(cfg: dict, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg["seed"])
    train, test = load_datasets(cfg)
    artifacts: dict[str, str] = {}
    metrics: dict = {}

    graph = build_architecture(cfg["arch"], cfg["resolution"], cfg["num_classes"], shape_only=False, seed=seed)
    log.info("training base %s on %d samples", cfg["arch"], len(train))
    train_base(graph, train, train_config(cfg["base"], seed), checkpoint=out / "base.model")
    artifacts["base.model"] = sha256_file(out / "base.model")
    metrics["base"] = evaluate(graph, test)

    pruned, solution, stats = prune_phase(graph, train, cfg, seed + 1, False, out, "", artifacts)
    metrics["t_star"] = solution.t_star
    metrics["achieved_ratio"] = solution.achieved_ratio
    metrics["pruned_before_finetune"] = evaluate(pruned, test)
    fcfg = train_config(cfg["finetune"], seed + 2)
    finetune(pruned, train, fcfg)
    metrics["pruned"] = evaluate(pruned, test)

    if cfg.get("fc_two_step"):
        log.info("second step: pruning FC inputs")
        pruned, sol_fc, _ = prune_phase(pruned, train, cfg, seed + 3, True, out, "fc_", artifacts)
        metrics["fc_achieved_ratio"] = sol_fc.achieved_ratio
        finetune(pruned, train, train_config(cfg["finetune"], seed + 4))
        metrics["pruned_fc"] = evaluate(pruned, test)

    save_model(pruned, out / "pruned.model")
    artifacts["pruned.model"] = sha256_file(out / "pruned.model")

    before = costmodel.cost_report(graph)
    after = costmodel.cost_report(pruned)
    red = costmodel.compare(before, after)
    _write_json(out / "cost_report.json", {"before": before.to_dict(), "after": after.to_dict(), "reduction": asdict(red)})
    artifacts["cost_report.json"] = sha256_file(out / "cost_report.json")

    if cfg.get("random_baseline"):
        layout = {lid: a.size for lid, a in stats.means().items()}
        rm = random_masks(layout, solution.masks.pruned_count(), np.random.default_rng(seed + 5), cfg["compression"].get("min_keep", 1))
        rgraph, _ = apply_masks(graph, derive_residual_masks(rm, graph))
        finetune(rgraph, train, fcfg)
        metrics["random"] = evaluate(rgraph, test)

    _write_json(out / "metrics.json", metrics)
    artifacts["metrics.json"] = sha256_file(out / "metrics.json")
    manifest = {"config": cfg, "artifacts": dict(sorted(artifacts.items()))}
    _write_json(out / "manifest.json", manifest)
    return manifest
