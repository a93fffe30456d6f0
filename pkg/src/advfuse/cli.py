"""Command-line front end: single training runs, ablation grids, and
attention-probe reports.

Exit codes: 0 success, 1 configuration error, 2 divergence or I/O failure.
Machine-readable summary goes to stdout as one JSON object; progress logs
go to stderr. All outputs land in a run directory named from the config
digest and seed, so identical configurations map to identical paths.
"""

import argparse
import itertools
import json
import os
import sys
import time
from dataclasses import fields, replace

import numpy as np

from .checkpoint import canonical_config, fnv1a, load_checkpoint, save_checkpoint
from .errors import CheckpointError, ContractError, DivergenceError
from .metrics import write_metrics
from .model import ModelConfig, ModelParams, attention_probe, forward
from .synth import WorldSpec, gen_probe_batch
from .trainer import (
    TrainConfig,
    _stream,
    init_params,
    run_finetune,
    run_pretrain,
    run_two_stage,
    transplant_encoder,
)

# flag name (dashes) -> (TrainConfig field or None, parser)
_FLAGS = {
    "task": (None, str),
    "stage": ("stage", str),
    "mode": ("mode", str),
    "adv-steps": ("adv_steps", int),
    "epsilon": ("epsilon", float),
    "adv-lr": ("adv_step_size", float),
    "alpha": ("kl_weight", float),
    "modality": ("modality_mode", str),
    "kl-target-grad": ("kl_target_grad", str),
    "perturb-jointly": ("perturb_jointly", bool),
    "lr": ("learning_rate", float),
    "optimizer": ("optimizer", str),
    "epochs": ("epochs", int),
    "batch-size": ("batch_size", int),
    "seed": ("seed", int),
    "train-samples": ("train_samples", int),
    "val-samples": ("val_samples", int),
    "world-seed": (None, int),
    "noise-sigma": (None, float),
}

_ADVERSARIAL_FLAGS = ("adv-steps", "epsilon", "adv-lr", "alpha", "modality",
                      "kl-target-grad", "perturb-jointly")

_GRIDS = ("modality", "mode", "stage")


class _CliConfigError(Exception):
    """Bad flags or flag combinations; mapped to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags by default; the contract wants 1
    def error(self, message):
        raise _CliConfigError(message)


def _log(msg):
    print(msg, file=sys.stderr)


def _add_run_flags(p):
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--task", choices=("pretrain", "downstream"))
    p.add_argument("--stage", choices=("pretrain", "finetune", "both"))
    p.add_argument("--mode", choices=("standard", "freelb", "villa"))
    p.add_argument("--adv-steps", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--adv-lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--modality", choices=("txt", "img", "both"))
    p.add_argument("--kl-target-grad", choices=("stop", "flow"))
    p.add_argument("--perturb-jointly", action="store_const", const=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-samples", type=int)
    p.add_argument("--val-samples", type=int)
    p.add_argument("--world-seed", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--out")
    p.add_argument("--load")


def build_parser():
    parser = _Parser(prog="advfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    train = sub.add_parser("train", help="run one training job")
    _add_run_flags(train)
    train.add_argument("--ablate", choices=_GRIDS,
                       help="run the named ablation grid instead of one job")

    ablate = sub.add_parser("ablate", help="run an ablation grid")
    _add_run_flags(ablate)
    ablate.add_argument("--grid", choices=_GRIDS, required=True)

    probe = sub.add_parser("probe", help="attention probe report")
    probe.add_argument("--load")
    probe.add_argument("--seed", type=int, default=0)
    probe.add_argument("--batch-size", type=int, default=8)
    probe.add_argument("--layer", type=int)
    probe.add_argument("--head", type=int)
    probe.add_argument("--world-seed", type=int, default=0)
    probe.add_argument("--noise-sigma", type=float, default=0.1)
    return parser


def _parse_config_file(path):
    """Plain key=value lines; '#' comments and blank lines are skipped."""
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise _CliConfigError(f"cannot read --config file: {exc}")
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise _CliConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("_", "-")
        if key not in _FLAGS:
            raise _CliConfigError(f"{path}:{lineno}: unknown key {key!r}")
        _, cast = _FLAGS[key]
        value = value.strip()
        try:
            values[key] = (value.lower() in ("1", "true", "yes")
                           if cast is bool else cast(value))
        except ValueError:
            raise _CliConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}")
    return values


def resolve_run_config(args, grid=None):
    """Merge config file and flags, validate combinations, apply defaults.

    Returns (TrainConfig, settings dict with task/world knobs).
    """
    merged = dict(_parse_config_file(args.config)) if getattr(args, "config", None) else {}
    for flag in _FLAGS:
        attr = flag.replace("-", "_")
        value = getattr(args, attr, None)
        if value is not None:
            merged[flag] = value

    # the modality grid only makes sense under adversarial training
    default_mode = "villa" if grid == "modality" else "standard"
    mode = merged.get("mode", default_mode)
    if mode == "standard":
        for flag in _ADVERSARIAL_FLAGS:
            if flag in merged:
                raise _CliConfigError(
                    f"--{flag} is an adversarial setting; it conflicts with "
                    f"--mode standard")

    task = merged.get("task")
    stage = merged.get("stage")
    if task is None:
        task = "pretrain" if stage == "pretrain" else "downstream"
    if stage is None:
        stage = "pretrain" if task == "pretrain" else "finetune"
    valid = {("pretrain", "pretrain"), ("downstream", "finetune"),
             ("downstream", "both")}
    if (task, stage) not in valid:
        raise _CliConfigError(
            f"--task {task} cannot run with --stage {stage}")

    load = getattr(args, "load", None)
    if load and stage != "finetune":
        raise _CliConfigError("--load applies only to --stage finetune")

    kwargs = dict(mode=mode, stage=stage)
    for flag, (field, _) in _FLAGS.items():
        if field is not None and flag in merged:
            kwargs[field] = merged[flag]
    kwargs.setdefault("epochs", 2)
    try:
        config = TrainConfig(**kwargs)
    except ContractError as exc:
        raise _CliConfigError(str(exc))

    settings = {
        "task": task,
        "world_seed": merged.get("world-seed", 0),
        "noise_sigma": merged.get("noise-sigma", 0.1),
        "out": getattr(args, "out", None) or "runs",
        "load": load,
    }
    return config, settings


def _canonical_run_text(config, settings, model_config, grid=None):
    lines = ["run-config-v1"]
    for f in fields(TrainConfig):
        lines.append(f"{f.name}={getattr(config, f.name)}")
    lines.append(f"task={settings['task']}")
    lines.append(f"world_seed={settings['world_seed']}")
    lines.append(f"noise_sigma={settings['noise_sigma']}")
    if grid:
        lines.append(f"grid={grid}")
    lines.append(canonical_config(model_config))
    return "\n".join(lines) + "\n"


def _run_dir(config, settings, model_config, grid=None):
    text = _canonical_run_text(config, settings, model_config, grid)
    digest = fnv1a(text.encode("utf-8"))
    name = f"run-{digest:016x}-s{config.seed}"
    return os.path.join(settings["out"], name)


def _final_metrics(records):
    """Last seen eval row per (stage, split, task), flattened to JSON keys."""
    out = {}
    for r in records:
        if r.split in ("val", "train_eval"):
            out[f"{r.stage}.{r.split}.{r.task}.accuracy"] = r.accuracy
            out[f"{r.stage}.{r.split}.{r.task}.loss"] = r.l_std
    return out


def _write_outputs(run_dir, config, settings, records, checkpoints):
    os.makedirs(run_dir, exist_ok=True)
    model_config = ModelConfig()
    with open(os.path.join(run_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(_canonical_run_text(config, settings, model_config))
    # wall_ms is zeroed in the persisted CSV so identical configurations
    # produce identical bytes; real timing goes to stderr
    frozen = [replace(r, wall_ms=0.0) for r in records]
    write_metrics(frozen, os.path.join(run_dir, "metrics.csv"))
    for name, params in checkpoints.items():
        save_checkpoint(params, os.path.join(run_dir, name))


def execute_run(config, settings, run_dir):
    """One training job into run_dir; returns the summary dict."""
    model_config = ModelConfig()
    world = WorldSpec(model_config, num_concepts=16,
                      noise_sigma=settings["noise_sigma"],
                      seed=settings["world_seed"])
    records = []
    checkpoints = {}
    t0 = time.perf_counter()

    if config.stage == "pretrain":
        params = init_params(world, config.seed)
        run_pretrain(params, world, config, records)
        checkpoints["pretrain.ckpt"] = params
    elif config.stage == "finetune":
        if settings["load"]:
            # stage-2 semantics: donor encoder, fresh task heads
            params = ModelParams.init(world.config, _stream(config.seed, 7))
            donor = load_checkpoint(settings["load"], world.config)
            transplant_encoder(donor, params)
        else:
            params = init_params(world, config.seed)
        run_finetune(params, world, config, records)
        checkpoints["model.ckpt"] = params
    else:
        def keep_pretrain(pre, _fine):
            checkpoints["pretrain.ckpt"] = pre.copy()

        _, fine, records = run_two_stage(config, world, on_handoff=keep_pretrain)
        checkpoints["model.ckpt"] = fine

    wall = time.perf_counter() - t0
    _write_outputs(run_dir, config, settings, records, checkpoints)
    _log(f"[advfuse] {config.mode}/{config.stage} seed={config.seed} "
         f"steps={len(records)} wall={wall:.1f}s -> {run_dir}")
    return {
        "run_dir": run_dir,
        "task": settings["task"],
        "stage": config.stage,
        "mode": config.mode,
        "seed": config.seed,
        "records": len(records),
        "final": _final_metrics(records),
        "checkpoints": sorted(checkpoints),
    }


def run_ablation(grid, config, settings, base_dir):
    """Sequential cells under base_dir; one summary row per cell."""
    rows = []
    if grid == "modality":
        if config.mode == "standard":
            raise _CliConfigError(
                "--ablate modality needs an adversarial --mode (freelb or villa)")
        for m in ("txt", "img", "both"):
            cell_cfg = replace(config, modality_mode=m)
            cell_dir = os.path.join(base_dir, f"cell-{m}")
            summary = execute_run(cell_cfg, settings, cell_dir)
            rows.append({"cell": m, **summary["final"]})
    elif grid == "mode":
        for m in ("standard", "freelb", "villa"):
            cell_cfg = replace(config, mode=m)
            cell_dir = os.path.join(base_dir, f"cell-{m}")
            summary = execute_run(cell_cfg, settings, cell_dir)
            rows.append({"cell": m, **summary["final"]})
    else:
        if config.stage != "both":
            config = replace(config, stage="both")
            settings = dict(settings, task="downstream")
        model_config = ModelConfig()
        world = WorldSpec(model_config, num_concepts=16,
                          noise_sigma=settings["noise_sigma"],
                          seed=settings["world_seed"])
        for pre_mode, fine_mode in itertools.product(("standard", "villa"),
                                                     repeat=2):
            label = f"pre-{pre_mode}+fine-{fine_mode}"
            cell_dir = os.path.join(base_dir, f"cell-{label}")
            checkpoints = {}

            def keep_pretrain(pre, _fine):
                checkpoints["pretrain.ckpt"] = pre.copy()

            _, fine, records = run_two_stage(config, world,
                                             pretrain_mode=pre_mode,
                                             finetune_mode=fine_mode,
                                             on_handoff=keep_pretrain)
            checkpoints["model.ckpt"] = fine
            _write_outputs(cell_dir, config, settings, records, checkpoints)
            _log(f"[advfuse] ablate stage cell {label} -> {cell_dir}")
            rows.append({"cell": label, **_final_metrics(records)})
    return {"grid": grid, "rows": rows}


def concept_pairs(dataset):
    """(pair id, batch, sample, region, token span) for every region whose
    concept is named in its own caption."""
    pairs = []
    for bi, batch in enumerate(dataset):
        for si, meta in enumerate(batch.meta["samples"]):
            spans = meta["concept_spans"]
            for ri, c in enumerate(meta["region_concepts"]):
                if c >= 0 and c in spans:
                    pairs.append((f"b{bi}s{si}r{ri}c{c}", bi, si, ri, spans[c]))
    return pairs


def probe_report(params, dataset, layer, head, pairs):
    """Max region-to-span attention per pair, with per-cell means.

    layer=None or head=None widens to every layer or head, so the default
    report covers each (layer, head) cell exactly once.
    """
    if not pairs:
        raise ContractError("probe needs at least one region-span pair")
    outputs = [forward(params, b, task="itm") for b in dataset]
    n_layers = params.config.num_layers
    n_heads = params.config.num_heads
    if layer is not None and not 0 <= layer < n_layers:
        raise ContractError(f"layer {layer} out of range")
    if head is not None and not 0 <= head < n_heads:
        raise ContractError(f"head {head} out of range")
    layers = range(n_layers) if layer is None else (layer,)
    heads = range(n_heads) if head is None else (head,)
    rows = []
    head_means = {}
    for l in layers:
        for h in heads:
            values = []
            for pid, bi, si, ri, span in pairs:
                v = attention_probe(outputs[bi], si, l, h, ri, span)
                rows.append({"layer": l, "head": h, "pair": pid, "value": v})
                values.append(v)
            head_means[(l, h)] = float(np.mean(values))
    return {"rows": rows, "head_means": head_means}


def run_probe(args):
    model_config = ModelConfig()
    world = WorldSpec(model_config, num_concepts=16,
                      noise_sigma=args.noise_sigma, seed=args.world_seed)
    if args.load:
        params = load_checkpoint(args.load, model_config)
    else:
        params = init_params(world, args.seed)
    batch = gen_probe_batch(world, args.batch_size, _stream(args.seed, 8))
    pairs = concept_pairs([batch])
    report = probe_report(params, [batch], args.layer, args.head, pairs)
    return {
        "pairs": len(pairs),
        "cells": [
            {"layer": l, "head": h, "mean": m}
            for (l, h), m in sorted(report["head_means"].items())
        ],
        "rows": report["rows"],
    }


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "probe":
            summary = run_probe(args)
        else:
            grid = getattr(args, "grid", None) or getattr(args, "ablate", None)
            config, settings = resolve_run_config(args, grid)
            run_dir = _run_dir(config, settings, ModelConfig(), grid)
            if grid:
                summary = run_ablation(grid, config, settings, run_dir)
            else:
                summary = execute_run(config, settings, run_dir)
        print(json.dumps(summary, sort_keys=True))
        return 0
    except _CliConfigError as exc:
        _log(f"[advfuse] config error: {exc}")
        return 1
    except (ContractError, CheckpointError) as exc:
        _log(f"[advfuse] config error: {exc}")
        return 1
    except DivergenceError as exc:
        _log(f"[advfuse] diverged at iteration {exc.iteration}: {exc}")
        return 2
    except OSError as exc:
        _log(f"[advfuse] i/o failure: {exc}")
        return 2


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
