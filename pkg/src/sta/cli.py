"""Command-line interface.

    sta gen-data  --config world.json --out data/ --seed 7
    sta pretrain  --config exp.json --out runs/pre --seed 1 [--data data/]
    sta finetune  --config exp.json --out runs/ft --checkpoint runs/pre/pretrain.ckpt
    sta eval      --checkpoint runs/ft/model.ckpt --out runs/ft --setting zero-shot
    sta ablate    --config exp.json --out runs/abl --setting supervised --seed 1
    sta report    --out runs/summary runs/abl

Exit status: 0 on success, 1 for configuration or data errors (the
offending field is named on stderr), 2 for usage errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint
from .dataworld import SETTINGS, World, WorldSpec, generate_world, make_splits, read_scenes, write_scenes
from .errors import ConfigError, StaError
from .experiment import PRETRAINED, VARIANTS, ExperimentConfig, evaluate, run_variants, variant_model
from .metrics import config_hash
from .nets import init_params
from .report import write_report, write_run
from .trainer import Finetuner, Pretrainer, load_bundle, pretrain_inputs

log = logging.getLogger("sta")


def _read_config(path):
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"malformed JSON at line {exc.lineno}") from None
    if not isinstance(data, dict):
        raise ConfigError("--config", "top level must be an object")
    return data


def experiment_config(path):
    return ExperimentConfig.from_dict(_read_config(path))


def world_section(path):
    """A bare WorldSpec object, or the ``world`` section of an experiment config."""
    data = _read_config(path)
    if set(data) & {"world", "model", "pretrain", "finetune"}:
        return ExperimentConfig.from_dict(data).world
    return data


def load_world(data_dir):
    d = Path(data_dir)
    try:
        spec, train = read_scenes(d / "train.staw")
        _, test = read_scenes(d / "test.staw")
    except FileNotFoundError as exc:
        raise ConfigError("--data", f"missing scene file {exc.filename}") from None
    return World(WorldSpec.from_dict(spec).resolved(), train, test)


def _world(args, config):
    if args.data:
        return load_world(args.data)
    spec, *_ = config.resolve(args.seed)
    return generate_world(spec)


def _dump(path, obj):
    Path(path).write_text(checkpoint.canonical_json(obj) + "\n")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    spec = WorldSpec.from_dict({**world_section(args.config), "seed": args.seed}).resolved()
    world = generate_world(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scenes(out / "train.staw", world.train, spec)
    write_scenes(out / "test.staw", world.test, spec)
    _dump(out / "world.json", spec.to_dict())
    print(f"wrote {len(world.train)} train and {len(world.test)} test scenes to {out}")


def cmd_pretrain(args):
    config = experiment_config(args.config)
    _, model, pre, _ = config.resolve(args.seed)
    variant = args.variant or "sta"
    if variant not in PRETRAINED:
        raise ConfigError("--variant", f"{variant!r} is not pre-trained")
    world = _world(args, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        run = Pretrainer.load(args.checkpoint)
    else:
        run = Pretrainer(pre, init_params(variant_model(model, variant), args.seed))
    domains, maps = pretrain_inputs(world.train, run.config.seed)
    while run.epoch < run.config.epochs:
        run.run_epoch(domains, maps)
        run.save(out / "pretrain.ckpt")
    run.save(out / "pretrain.ckpt")
    _dump(out / "history.json", run.history)
    print(f"pre-trained {run.epoch} epochs, {run.d_steps} discriminator / {run.g_steps} generator steps")


def cmd_finetune(args):
    config = experiment_config(args.config)
    _, model, _, fine = config.resolve(args.seed)
    variant = args.variant or ("sta" if args.checkpoint else "base-oa")
    setting = args.setting or "supervised"
    world = _world(args, config)
    data = make_splits(world, setting, args.seed)
    if args.checkpoint:
        bundle, header = load_bundle(args.checkpoint)
        if header.get("kind") == "finetune":
            raise ConfigError("--checkpoint", "expected a pre-training checkpoint")
    else:
        if variant in PRETRAINED:
            raise ConfigError("--checkpoint", f"variant {variant!r} needs a pre-training checkpoint")
        bundle = init_params(variant_model(model, variant), args.seed)
    fine = replace(fine, mode="weak" if setting == "weak" else "supervised",
                   freeze_oa=(variant == "sta-noft"))
    run = Finetuner(fine, bundle).fit(data.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.save(out / "model.ckpt")
    _dump(out / "run.json", {"variant": variant, "setting": setting, "seed": args.seed,
                             "history": run.history})
    print(f"fine-tuned {run.epoch} epochs ({run.steps} steps), final loss {run.history[-1]['loss']:.4f}")


def cmd_eval(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint", "eval needs a model checkpoint")
    config = experiment_config(args.config)
    bundle, header = load_bundle(args.checkpoint)
    meta_path = Path(args.checkpoint).with_name("run.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    variant = args.variant or meta.get("variant", "sta")
    setting = args.setting or meta.get("setting", "supervised")
    world = _world(args, config)
    data = make_splits(world, setting, args.seed)
    h = config_hash({"checkpoint": header, "setting": setting})
    report = evaluate(bundle, data, world.train, variant, args.seed, h)
    out = write_run(report, args.out, [world.spec.relation_name(r) for r in range(world.spec.num_relations)])
    print(f"{setting} {variant}: R@50 {report.recall_50:.4f}  R@100 {report.recall_100:.4f}  -> {out}")


def cmd_ablate(args):
    config = experiment_config(args.config)
    setting = args.setting or "supervised"
    variants = [args.variant] if args.variant else list(VARIANTS)
    world = load_world(args.data) if args.data else None
    reports = run_variants(config, args.seed, [setting], variants, world)[setting]
    spec = world.spec if world else config.resolve(args.seed)[0]
    names = [spec.relation_name(r) for r in range(spec.num_relations)]
    out = Path(args.out)
    for variant, report in reports.items():
        write_run(report, out / variant, names)
        print(f"{setting} {variant}: R@50 {report.recall_50:.4f}  R@100 {report.recall_100:.4f}")
    if args.svg:
        write_report([out], out, svg=True)


def cmd_report(args):
    reports = write_report(args.runs, args.out, svg=not args.no_svg)
    print(f"aggregated {len(reports)} runs into {args.out}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def _u64(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser():
    parser = argparse.ArgumentParser(prog="sta", description="Shuffle-then-assemble experiments on synthetic worlds.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, *flags):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=_u64, default=0)
        if "config" in flags:
            p.add_argument("--config", help="canonical JSON config")
        if "data" in flags:
            p.add_argument("--data", help="directory written by gen-data (default: generate from config)")
        if "checkpoint" in flags:
            p.add_argument("--checkpoint")
        if "setting" in flags:
            p.add_argument("--setting", choices=SETTINGS)
        if "variant" in flags:
            p.add_argument("--variant", choices=VARIANTS)
        return p

    add("gen-data", "generate a synthetic world", "config")
    add("pretrain", "adversarial pre-training of the OA layer", "config", "data", "checkpoint", "variant")
    add("finetune", "train the relation classifier", "config", "data", "checkpoint", "setting", "variant")
    add("eval", "evaluate a checkpoint into a metrics report", "config", "data", "checkpoint", "setting",
        "variant")
    p = add("ablate", "train and evaluate the model variants", "config", "data", "setting", "variant")
    p.add_argument("--svg", action="store_true", help="also emit charts")
    p = sub.add_parser("report", help="aggregate runs into CSV and SVG")
    p.add_argument("--out", required=True)
    p.add_argument("--no-svg", action="store_true")
    p.add_argument("runs", nargs="+", help="run directories or metrics.json files")
    return parser


def run_cli(argv=None):
    """Parse and run one command; returns the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"sta: config error: {exc}", file=sys.stderr)
        return 1
    except (StaError, OSError) as exc:
        print(f"sta: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
