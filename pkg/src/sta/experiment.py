"""Ablation harness: builds, trains and evaluates the five model variants
on one synthetic world under one setting."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

from .dataworld import SETTINGS, WorldSpec, generate_world, make_splits
from .errors import ConfigError
from .metrics import (MetricsReport, alignment_recovery, bias_curve, config_hash, mean_overlap_ratio,
                      pair_scores, per_relation_accuracy, predictions_from_scores, recall_at_k,
                      relation_bias, truths_of)
from .nets import ModelConfig, init_params
from .trainer import FinetuneConfig, PretrainConfig, finetune, pretrain

VARIANTS = ("base", "base-oa", "sta-noft", "sta-nores", "sta")
PRETRAINED = ("sta-noft", "sta-nores", "sta")

# Desk-scale schedule. The optimizer settings of the full-size recipe
# (1e-4 / 1e-5 over tens of epochs) barely move a network trained on a
# few hundred synthetic scenes, so the harness defaults are larger steps
# over fewer epochs.
DESK_PRETRAIN = {"g_lr": 3e-3, "d_lr": 1e-3, "epochs": 10}
DESK_FINETUNE = {"lr": 1e-3, "epochs": 15}


def _merge(cls, defaults, overrides, label):
    d = dict(defaults)
    d.update(overrides or {})
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{label}.{unknown[0]}", "unknown field")
    return cls(**d)


@dataclass
class ExperimentConfig:
    world: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(unknown[0], "unknown config section")
        cfg = cls(**{k: dict(v) for k, v in d.items()})
        cfg.resolve(0)
        return cfg

    def to_dict(self):
        return asdict(self)

    def resolve(self, seed):
        """(WorldSpec, ModelConfig, PretrainConfig, FinetuneConfig) for one seed."""
        spec = WorldSpec.from_dict({**self.world, "seed": seed}).resolved()
        spec.validate()
        model = _merge(ModelConfig, {"channels": spec.channels, "num_relations": spec.num_relations},
                       self.model, "model").validate()
        if model.channels != spec.channels:
            raise ConfigError("model.channels", f"world has {spec.channels} channels")
        if model.num_relations != spec.num_relations:
            raise ConfigError("model.num_relations", f"world has {spec.num_relations} relations")
        pre = _merge(PretrainConfig, {**DESK_PRETRAIN, "seed": seed}, self.pretrain, "pretrain").validate()
        fine = _merge(FinetuneConfig, {**DESK_FINETUNE, "seed": seed}, self.finetune, "finetune").validate()
        return spec, model, pre, fine


def variant_model(model, variant):
    if variant not in VARIANTS:
        raise ConfigError("variant", f"unknown variant {variant!r}")
    if variant == "base":
        return replace(model, use_oa=False, oa_channels=None)
    if variant == "sta-nores":
        return replace(model, residual=False)
    return replace(model, use_oa=True, residual=True) if variant in PRETRAINED else model


def pretrained_bundle(model, pre, train, seed, variant="sta"):
    bundle = init_params(variant_model(model, variant), seed)
    return pretrain(pre, train, bundle)


def train_variant(variant, model, pre, fine, annotated, train, seed, mode="supervised", cache=None):
    """Trained bundle for one variant.

    Pre-training consumes only the unpaired subject/object boxes of the
    ``annotated`` scenes; fine-tuning uses ``train`` under ``mode``.
    ``cache`` shares pre-training between variants with the same transforms.
    """
    fine = replace(fine, mode=mode, freeze_oa=(variant == "sta-noft"))
    if variant in PRETRAINED:
        key = "plain" if variant == "sta-nores" else "residual"
        if cache is not None and key in cache:
            bundle = cache[key].copy()
        else:
            bundle = pretrained_bundle(model, pre, annotated, seed, variant).bundle
            if cache is not None:
                cache[key] = bundle.copy()
    else:
        bundle = init_params(variant_model(model, variant), seed)
    finetune(fine, train, bundle)
    return bundle


def evaluate(bundle, data, train, variant, seed, cfg_hash, threads=None):
    """MetricsReport of a trained bundle on the test view of ``data``."""
    scores = pair_scores(bundle, data.test, threads)
    preds = predictions_from_scores(scores, data.test, bundle.config.num_relations)
    truths = truths_of(data.test)
    accuracy = per_relation_accuracy(scores, data.test)
    return MetricsReport(
        setting=data.setting,
        variant=variant,
        recall_50=recall_at_k(preds, truths, 50),
        recall_100=recall_at_k(preds, truths, 100),
        per_relation=accuracy,
        overlap_ratio=mean_overlap_ratio(bundle, data.test),
        alignment_recovery=alignment_recovery(bundle, data.test),
        bias_curve=bias_curve(relation_bias(train), accuracy),
        seed=seed,
        config_hash=cfg_hash,
    )


def run_variants(config, seed, settings, variants=VARIANTS, world=None, threads=None):
    """{setting: {variant: MetricsReport}} for one seed.

    Settings that share a training view (all but weak) share trained models;
    only their test views differ.
    """
    for setting in settings:
        if setting not in SETTINGS:
            raise ConfigError("setting", f"unknown setting {setting!r}")
    spec, model, pre, fine = config.resolve(seed)
    world = world or generate_world(spec)
    views = {s: make_splits(world, s, seed) for s in settings}
    cache = {}
    out = {s: {} for s in settings}
    for mode in ("supervised", "weak"):
        group = [s for s in settings if (s == "weak") == (mode == "weak")]
        if not group:
            continue
        for variant in variants:
            start = time.perf_counter()
            bundle = train_variant(variant, model, pre, fine, world.train, views[group[0]].train,
                                   seed, mode, cache)
            trained = time.perf_counter() - start
            for setting in group:
                t0 = time.perf_counter()
                cfg_hash = config_hash({"config": config.to_dict(), "setting": setting})
                report = evaluate(bundle, views[setting], world.train, variant, seed, cfg_hash, threads)
                report.wall_time = round(trained + time.perf_counter() - t0, 3)
                out[setting][variant] = report
    return out


def run_ablation(config, setting, seed, variants=VARIANTS, world=None, threads=None):
    """{variant: MetricsReport} for one seed and setting."""
    return run_variants(config, seed, [setting], variants, world, threads)[setting]
