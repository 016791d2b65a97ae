"""Adversarial pre-training of the OA layer and fine-tuning of the classifier."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import checkpoint
from . import tensor as T
from .dataworld import DomainSets, Scene, augment_rois, shuffle_domains
from .errors import ConfigError, DataError
from .nets import ModelConfig, init_params
from .objectives import (discriminator_loss, pretrain_losses, supervised_ce_loss, weak_loss)
from .optim import Optimizer, OptimizerState

log = logging.getLogger(__name__)

LOSS_KEYS = ("adv_d_a", "adv_d_b", "adv_gen", "cycle", "total")


def _from_dict(cls, d):
    known = {f.name for f in fields(cls)}
    for key in d:
        if key not in known:
            raise ConfigError(key, f"unknown {cls.__name__} field")
    return cls(**d).validate()


@dataclass
class PretrainConfig:
    lam: float = 10.0
    d_lr: float = 1e-4
    g_lr: float = 1e-4
    d_steps_per_g: int = 3
    epochs: int = 20
    pairs_per_image: int = 128
    rois_per_box: int = 10
    iou_min: float = 0.7
    gan_variant: str = "least-squares"
    seed: int = 0

    def validate(self):
        if not self.lam > 0:
            raise ConfigError("lam", "must be > 0")
        if self.d_steps_per_g < 1:
            raise ConfigError("d_steps_per_g", "must be >= 1")
        if not 0 < self.iou_min <= 1:
            raise ConfigError("iou_min", "must be in (0, 1]")
        if self.pairs_per_image < 1:
            raise ConfigError("pairs_per_image", "must be >= 1")
        if self.rois_per_box < 1:
            raise ConfigError("rois_per_box", "must be >= 1")
        if self.d_lr <= 0 or self.g_lr <= 0:
            raise ConfigError("d_lr/g_lr", "learning rates must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.gan_variant not in ("least-squares", "log"):
            raise ConfigError("gan_variant", "must be 'least-squares' or 'log'")
        return self

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


@dataclass
class FinetuneConfig:
    lr: float = 1e-5
    epochs: int = 50
    pairs_per_image: int = 128
    mode: str = "supervised"
    freeze_oa: bool = False
    seed: int = 0

    def validate(self):
        if not self.lr > 0:
            raise ConfigError("lr", "must be > 0")
        if self.mode not in ("supervised", "weak"):
            raise ConfigError("mode", "must be 'supervised' or 'weak'")
        if self.pairs_per_image < 1:
            raise ConfigError("pairs_per_image", "must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


def _opt_state(opt):
    s = opt.state
    return s.hyper(), {f"m.{i}": m for i, m in enumerate(s.m)} | {f"v.{i}": v for i, v in enumerate(s.v)}


def _restore_opt(opt, hyper, arrays):
    s = opt.state
    s.kind, s.lr, s.beta1, s.beta2, s.eps, s.t = (hyper["kind"], hyper["lr"], hyper["beta1"],
                                                  hyper["beta2"], hyper["eps"], hyper["t"])
    n = sum(1 for k in arrays if k.startswith("m."))
    s.m = [arrays[f"m.{i}"].copy() for i in range(n)]
    s.v = [arrays[f"v.{i}"].copy() for i in range(n)]


class _Run:
    """Shared bookkeeping: rng, epoch counter, history, checkpointing."""

    kind = "run"

    def __init__(self, config, bundle):
        self.config = config
        self.bundle = bundle
        self.rng = np.random.default_rng(config.seed)
        self.epoch = 0
        self.history = []
        self.optimizers = {}

    def _header(self):
        return {
            "kind": self.kind,
            "config": asdict(self.config),
            "model": self.bundle.config.to_dict(),
            "epoch": self.epoch,
            "history": self.history,
            "rng": self.rng.bit_generator.state,
            "optimizers": {k: _opt_state(o)[0] for k, o in self.optimizers.items()},
            "counters": self._counters(),
        }

    def _counters(self):
        return {}

    def _set_counters(self, counters):
        pass

    def save(self, path):
        arrays = {f"param.{k}": v for k, v in self.bundle.state_arrays().items()}
        for name, opt in self.optimizers.items():
            for k, v in _opt_state(opt)[1].items():
                arrays[f"opt.{name}.{k}"] = v
        checkpoint.save(path, self._header(), arrays)

    @classmethod
    def load(cls, path):
        header, arrays = checkpoint.load(path)
        if header.get("kind") != cls.kind:
            raise ConfigError("kind", f"checkpoint holds a {header.get('kind')!r} run, not {cls.kind!r}")
        bundle = bundle_from_arrays(header["model"], arrays)
        run = cls(cls.config_type.from_dict(header["config"]), bundle)
        run.epoch = header["epoch"]
        run.history = header["history"]
        run.rng.bit_generator.state = header["rng"]
        for name, opt in run.optimizers.items():
            prefix = f"opt.{name}."
            own = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            _restore_opt(opt, header["optimizers"][name], own)
        run._set_counters(header["counters"])
        return run


def bundle_from_arrays(model_dict, arrays):
    bundle = init_params(ModelConfig(**model_dict), 0)
    bundle.load_arrays({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    return bundle


def load_bundle(path):
    header, arrays = checkpoint.load(path)
    return bundle_from_arrays(header["model"], arrays), header


class Pretrainer(_Run):
    """Per image: ``d_steps_per_g`` SGD steps on D_A, D_B, then one Adam step
    on F, G and the OA layer against adversarial + lambda * cycle."""

    kind = "pretrain"
    config_type = PretrainConfig

    def __init__(self, config, bundle):
        super().__init__(config.validate(), bundle)
        gen = ("phi", "F", "G") if bundle.config.use_oa else ("F", "G")
        self.d_params = bundle.params("D_A", "D_B")
        self.g_params = bundle.params(*gen)
        self.optimizers = {
            "d": Optimizer(self.d_params, OptimizerState("sgd", config.d_lr)),
            "g": Optimizer(self.g_params, OptimizerState("adam", config.g_lr)),
        }
        self.d_steps = 0
        self.g_steps = 0
        self.skipped = 0

    def _counters(self):
        return {"d_steps": self.d_steps, "g_steps": self.g_steps, "skipped": self.skipped}

    def _set_counters(self, c):
        self.d_steps, self.g_steps, self.skipped = c["d_steps"], c["g_steps"], c["skipped"]

    def _sample(self, boxes):
        cfg = self.config
        if len(boxes) > cfg.pairs_per_image:
            keep = np.sort(self.rng.choice(len(boxes), cfg.pairs_per_image, replace=False))
            boxes = [boxes[i] for i in keep]
        return boxes

    def _augment(self, boxes, bounds):
        out = []
        for box in boxes:
            seed = int(self.rng.integers(2 ** 63))
            out += augment_rois(box, self.config.rois_per_box, self.config.iou_min, bounds, seed)
        return out

    def step_image(self, base, a_boxes, b_boxes):
        cfg, bundle = self.config, self.bundle
        h, w, _ = base.shape
        a_boxes = self._augment(self._sample(a_boxes), (w, h))
        b_boxes = self._augment(self._sample(b_boxes), (w, h))
        fmap = bundle.feature_map(base)
        A = bundle.roi_features(fmap, a_boxes)
        B = bundle.roi_features(fmap, b_boxes)
        pair_a = pair_b = None
        if bundle.config.paired_discriminator:
            pair_a = T.Tensor(B.data[self.rng.integers(len(b_boxes), size=len(a_boxes))])
            pair_b = T.Tensor(A.data[self.rng.integers(len(a_boxes), size=len(b_boxes))])

        a_det, b_det = T.Tensor(A.data), T.Tensor(B.data)
        with T.no_grad():
            fa, gb = bundle.F(a_det), bundle.G(b_det)
        if pair_a is None:
            da_in = (a_det, gb)
            db_in = (b_det, fa)
        else:
            da_in = (T.concat([pair_a, a_det]), T.concat([b_det, gb]))
            db_in = (T.concat([pair_b, b_det]), T.concat([a_det, fa]))
        for _ in range(cfg.d_steps_per_g):
            loss = (discriminator_loss(bundle.D_A(da_in[0]), bundle.D_A(da_in[1]), cfg.gan_variant)
                    + discriminator_loss(bundle.D_B(db_in[0]), bundle.D_B(db_in[1]), cfg.gan_variant))
            T.backward(loss, self.d_params)
            self.optimizers["d"].step()
            self.d_steps += 1

        parts = pretrain_losses(A, B, bundle, cfg.lam, cfg.gan_variant, pair_a, pair_b)
        T.backward(parts.total, self.g_params)
        self.optimizers["g"].step()
        self.g_steps += 1
        return parts.values()

    def run_epoch(self, domains, maps):
        per_scene = domains.by_scene()
        order = sorted(maps)
        sums, n = dict.fromkeys(LOSS_KEYS, 0.0), 0
        for i in self.rng.permutation(len(order)):
            sid = order[i]
            rec = per_scene.get(sid)
            if not rec or not rec["a"] or not rec["b"]:
                self.skipped += 1
                continue
            vals = self.step_image(maps[sid], rec["a"], rec["b"])
            for k in LOSS_KEYS:
                sums[k] += vals[k]
            n += 1
        if n == 0:
            raise DataError("every image in the epoch was skipped (no relationships)")
        self.epoch += 1
        entry = {k: v / n for k, v in sums.items()}
        self.history.append(entry)
        log.info("pretrain epoch %d: %s", self.epoch, entry)
        return entry

    def fit(self, domains, maps, epochs=None):
        target = self.config.epochs if epochs is None else epochs
        while self.epoch < target:
            self.run_epoch(domains, maps)
        return self


def pretrain_inputs(scenes, seed=0):
    """The only views of the data pre-training consumes: unpaired domain
    records and the base feature maps."""
    if not scenes:
        raise DataError("no training scenes")
    return shuffle_domains(scenes, seed), {s.scene_id: s.features for s in scenes}


@dataclass
class PretrainResult:
    bundle: object
    history: list
    d_steps: int
    g_steps: int
    skipped: int


def pretrain(config, scenes, bundle=None, model_config=None):
    if bundle is None:
        bundle = init_params(model_config or ModelConfig(), config.seed)
    domains, maps = (scenes if isinstance(scenes, tuple) else pretrain_inputs(scenes, config.seed))
    run = Pretrainer(config, bundle).fit(domains, maps)
    return PretrainResult(run.bundle, run.history, run.d_steps, run.g_steps, run.skipped)


class Finetuner(_Run):
    kind = "finetune"
    config_type = FinetuneConfig

    def __init__(self, config, bundle):
        super().__init__(config.validate(), bundle)
        groups = ["theta"]
        if bundle.config.use_oa and not config.freeze_oa:
            groups.insert(0, "phi")
        self.params = bundle.params(*groups)
        self.optimizers = {"theta": Optimizer(self.params, OptimizerState("adam", config.lr))}
        self.steps = 0

    def _counters(self):
        return {"steps": self.steps}

    def _set_counters(self, c):
        self.steps = c["steps"]

    def image_loss(self, scene):
        cfg, bundle = self.config, self.bundle
        if cfg.mode == "supervised":
            trips = scene.triplets
            if len(trips) > cfg.pairs_per_image:
                keep = np.sort(self.rng.choice(len(trips), cfg.pairs_per_image, replace=False))
                trips = [trips[i] for i in keep]
            pairs = [(scene.objects[t.subject].box, scene.objects[t.object].box) for t in trips]
            scores = bundle.scores(scene.features, pairs)
            return supervised_ce_loss(scores, [t.relation for t in trips])
        n = len(scene.objects)
        pairs = [(scene.objects[i].box, scene.objects[j].box) for i in range(n) for j in range(n) if i != j]
        if len(pairs) > cfg.pairs_per_image:
            keep = np.sort(self.rng.choice(len(pairs), cfg.pairs_per_image, replace=False))
            pairs = [pairs[i] for i in keep]
        scores = bundle.scores(scene.features, pairs)
        return weak_loss(scores, scene.image_labels)

    def _check(self, scenes):
        for s in scenes:
            if self.config.mode == "weak" and getattr(s, "image_labels", None) is None:
                raise ConfigError("mode", f"weak mode needs image-level labels (scene {s.scene_id})")
            if self.config.mode == "supervised" and not isinstance(s, Scene):
                raise ConfigError("mode", f"supervised mode needs triplet annotations (scene {s.scene_id})")

    def run_epoch(self, scenes):
        total, n = 0.0, 0
        for i in self.rng.permutation(len(scenes)):
            scene = scenes[i]
            if self.config.mode == "supervised" and not scene.triplets:
                continue
            if self.config.mode == "weak" and len(scene.objects) < 2:
                continue
            loss = self.image_loss(scene)
            T.backward(loss, self.params)
            self.optimizers["theta"].step()
            self.steps += 1
            total += loss.item()
            n += 1
        if n == 0:
            raise DataError("no usable images in the fine-tuning epoch")
        self.epoch += 1
        entry = {"loss": total / n}
        self.history.append(entry)
        log.info("finetune epoch %d: %s", self.epoch, entry)
        return entry

    def fit(self, scenes, epochs=None):
        self._check(scenes)
        target = self.config.epochs if epochs is None else epochs
        while self.epoch < target:
            self.run_epoch(scenes)
        return self


@dataclass
class FinetuneResult:
    bundle: object
    history: list


def finetune(config, scenes, bundle):
    run = Finetuner(config, bundle).fit(list(scenes))
    return FinetuneResult(run.bundle, run.history)


def training_loss(bundle, scenes, mode="supervised"):
    """Mean per-image loss without updating anything."""
    run = Finetuner(FinetuneConfig(mode=mode), bundle)
    with T.no_grad():
        vals = [run.image_loss(s).item() for s in scenes]
    return float(np.mean(vals))
