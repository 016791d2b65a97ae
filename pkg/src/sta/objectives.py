"""Losses: adversarial (log and least-squares), cycle, the combined
pre-training objective, supervised cross-entropy and the weak image-level loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError

LOG_FLOOR = 1e-12
LAMBDA_DEFAULT = 10.0

# how many times a log argument hit the clamp floor
clamp_events = {"count": 0}


def safe_log(x):
    x = T.as_tensor(x)
    hits = int(np.sum(x.data < LOG_FLOOR))
    if hits:
        clamp_events["count"] += hits
    return T.log(T.clip(x, LOG_FLOOR, np.inf))


@dataclass
class LossBreakdown:
    """Adversarial and cycle terms of one batch.

    ``adv_d_a``/``adv_d_b`` are in the variant's native sense: for ``log`` they
    are the quantities the discriminators maximize, for ``least-squares`` the
    quantities they minimize. ``adv_gen`` is always minimized by F and G.
    """

    adv_d_a: object
    adv_d_b: object
    adv_gen: object
    cycle: object
    total: object
    variant: str

    def values(self):
        return {k: float(T.as_tensor(getattr(self, k)).item())
                for k in ("adv_d_a", "adv_d_b", "adv_gen", "cycle", "total")}


def _nonempty(*batches):
    for b in batches:
        if b is None or T.as_tensor(b).shape[0] == 0:
            raise ContractError("empty batch")


def discriminator_objective(real_prob, fake_prob, variant):
    if variant == "least-squares":
        return T.mean(T.square(real_prob - 1.0)) + T.mean(T.square(fake_prob))
    if variant == "log":
        return T.mean(safe_log(real_prob)) + T.mean(safe_log(1.0 - fake_prob))
    raise ConfigError("gan_variant", f"unknown variant {variant!r}")


def discriminator_loss(real_prob, fake_prob, variant):
    """The quantity a discriminator descends on."""
    obj = discriminator_objective(real_prob, fake_prob, variant)
    return -obj if variant == "log" else obj


def generator_objective(fake_prob, variant):
    if variant == "least-squares":
        return T.mean(T.square(fake_prob - 1.0))
    if variant == "log":
        return T.mean(safe_log(1.0 - fake_prob))
    raise ConfigError("gan_variant", f"unknown variant {variant!r}")


def _disc_input(x, cond):
    return x if cond is None else T.concat([cond, x], axis=-1)


def adv_loss(batch_a, batch_b, F, G, D_A, D_B, variant="least-squares", pair_a=None, pair_b=None):
    """Adversarial terms for domains A (subjects) and B (objects).

    ``pair_a``/``pair_b`` enable the paired discriminator: D_B then judges
    [a, F(a)] against [pair_b, b] and D_A judges [b, G(b)] against [pair_a, a].
    """
    _nonempty(batch_a, batch_b)
    a, b = T.as_tensor(batch_a), T.as_tensor(batch_b)
    fa, gb = F(a), G(b)
    ca = None if pair_a is None else T.as_tensor(pair_a)
    cb = None if pair_b is None else T.as_tensor(pair_b)
    da_real = D_A(_disc_input(a, ca))
    da_fake = D_A(_disc_input(gb, None if cb is None else b))
    db_real = D_B(_disc_input(b, cb))
    db_fake = D_B(_disc_input(fa, None if ca is None else a))
    d_a = discriminator_objective(da_real, da_fake, variant)
    d_b = discriminator_objective(db_real, db_fake, variant)
    gen = generator_objective(db_fake, variant) + generator_objective(da_fake, variant)
    return d_a, d_b, gen


def cycle_loss(batch_a, batch_b, F, G):
    """Mean per-sample L1 round-trip error, A side plus B side."""
    _nonempty(batch_a, batch_b)
    a, b = T.as_tensor(batch_a), T.as_tensor(batch_b)
    ra = T.tsum(T.tabs(a - G(F(a)))) * (1.0 / a.shape[0])
    rb = T.tsum(T.tabs(b - F(G(b)))) * (1.0 / b.shape[0])
    return ra + rb


def pretrain_objective(adv_d_a, adv_d_b, adv_gen, cycle, lam=LAMBDA_DEFAULT, variant="least-squares"):
    """Per-party losses: (loss for D_A, loss for D_B, loss for F, G and phi)."""
    if not lam > 0:
        raise ConfigError("lambda", f"must be > 0, got {lam}")
    sign = -1.0 if variant == "log" else 1.0
    gen = adv_gen + T.as_tensor(cycle) * float(lam)
    return T.as_tensor(adv_d_a) * sign, T.as_tensor(adv_d_b) * sign, gen


def pretrain_losses(batch_a, batch_b, bundle, lam=LAMBDA_DEFAULT, variant="least-squares",
                    pair_a=None, pair_b=None):
    """Full breakdown for one batch under the bundle's F, G, D_A, D_B."""
    d_a, d_b, gen = adv_loss(batch_a, batch_b, bundle.F, bundle.G, bundle.D_A, bundle.D_B,
                             variant, pair_a, pair_b)
    cyc = cycle_loss(batch_a, batch_b, bundle.F, bundle.G)
    _, _, total = pretrain_objective(d_a, d_b, gen, cyc, lam, variant)
    return LossBreakdown(d_a, d_b, gen, cyc, total, variant)


def supervised_ce_loss(scores, labels):
    """Mean of -log S(i, j, r_true) over pairs; labels are 0-based relation ids."""
    scores = T.as_tensor(scores)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.data.ndim != 2 or labels.shape != (scores.shape[0],):
        raise ContractError("need one label per score row")
    if labels.size == 0:
        raise ContractError("no pairs")
    if labels.min() < 0 or labels.max() >= scores.shape[1]:
        raise ContractError(f"relation index out of range [0, {scores.shape[1]})")
    return -T.mean(safe_log(T.pick(scores, labels)))


def weak_loss(scores, image_labels):
    """Binary cross-entropy of average-pooled pair scores against image labels.

    ``scores`` holds one row per ordered object pair; ``image_labels`` is the
    set of relation ids present in the image.
    """
    scores = T.as_tensor(scores)
    if scores.data.ndim != 2 or scores.shape[0] == 0:
        raise ContractError("weak loss needs at least one pair")
    y = np.zeros(scores.shape[1])
    for r in image_labels:
        if not 0 <= r < scores.shape[1]:
            raise ContractError(f"relation index {r} out of range")
        y[r] = 1.0
    s = T.clip(T.mean(scores, axis=0), LOG_FLOOR, 1.0 - LOG_FLOOR)
    yt = T.Tensor(y)
    bce = T.mul(yt, T.log(s)) + T.mul(T.Tensor(1.0 - y), T.log(1.0 - s))
    return -T.tsum(bce)
