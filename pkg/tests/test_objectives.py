import math

import numpy as np
import pytest

from sta import objectives as O
from sta import tensor as T
from sta.errors import ConfigError, ContractError
from sta.nets import ModelConfig, init_params
from sta.tensor import Tensor, grad_check


def const(p):
    return lambda x: Tensor(np.full(x.shape[0], p))


def ident(x):
    return x


def test_constant_half_discriminator_values():
    a, b = np.ones((4, 3)), np.zeros((5, 3))
    d_a, d_b, gen = O.adv_loss(a, b, ident, ident, const(0.5), const(0.5))
    assert d_a.item() == 0.5 and d_b.item() == 0.5
    # one generator term per direction, each 0.25
    assert O.generator_objective(Tensor([0.5, 0.5]), "least-squares").item() == 0.25
    assert gen.item() == 0.5


def test_perfect_and_fooled_discriminators():
    real, fake = Tensor([1.0, 1.0]), Tensor([0.0, 0.0])
    assert O.discriminator_objective(real, fake, "least-squares").item() == 0.0
    assert O.discriminator_objective(Tensor([0.0]), Tensor([1.0]), "least-squares").item() == 2.0
    assert O.generator_objective(Tensor([1.0]), "least-squares").item() == 0.0


def test_log_variant_values_and_clamp():
    v = O.discriminator_objective(Tensor([0.5]), Tensor([0.5]), "log").item()
    assert math.isclose(v, 2 * math.log(0.5), rel_tol=1e-15)
    assert O.discriminator_loss(Tensor([0.5]), Tensor([0.5]), "log").item() == -v
    before = O.clamp_events["count"]
    out = O.discriminator_objective(Tensor([0.0]), Tensor([1.0]), "log").item()
    assert math.isfinite(out)
    assert math.isclose(out, 2 * math.log(O.LOG_FLOOR))
    assert O.clamp_events["count"] == before + 2


def test_unknown_variant():
    with pytest.raises(ConfigError):
        O.discriminator_objective(Tensor([0.5]), Tensor([0.5]), "wasserstein")
    with pytest.raises(ConfigError):
        O.generator_objective(Tensor([0.5]), "hinge")


def test_cycle_loss_examples():
    a, b = np.arange(6.0).reshape(2, 3), np.ones((3, 3))
    assert O.cycle_loss(a, b, ident, ident).item() == 0.0
    shift = lambda x: x + 1.0  # noqa: E731
    # G(F(a)) = a + 2: per-sample L1 = 2 * dim, averaged per batch, both sides
    assert O.cycle_loss(a, b, shift, shift).item() == 2 * 3 * 2


def test_cycle_loss_empty_batch():
    with pytest.raises(ContractError):
        O.cycle_loss(np.zeros((0, 3)), np.ones((2, 3)), ident, ident)


def test_pretrain_objective_arithmetic():
    d_a, d_b, gen = O.pretrain_objective(Tensor(0.5), Tensor(0.25), Tensor(0.75), Tensor(0.125))
    assert d_a.item() == 0.5 and d_b.item() == 0.25
    assert gen.item() == 0.75 + 10 * 0.125
    assert O.LAMBDA_DEFAULT == 10.0
    _, _, g2 = O.pretrain_objective(Tensor(0.0), Tensor(0.0), Tensor(1.0), Tensor(3.0), lam=2.0)
    assert g2.item() == 7.0
    d_a, _, _ = O.pretrain_objective(Tensor(-1.5), Tensor(0.0), Tensor(0.0), Tensor(0.0), variant="log")
    assert d_a.item() == 1.5
    for lam in (0.0, -1.0):
        with pytest.raises(ConfigError):
            O.pretrain_objective(Tensor(0.0), Tensor(0.0), Tensor(0.0), Tensor(0.0), lam=lam)


def test_cross_entropy_of_uniform_scores():
    for R in (2, 8, 70):
        scores = Tensor(np.full((3, R), 1.0 / R))
        v = O.supervised_ce_loss(scores, [0, R - 1, 1])
        assert math.isclose(v.item(), math.log(R), rel_tol=1e-12)


def test_cross_entropy_label_range():
    with pytest.raises(ContractError):
        O.supervised_ce_loss(Tensor(np.full((1, 4), 0.25)), [4])
    with pytest.raises(ContractError):
        O.supervised_ce_loss(Tensor(np.full((1, 4), 0.25)), [-1])
    with pytest.raises(ContractError):
        O.supervised_ce_loss(Tensor(np.full((2, 4), 0.25)), [1])


def test_weak_loss_examples():
    scores = Tensor(np.array([[0.9, 0.1], [0.7, 0.3]]))
    v = O.weak_loss(scores, {0})
    assert math.isclose(v.item(), -(math.log(0.8) + math.log(1 - 0.2)), rel_tol=1e-12)
    with pytest.raises(ContractError):
        O.weak_loss(scores, {2})
    with pytest.raises(ContractError):
        O.weak_loss(Tensor(np.zeros((0, 2))), {0})


# ---------------------------------------------------------------- gradients

def _bundle():
    cfg = ModelConfig(channels=2, pool=2, disc_hidden=6)
    b = init_params(cfg, 5)
    r = np.random.default_rng(6)
    for name in ("F", "G"):
        for _, p in b.groups()[name]:
            p.data[...] = r.standard_normal(p.data.shape) * 0.3
    return b


@pytest.mark.parametrize("variant", ["least-squares", "log"])
def test_adversarial_gradients(variant):
    b = _bundle()
    r = np.random.default_rng(7)
    for case in range(20):
        a, bb = r.standard_normal((3, 8)), r.standard_normal((4, 8))

        def terms(x, y):
            d_a, d_b, gen = O.adv_loss(x, y, b.F, b.G, b.D_A, b.D_B, variant)
            return d_a + d_b * 0.5 + gen * 0.25

        assert grad_check(terms, [a, bb], seed=case) < 1e-5


def test_paired_adversarial_gradient():
    cfg = ModelConfig(channels=2, pool=2, disc_hidden=6, paired_discriminator=True)
    b = init_params(cfg, 5)
    r = np.random.default_rng(8)
    for case in range(20):
        xs = [r.standard_normal((3, 8)), r.standard_normal((3, 8)), r.standard_normal((3, 8)),
              r.standard_normal((3, 8))]

        def terms(a, bb, pa, pb):
            d_a, d_b, gen = O.adv_loss(a, bb, b.F, b.G, b.D_A, b.D_B, "least-squares", pa, pb)
            return d_a + d_b + gen

        assert grad_check(terms, xs, seed=case) < 1e-5


def test_cycle_gradient():
    b = _bundle()
    r = np.random.default_rng(9)
    for case in range(20):
        a, bb = r.standard_normal((3, 8)), r.standard_normal((2, 8))
        assert grad_check(lambda x, y: O.cycle_loss(x, y, b.F, b.G), [a, bb], seed=case) < 1e-5


def test_full_objective_gradient():
    b = _bundle()
    r = np.random.default_rng(10)
    for case in range(20):
        a, bb = r.standard_normal((3, 8)), r.standard_normal((3, 8))
        fn = lambda x, y: O.pretrain_losses(x, y, b).total  # noqa: E731
        assert grad_check(fn, [a, bb], seed=case) < 1e-5


def test_ce_and_weak_gradients():
    r = np.random.default_rng(11)
    for case in range(20):
        logits = r.standard_normal((5, 6))
        labels = r.integers(0, 6, size=5)
        present = set(r.choice(6, size=2, replace=False).tolist())
        assert grad_check(lambda z: O.supervised_ce_loss(T.softmax(z), labels), [logits], seed=case) < 1e-5
        assert grad_check(lambda z: O.weak_loss(T.softmax(z), present), [logits], seed=case) < 1e-5
