"""Translation objective: adversarial, cycle, bottleneck and multiplier rules."""

import numpy as np
import pytest

from _gradcheck import fd_check

from adaseg import autodiff as ad
from adaseg.autodiff import Tensor
from adaseg.errors import DivergenceError
from adaseg.networks import (BottleneckOut, NetworkSpec, build_discriminator,
                             build_translator)
from adaseg.transferability import TransferabilityMap, zero_map
from adaseg.translation import (LossBundle, TdState, TdTrainer, adv_loss_s2t,
                                adv_loss_t2s, bottleneck_loss, cycle_loss, gaussian_kl,
                                lagrange_update, td_total_loss, zero_p_provider)

RNG = np.random.default_rng(9)
TINY = NetworkSpec(base_channels=2, depth=2, num_classes=2, latent_channels=2,
                   ra2b_count=1, noise_channels=2)


class ConstantDisc:
    """Stub discriminator producing a constant probability map."""

    def __init__(self, value, shape=(1, 1, 2, 2)):
        self.values = list(value) if isinstance(value, (list, tuple)) else [value]
        self.shape = shape
        self.calls = 0

    def __call__(self, x):
        v = self.values[min(self.calls, len(self.values) - 1)]
        self.calls += 1
        n = x.shape[0] if hasattr(x, "shape") else 1
        return Tensor(np.full((n,) + self.shape[1:], v))


class ShiftTranslator:
    """Stub translator adding a constant, with a zero bottleneck head."""

    def __init__(self, shift=0.0, latent=2):
        self.shift = shift
        self.latent = latent
        self.training = True

    def __call__(self, x, rng=None):
        x = ad.as_tensor(x)
        b, _, h, w = x.shape
        zeros = Tensor(np.zeros((b, self.latent, h, w)))
        return x + self.shift, BottleneckOut(mu=zeros, log_var=zeros)


def batch(n=1, size=4):
    return RNG.uniform(0.1, 0.9, size=(n, 3, size, size))


def test_adv_loss_constant_half_discriminator():
    loss = adv_loss_s2t(batch(), batch(), ShiftTranslator(), ConstantDisc(0.5))
    assert loss.item() == pytest.approx(1.0, abs=1e-9)  # log .5 + (1 - log .5)


def test_adv_loss_perfect_separation_is_large():
    eps = 1e-6
    disc = ConstantDisc([1.0 - eps, eps])  # real first, fake second
    loss = adv_loss_s2t(batch(), batch(), ShiftTranslator(), disc)
    assert loss.item() == pytest.approx(np.log(1 - eps) + 1 - np.log(eps), rel=1e-6)
    assert loss.item() > 10


def test_adv_loss_mirror_direction():
    loss = adv_loss_t2s(batch(), batch(), ShiftTranslator(), ConstantDisc(0.5))
    assert loss.item() == pytest.approx(1.0, abs=1e-9)


def test_adv_loss_conventional_form():
    loss = adv_loss_s2t(batch(), batch(), ShiftTranslator(), ConstantDisc(0.5),
                        conventional=True)
    assert loss.item() == pytest.approx(2 * np.log(0.5), abs=1e-9)


def test_adv_loss_shape_mismatch():
    with pytest.raises(ValueError):
        adv_loss_s2t(batch(size=4), batch(size=8), ShiftTranslator(), ConstantDisc(0.5))


def test_adv_loss_matches_scalar_oracle_on_real_nets():
    rng = np.random.default_rng(1)
    tr = build_translator(TINY, rng, dtype=np.float64)
    tr.set_training(False)
    d1 = build_discriminator(TINY, "image", rng, dtype=np.float64)
    bs, bt = batch(2, 8), batch(2, 8)
    loss = adv_loss_s2t(bs, bt, tr, d1).item()
    with ad.no_grad():
        fake, _ = tr(bs)
        d_real = d1(Tensor(bt)).data
        d_fake = d1(fake).data
    acc_real = sum(np.log(v) for v in d_real.ravel()) / d_real.size
    acc_fake = sum(np.log(v) for v in d_fake.ravel()) / d_fake.size
    assert abs(loss - (acc_real + 1 - acc_fake)) < 1e-6


def test_cycle_loss_identity_translators():
    loss = cycle_loss(batch(), batch(), ShiftTranslator(0.0), ShiftTranslator(0.0))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_cycle_loss_constant_shift():
    # each direction's cycle gains +0.1 per pixel -> 0.1 mean L1 per term
    loss = cycle_loss(batch(), batch(), ShiftTranslator(0.1), ShiftTranslator(0.0))
    assert loss.item() == pytest.approx(0.2, abs=1e-9)


def test_cycle_loss_matches_elementwise_oracle():
    rng = np.random.default_rng(2)
    t1 = build_translator(TINY, rng, dtype=np.float64)
    t2 = build_translator(TINY, rng, dtype=np.float64)
    t1.set_training(False)
    t2.set_training(False)
    bs, bt = batch(2, 8), batch(2, 8)
    loss = cycle_loss(bs, bt, t1, t2).item()
    with ad.no_grad():
        rec_s = t2(t1(bs)[0])[0].data
        rec_t = t1(t2(bt)[0])[0].data
    oracle = np.mean(np.abs(rec_t - bt)) + np.mean(np.abs(rec_s - bs))
    assert abs(loss - oracle) < 1e-6


def test_gaussian_kl_zero_iff_standard_normal():
    z = np.zeros((1, 3, 2, 2))
    assert np.allclose(gaussian_kl(z, z).data, 0.0, atol=1e-12)
    mu = RNG.normal(size=(1, 3, 2, 2))
    lv = RNG.normal(size=(1, 3, 2, 2))
    kl = gaussian_kl(mu, lv).data
    assert kl.min() >= -1e-9
    assert kl.max() > 1e-9


def test_gaussian_kl_closed_forms():
    one = np.ones((1, 1, 1, 1))
    zero = np.zeros((1, 1, 1, 1))
    assert gaussian_kl(one, zero).item() == pytest.approx(0.5, abs=1e-12)
    lv = np.full((1, 1, 1, 1), np.log(4.0))
    expected = 0.5 * (4.0 - 1.0 - np.log(4.0))
    assert gaussian_kl(zero, lv).item() == pytest.approx(expected, abs=1e-12)
    assert gaussian_kl(zero, lv).item() == pytest.approx(0.8069, abs=1e-4)


def test_bottleneck_loss_zero_p_and_zero_kl():
    mu = RNG.normal(size=(2, 3, 4, 4))
    lv = RNG.normal(size=(2, 3, 4, 4))
    p0 = zero_map(2, 4, 4)
    assert bottleneck_loss(mu, lv, p0, 200.0).item() == pytest.approx(-200.0, abs=1e-9)
    z = np.zeros((2, 3, 4, 4))
    p_rand = TransferabilityMap(RNG.uniform(0, 1, size=(2, 1, 4, 4)))
    assert bottleneck_loss(z, z, p_rand, 50.0).item() == pytest.approx(-50.0, abs=1e-9)


def test_bottleneck_loss_matches_scalar_oracle():
    mu = RNG.normal(size=(1, 2, 2, 2))
    lv = RNG.normal(size=(1, 2, 2, 2))
    p = TransferabilityMap(RNG.uniform(0, 1, size=(1, 1, 2, 2)))
    loss = bottleneck_loss(mu, lv, p, 3.0).item()
    acc = 0.0
    for i in range(2):
        for j in range(2):
            kl = sum(0.5 * (mu[0, c, i, j] ** 2 + np.exp(lv[0, c, i, j]) - 1 - lv[0, c, i, j])
                     for c in range(2))
            acc += p.values[0, 0, i, j] * kl
    assert abs(loss - (acc / 4 - 3.0)) < 1e-6


def test_lagrange_update_rules():
    assert lagrange_update(1e-4, 1e-6, 50.0) == pytest.approx(1e-4)
    assert lagrange_update(1e-4, 1e-6, 500.0) == pytest.approx(5e-4)
    assert lagrange_update(1e-4, 1e-6, -120.0) == pytest.approx(1e-4)


def test_td_total_loss_hand_composition():
    """adv=1 each, cycle=0.3, bottleneck=-200 each, lambda=1e-4, alpha=10 -> 4.96."""
    state = TdState(alpha=10.0, t_threshold=200.0)
    s2t, t2s = ShiftTranslator(0.15), ShiftTranslator(0.0)
    d1, d2 = ConstantDisc(0.5), ConstantDisc(0.5)
    bs, bt = batch(), batch()
    p0 = zero_map(1, 2, 2)
    total, bundle = td_total_loss(bs, bt, s2t, t2s, d1, d2, state, p0, p0)
    assert bundle.adv_s2t == pytest.approx(1.0, abs=1e-9)
    assert bundle.adv_t2s == pytest.approx(1.0, abs=1e-9)
    assert bundle.cycle == pytest.approx(0.3, abs=1e-9)
    assert bundle.bottleneck_s == pytest.approx(-200.0, abs=1e-9)
    assert total.item() == pytest.approx(4.96, abs=1e-6)


def test_loss_bundle_flags_divergence():
    bundle = LossBundle(1.0, np.inf, 0.0, 0.0, 0.0, 1e-4, 1e-4, np.inf)
    with pytest.raises(DivergenceError) as err:
        bundle.check_finite()
    assert err.value.term == "adv_t2s"


def test_td_total_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    t1 = build_translator(TINY, rng, dtype=np.float64)
    t2 = build_translator(TINY, rng, dtype=np.float64)
    d1 = build_discriminator(TINY, "image", rng, dtype=np.float64)
    d2 = build_discriminator(TINY, "image", rng, dtype=np.float64)
    for net in (t1, t2, d1, d2):
        net.set_training(False)
    state = TdState(alpha=10.0, t_threshold=2.0)
    bs, bt = batch(1, 8), batch(1, 8)
    p = TransferabilityMap(np.random.default_rng(5).uniform(0.2, 0.9, size=(1, 1, 4, 4)))

    def loss_fn():
        for net in (t1, t2, d1, d2):
            net.zero_grad()
        total, _ = td_total_loss(bs, bt, t1, t2, d1, d2, state, p, p)
        return total

    params = {}
    for prefix, net in (("t1", t1), ("t2", t2), ("d1", d1), ("d2", d2)):
        params.update({f"{prefix}.{k}": v for k, v in net.named_parameters().items()})
    fd_check(loss_fn, params, n_entries=2)


def test_zero_p_reduces_to_plain_cyclegan_gradient():
    """With P=0 the bottleneck contributes a constant, so gradients equal the
    adversarial + cycle objective's exactly."""
    rng = np.random.default_rng(6)
    t1 = build_translator(TINY, rng, dtype=np.float64)
    t2 = build_translator(TINY, rng, dtype=np.float64)
    d1 = build_discriminator(TINY, "image", rng, dtype=np.float64)
    d2 = build_discriminator(TINY, "image", rng, dtype=np.float64)
    for net in (t1, t2, d1, d2):
        net.set_training(False)
    state = TdState(alpha=10.0, t_threshold=5.0)
    bs, bt = batch(1, 8), batch(1, 8)
    p0 = zero_map(1, 4, 4)

    total, _ = td_total_loss(bs, bt, t1, t2, d1, d2, state, p0, p0)
    total.backward()
    grads_full = {k: v.grad.copy() for k, v in t1.named_parameters().items()}
    for net in (t1, t2, d1, d2):
        net.zero_grad()

    plain = (adv_loss_s2t(bs, bt, t1, d1) + adv_loss_t2s(bs, bt, t2, d2)
             + state.alpha * cycle_loss(bs, bt, t1, t2))
    plain.backward()
    for name, p in t1.named_parameters().items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        assert np.allclose(grads_full[name], grad, atol=1e-11), name


def test_lambda_nondecreasing_over_training_trace():
    """50 optimizer steps of real training keep both multipliers monotone."""
    rng = np.random.default_rng(8)
    trainer = TdTrainer(build_translator(TINY, rng), build_translator(TINY, rng),
                        build_discriminator(TINY, "image", rng),
                        build_discriminator(TINY, "image", rng),
                        TdState(t_threshold=0.05, gamma=10.0), lr=1e-3)
    src = RNG.uniform(0, 1, size=(10, 3, 8, 8)).astype(np.float32)
    tgt = RNG.uniform(0, 1, size=(10, 3, 8, 8)).astype(np.float32)
    for _ in range(10):  # 10 epochs x 5 steps = 50 steps
        trainer.train_epoch(src, tgt, zero_p_provider, batch_size=2, rng=rng)
    lam_s = [v[0] for v in trainer.lambda_history]
    lam_t = [v[1] for v in trainer.lambda_history]
    assert len(lam_s) == 11
    assert all(b >= a for a, b in zip(lam_s, lam_s[1:]))
    assert all(b >= a for a, b in zip(lam_t, lam_t[1:]))
    assert trainer.state.lambda_s >= 1e-4


def test_train_step_rejects_nonfinite():
    rng = np.random.default_rng(10)
    trainer = TdTrainer(build_translator(TINY, rng), build_translator(TINY, rng),
                        build_discriminator(TINY, "image", rng),
                        build_discriminator(TINY, "image", rng), TdState())
    trainer.t_s2t.out_conv.weight.data[:] = np.nan
    src = RNG.uniform(0, 1, size=(2, 3, 8, 8)).astype(np.float32)
    with pytest.raises(DivergenceError):
        trainer.train_step(src, src, zero_map(2, 4, 4), zero_map(2, 4, 4), rng)
