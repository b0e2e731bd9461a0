"""Feature-space transfer: segmenter self-training plus adversarial
feature augmentation.

One round runs three steps over the translated source set and the unlabeled
target set:

  Step I   retrain the segmenter on translated source labels and on
           confident pseudo labels of the target set;
  Step II  train the augmentor (segmenter frozen) so its synthesized
           features fool the feature discriminator;
  Step III train the segmenter (augmentor frozen) so its features are
           indistinguishable from the augmented, transferability-weighted
           ones, with the discriminator retrained against it.

The transferability scores consumed elsewhere must come from the
discriminator as it stands after Step III, never mid-Step-II.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DivergenceError, ValidationError
from .networks import Augmentor, Discriminator, NetworkSpec, Segmenter
from .optim import Adam, SGD, poly_decay_lr
from .transferability import TransferabilityMap, transferability, zero_map

CLAMP = 1e-6


@dataclass
class PseudoLabelBatch:
    """Argmax labels with a confidence mask; mask=0 pixels never enter a loss."""

    labels: np.ndarray
    mask: np.ndarray

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())


@dataclass
class TfState:
    """Hyperparameters of the feature-transfer phase."""

    beta: float = 0.9
    seg_lr: float = 2.0e-4
    seg_poly_power: float = 0.9
    seg_momentum: float = 0.9
    align_lr_scale: float = 0.05
    aug_lr: float = 1.0e-4
    disc_lr: float = 1.0e-4
    disc_beta1: float = 0.9
    disc_beta2: float = 0.99

    def __post_init__(self):
        if not (0.0 < self.beta < 1.0):
            raise ValueError(f"beta must be in (0,1), got {self.beta}")


def pseudo_labels(probs: np.ndarray, beta: float) -> PseudoLabelBatch:
    """Confident pseudo labels from per-pixel class probabilities [H, W, K].

    Keeps the argmax wherever the winning probability reaches beta.
    """
    probs = np.asarray(probs)
    if probs.ndim != 3:
        raise ValidationError(f"expected [H,W,K] probabilities, got shape {probs.shape}")
    sums = probs.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > 1e-4:
        raise ValidationError("probabilities do not sum to 1 within 1e-4")
    labels = probs.argmax(axis=-1).astype(np.int64)
    mask = (probs.max(axis=-1) >= beta).astype(np.uint8)
    return PseudoLabelBatch(labels=labels, mask=mask)


def masked_cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Pixel cross-entropy averaged over mask=1 pixels only.

    logits [B, K, H, W]; labels [B, H, W] ints below K; mask [B, H, W] in {0,1}.
    Returns 0 when the mask is empty.
    """
    logits = ad.as_tensor(logits)
    b, k, h, w = logits.shape
    labels = np.asarray(labels)
    mask = np.asarray(mask)
    if labels.shape != (b, h, w) or mask.shape != (b, h, w):
        raise ValidationError(f"labels/mask shape mismatch with logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValidationError(f"label values must lie in [0,{k - 1}]")
    count = float(mask.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    logp = ad.log_softmax(logits, axis=1)
    onehot = np.zeros((b, k, h, w), dtype=logits.dtype)
    bi, hi, wi = np.meshgrid(np.arange(b), np.arange(h), np.arange(w), indexing="ij")
    onehot[bi, labels, hi, wi] = 1.0
    masked = ad.sum_(logp * Tensor(onehot), axis=1) * Tensor(mask.astype(logits.dtype))
    return -(ad.sum_(masked) / count)


def seg_loss(seg: Segmenter, src_images, src_labels, tgt_images=None,
             tgt_pseudo: PseudoLabelBatch | None = None) -> Tensor:
    """Supervised loss on translated source plus masked loss on pseudo-labeled
    target; the target term is omitted when no target batch is given."""
    src_images = ad.as_tensor(src_images)
    logits_s = seg(src_images)
    full = np.ones(src_labels.shape, dtype=np.uint8)
    loss = masked_cross_entropy(logits_s, src_labels, full)
    if tgt_images is not None:
        if tgt_pseudo is None:
            raise ValidationError("target batch requires pseudo labels")
        logits_t = seg(ad.as_tensor(tgt_images))
        loss = loss + masked_cross_entropy(logits_t, tgt_pseudo.labels, tgt_pseudo.mask)
    return loss


def _log_clamped(d: Tensor) -> Tensor:
    return ad.log(ad.clip(d, CLAMP, 1.0 - CLAMP))


def augmentor_adv_loss(d_f: Discriminator, feats_real: Tensor, feats_aug: Tensor) -> Tensor:
    """E[log D(real features)] + E[log(1 - D(augmented features))].

    The discriminator ascends this, the augmentor descends it. Freezing
    decisions (whose inputs are detached) belong to the caller.
    """
    return ad.mean(_log_clamped(d_f(feats_real))) + ad.mean(_log_clamped(1.0 - d_f(feats_aug)))


def alignment_loss(d_f: Discriminator, feats_seg: Tensor, feats_aug: Tensor) -> Tensor:
    """E[log(1 - D(segmenter features))] + E[log D(augmented features)].

    The discriminator ascends this with the augmented features as the real
    class; the segmenter descends it to push its features toward them.
    """
    return ad.mean(_log_clamped(1.0 - d_f(feats_seg))) + ad.mean(_log_clamped(d_f(feats_aug)))


@dataclass
class RoundMetrics:
    seg_loss: float
    aug_loss: float
    align_loss: float
    pseudo_coverage: float


class TfTrainer:
    """Owns the segmenter, augmentor and feature discriminator."""

    def __init__(self, seg: Segmenter, aug: Augmentor, d_f: Discriminator,
                 spec: NetworkSpec, state: TfState):
        self.seg = seg
        self.aug = aug
        self.d_f = d_f
        self.spec = spec
        self.state = state
        self.opt_seg = SGD(seg.named_parameters(), state.seg_lr, momentum=state.seg_momentum)
        self.opt_aug = Adam(aug.named_parameters(), state.aug_lr)
        self.opt_df = Adam(d_f.named_parameters(), state.disc_lr,
                           betas=(state.disc_beta1, state.disc_beta2))

    # ---- pseudo labels ---------------------------------------------------
    def generate_pseudo_labels(self, images: np.ndarray, batch_size: int = 8
                               ) -> PseudoLabelBatch:
        """Run the segmenter over the target set and threshold its softmax."""
        labels, masks = [], []
        with ad.no_grad():
            for start in range(0, len(images), batch_size):
                logits = self.seg(images[start:start + batch_size])
                probs = ad.softmax(logits, axis=1).data  # [B,K,H,W]
                probs = np.moveaxis(probs, 1, -1)
                for img_probs in probs:
                    pl = pseudo_labels(img_probs / img_probs.sum(-1, keepdims=True),
                                       self.state.beta)
                    labels.append(pl.labels)
                    masks.append(pl.mask)
        return PseudoLabelBatch(labels=np.stack(labels), mask=np.stack(masks))

    # ---- step I ------------------------------------------------------------
    def step_one(self, src_images, src_labels, tgt_images, epochs: int,
                 batch_size: int, rng: np.random.Generator) -> tuple[float, float]:
        """Segmentation training; returns (mean loss, pseudo coverage)."""
        pseudo = self.generate_pseudo_labels(tgt_images)
        coverage = pseudo.coverage
        n_src, n_tgt = len(src_images), len(tgt_images)
        steps_per_epoch = max(1, int(np.ceil(n_src / batch_size)))
        total_steps = max(1, epochs * steps_per_epoch)
        step = 0
        losses = []
        for _ in range(epochs):
            order_s = rng.permutation(n_src)
            order_t = rng.permutation(n_tgt)
            for start in range(0, n_src, batch_size):
                idx_s = order_s[start:start + batch_size]
                idx_t = order_t[np.arange(start, start + len(idx_s)) % n_tgt]
                self.opt_seg.lr = poly_decay_lr(self.state.seg_lr, step, total_steps,
                                                self.state.seg_poly_power)
                self.opt_seg.zero_grad()
                loss = seg_loss(self.seg, src_images[idx_s], src_labels[idx_s],
                                tgt_images[idx_t],
                                PseudoLabelBatch(pseudo.labels[idx_t], pseudo.mask[idx_t]))
                val = loss.item()
                if not np.isfinite(val) or val > 1e6:
                    raise DivergenceError("seg_loss", val)
                loss.backward()
                self.opt_seg.step()
                losses.append(val)
                step += 1
        return float(np.mean(losses)), coverage

    # ---- steps II / III ------------------------------------------------------
    def _mixed_batches(self, src_images, tgt_images, batch_size, epochs, rng):
        """Yield 50/50 source/target image batches for the adversarial steps."""
        n = min(len(src_images), len(tgt_images))
        half = max(1, batch_size // 2)
        for _ in range(epochs):
            order_s = rng.permutation(len(src_images))[:n]
            order_t = rng.permutation(len(tgt_images))[:n]
            for start in range(0, n, half):
                idx_s = order_s[start:start + half]
                idx_t = order_t[start:start + half]
                if len(idx_s) == 0:
                    continue
                yield np.concatenate([src_images[idx_s], tgt_images[idx_t]], axis=0)

    def _draw_noise(self, batch: int, h: int, w: int, rng, dtype) -> np.ndarray:
        return rng.standard_normal((batch, self.spec.noise_channels, h, w)).astype(dtype)

    def step_two(self, src_images, tgt_images, epochs: int, batch_size: int,
                 rng: np.random.Generator, p_provider=None) -> float:
        """Augmentor training with the segmenter frozen."""
        losses = []
        for batch in self._mixed_batches(src_images, tgt_images, batch_size, epochs, rng):
            with ad.no_grad():
                _, taps = self.seg.forward_with_taps(batch)
            tap_low = taps["low"].detach()
            tap_high = taps["high"].detach()
            b, _, hh, wh = tap_high.shape
            noise = self._draw_noise(b, hh, wh, rng, tap_high.dtype)
            pmap = p_provider(batch) if p_provider is not None else None

            # discriminator ascends: all generator-side inputs constant
            with ad.no_grad():
                aug_const = self.aug(tap_low, tap_high, noise, pmap=pmap)
            self.opt_df.zero_grad()
            d_obj = augmentor_adv_loss(self.d_f, tap_high, aug_const)
            (-d_obj).backward()
            self.opt_df.step()

            # augmentor descends with the updated discriminator fixed
            self.opt_aug.zero_grad()
            self.opt_df.zero_grad()
            aug_out = self.aug(tap_low, tap_high, noise, pmap=pmap)
            loss = augmentor_adv_loss(self.d_f, tap_high, aug_out)
            val = loss.item()
            if not np.isfinite(val):
                raise DivergenceError("aug_adv_loss", val)
            loss.backward()
            self.opt_aug.step()
            losses.append(val)
        return float(np.mean(losses)) if losses else 0.0

    def step_three(self, src_images, tgt_images, epochs: int, batch_size: int,
                   rng: np.random.Generator, p_provider=None) -> float:
        """Segmenter alignment training with the augmentor frozen."""
        losses = []
        for batch in self._mixed_batches(src_images, tgt_images, batch_size, epochs, rng):
            with ad.no_grad():
                _, taps_const = self.seg.forward_with_taps(batch)
                b, _, hh, wh = taps_const["high"].shape
                noise = self._draw_noise(b, hh, wh, rng, taps_const["high"].dtype)
                pmap = p_provider(batch) if p_provider is not None else None
                aug_const = self.aug(taps_const["low"], taps_const["high"], noise,
                                     pmap=pmap).detach()

            # discriminator ascends with augmented features as the real class
            self.opt_df.zero_grad()
            d_obj = alignment_loss(self.d_f, taps_const["high"].detach(), aug_const)
            (-d_obj).backward()
            self.opt_df.step()

            # segmenter descends through its live features, gently relative
            # to its supervised step size
            self.opt_seg.lr = self.state.seg_lr * self.state.align_lr_scale
            self.opt_seg.zero_grad()
            self.opt_df.zero_grad()
            _, taps = self.seg.forward_with_taps(batch)
            loss = alignment_loss(self.d_f, taps["high"], aug_const)
            val = loss.item()
            if not np.isfinite(val):
                raise DivergenceError("align_loss", val)
            loss.backward()
            self.opt_seg.step()
            losses.append(val)
        return float(np.mean(losses)) if losses else 0.0

    def train_round(self, src_images, src_labels, tgt_images, epochs: tuple[int, int, int],
                    batch_size: int, rng: np.random.Generator, p_provider=None
                    ) -> RoundMetrics:
        """Run Steps I, II, III once; returns the round's metric record."""
        seg_val, coverage = self.step_one(src_images, src_labels, tgt_images,
                                          epochs[0], batch_size, rng)
        aug_val = self.step_two(src_images, tgt_images, epochs[1], batch_size, rng,
                                p_provider)
        align_val = self.step_three(src_images, tgt_images, epochs[2], batch_size, rng,
                                    p_provider)
        return RoundMetrics(seg_loss=seg_val, aug_loss=aug_val, align_loss=align_val,
                            pseudo_coverage=coverage)

    def make_p_provider(self, seg_snapshot: Segmenter | None = None,
                        source_tag: str = "step3_discriminator"):
        """Transferability provider bound to the current discriminator state
        (call right after Step III so the scores carry that provenance)."""
        return make_p_provider(seg_snapshot or self.seg, self.d_f, source_tag)


def make_p_provider(seg: Segmenter, d_f: Discriminator,
                    source_tag: str = "step3_discriminator"):
    """images -> TransferabilityMap via the given segmenter's high tap and
    feature discriminator; the map is a plain constant (no gradient path)."""

    def provider(images: np.ndarray, domain: str = "any") -> TransferabilityMap:
        with ad.no_grad():
            _, taps = seg.forward_with_taps(images)
            d_out = d_f(taps["high"]).data
        return transferability(d_out, source=source_tag)

    return provider
