"""Bidirectional image translation with a transferability-weighted bottleneck.

Training objective for the translator pair (s->t and t->s):

    L = L_adv(s->t) + L_adv(t->s) + alpha * L_cycle
        + lambda_s * L_b_s + lambda_t * L_b_t

where L_b is the mean transferability-weighted KL of the encoder's latent
Gaussian against N(0, I), minus the constraint threshold, and the lambdas
are Lagrange multipliers ratcheted by lambda <- max(lambda, gamma * L_b).

The adversarial losses use the literal "1 - log D(fake)" form; a flag swaps
in the conventional "log(1 - D(fake))" form. Discriminator outputs are
clamped to [1e-6, 1 - 1e-6] so all logarithms stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DivergenceError
from .networks import BottleneckOut, Discriminator, Translator
from .optim import Adam, linear_warmhold_lr
from .transferability import TransferabilityMap, resize_to, zero_map

CLAMP = 1e-6


@dataclass
class TdState:
    """Hyperparameters and Lagrange-multiplier state of the translation phase."""

    alpha: float = 10.0
    t_threshold: float = 200.0
    gamma: float = 1e-6
    lambda_init: float = 1e-4
    lambda_s: float = field(default=None)
    lambda_t: float = field(default=None)
    conventional_adv: bool = False

    def __post_init__(self):
        if self.alpha <= 0 or self.t_threshold <= 0 or self.gamma <= 0:
            raise ValueError("alpha, t_threshold and gamma must be positive")
        if self.lambda_s is None:
            self.lambda_s = self.lambda_init
        if self.lambda_t is None:
            self.lambda_t = self.lambda_init


@dataclass
class LossBundle:
    """Named scalar losses of one translation step plus multiplier state."""

    adv_s2t: float
    adv_t2s: float
    cycle: float
    bottleneck_s: float
    bottleneck_t: float
    lambda_s: float
    lambda_t: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in vars(self).items()}

    def check_finite(self):
        for name, value in self.as_dict().items():
            if not np.isfinite(value):
                raise DivergenceError(name, value)


def _log_clamped(d: Tensor) -> Tensor:
    return ad.log(ad.clip(d, CLAMP, 1.0 - CLAMP))


def _adv_terms(d_real: Tensor, d_fake: Tensor, conventional: bool) -> Tensor:
    """E[log D(real)] + E[1 - log D(fake)] (literal) or + E[log(1 - D(fake)))]."""
    real_term = ad.mean(_log_clamped(d_real))
    if conventional:
        fake_term = ad.mean(_log_clamped(1.0 - d_fake))
    else:
        fake_term = 1.0 - ad.mean(_log_clamped(d_fake))
    return real_term + fake_term


def adv_loss_s2t(batch_s, batch_t, translator_s2t: Translator, disc_1: Discriminator,
                 conventional: bool = False, rng=None) -> Tensor:
    """Adversarial loss driving translated source toward the target domain."""
    batch_s, batch_t = ad.as_tensor(batch_s), ad.as_tensor(batch_t)
    if batch_s.shape[1:] != batch_t.shape[1:]:
        raise ValueError(f"domain shape mismatch: {batch_s.shape} vs {batch_t.shape}")
    fake_t, _ = translator_s2t(batch_s, rng=rng)
    return _adv_terms(disc_1(batch_t), disc_1(fake_t), conventional)


def adv_loss_t2s(batch_s, batch_t, translator_t2s: Translator, disc_2: Discriminator,
                 conventional: bool = False, rng=None) -> Tensor:
    """Mirror loss driving translated target toward the source domain."""
    batch_s, batch_t = ad.as_tensor(batch_s), ad.as_tensor(batch_t)
    if batch_s.shape[1:] != batch_t.shape[1:]:
        raise ValueError(f"domain shape mismatch: {batch_s.shape} vs {batch_t.shape}")
    fake_s, _ = translator_t2s(batch_t, rng=rng)
    return _adv_terms(disc_2(batch_s), disc_2(fake_s), conventional)


def cycle_loss(batch_s, batch_t, translator_s2t: Translator, translator_t2s: Translator,
               rng=None) -> Tensor:
    """Mean L1 reconstruction error around both translation cycles."""
    batch_s, batch_t = ad.as_tensor(batch_s), ad.as_tensor(batch_t)
    fake_t, _ = translator_s2t(batch_s, rng=rng)
    rec_s, _ = translator_t2s(fake_t, rng=rng)
    fake_s, _ = translator_t2s(batch_t, rng=rng)
    rec_t, _ = translator_s2t(fake_s, rng=rng)
    return ad.mean(ad.abs_(rec_t - batch_t)) + ad.mean(ad.abs_(rec_s - batch_s))


def gaussian_kl(mu, log_var) -> Tensor:
    """Per-location KL(N(mu, diag sigma^2) || N(0, I)), summed over channels.

    Input [B, C, h, w], output [B, 1, h, w]; nonnegative, zero only for the
    standard normal.
    """
    mu, log_var = ad.as_tensor(mu), ad.as_tensor(log_var)
    var = ad.exp(log_var)
    per_channel = (mu * mu + var - 1.0 - log_var) * 0.5
    return ad.sum_(per_channel, axis=1, keepdims=True)


def bottleneck_loss(mu, log_var, pmap: TransferabilityMap, t_threshold: float) -> Tensor:
    """Transferability constraint loss: mean(P * KL) - T. May be negative."""
    kl = gaussian_kl(mu, log_var)
    _, _, h, w = kl.shape
    p = resize_to(pmap, h, w).values.astype(kl.dtype)
    return ad.mean(kl * Tensor(p)) - float(t_threshold)


def lagrange_update(lam: float, gamma: float, l_b: float) -> float:
    """Ratchet rule lambda <- max(lambda, gamma * L_b); never decreases."""
    return max(float(lam), float(gamma) * float(l_b))


def td_total_loss(batch_s, batch_t, translator_s2t: Translator, translator_t2s: Translator,
                  disc_1: Discriminator, disc_2: Discriminator, state: TdState,
                  pmap_s: TransferabilityMap, pmap_t: TransferabilityMap,
                  rng=None) -> tuple[Tensor, LossBundle]:
    """Full translation objective; returns the scalar and its named terms."""
    batch_s, batch_t = ad.as_tensor(batch_s), ad.as_tensor(batch_t)
    conv = state.conventional_adv
    fake_t, head_s = translator_s2t(batch_s, rng=rng)
    fake_s, head_t = translator_t2s(batch_t, rng=rng)
    rec_s, _ = translator_t2s(fake_t, rng=rng)
    rec_t, _ = translator_s2t(fake_s, rng=rng)

    adv_s = _adv_terms(disc_1(batch_t), disc_1(fake_t), conv)
    adv_t = _adv_terms(disc_2(batch_s), disc_2(fake_s), conv)
    cyc = ad.mean(ad.abs_(rec_t - batch_t)) + ad.mean(ad.abs_(rec_s - batch_s))
    lb_s = bottleneck_loss(head_s.mu, head_s.log_var, pmap_s, state.t_threshold)
    lb_t = bottleneck_loss(head_t.mu, head_t.log_var, pmap_t, state.t_threshold)

    total = (adv_s + adv_t + state.alpha * cyc
             + state.lambda_s * lb_s + state.lambda_t * lb_t)
    bundle = LossBundle(
        adv_s2t=adv_s.item(), adv_t2s=adv_t.item(), cycle=cyc.item(),
        bottleneck_s=lb_s.item(), bottleneck_t=lb_t.item(),
        lambda_s=state.lambda_s, lambda_t=state.lambda_t, total=total.item(),
    )
    return total, bundle


class TdTrainer:
    """Owns the translator pair, its discriminators and their optimizers."""

    def __init__(self, translator_s2t: Translator, translator_t2s: Translator,
                 disc_1: Discriminator, disc_2: Discriminator, state: TdState,
                 lr: float = 2.5e-4, betas=(0.5, 0.999)):
        self.t_s2t = translator_s2t
        self.t_t2s = translator_t2s
        self.d1 = disc_1
        self.d2 = disc_2
        self.state = state
        self.base_lr = lr
        gen_params = {}
        gen_params.update({f"s2t.{k}": v for k, v in translator_s2t.named_parameters().items()})
        gen_params.update({f"t2s.{k}": v for k, v in translator_t2s.named_parameters().items()})
        disc_params = {}
        disc_params.update({f"d1.{k}": v for k, v in disc_1.named_parameters().items()})
        disc_params.update({f"d2.{k}": v for k, v in disc_2.named_parameters().items()})
        self.opt_g = Adam(gen_params, lr, betas=betas)
        self.opt_d = Adam(disc_params, lr, betas=betas)
        self.lambda_history: list[tuple[float, float]] = [(state.lambda_s, state.lambda_t)]

    def set_epoch_lr(self, epoch: int, total_epochs: int):
        lr = linear_warmhold_lr(self.base_lr, epoch, total_epochs)
        self.opt_g.lr = lr
        self.opt_d.lr = lr

    def train_step(self, batch_s: np.ndarray, batch_t: np.ndarray,
                   pmap_s: TransferabilityMap, pmap_t: TransferabilityMap,
                   rng: np.random.Generator) -> LossBundle:
        """One generator step followed by one discriminator step."""
        # generator step
        self.opt_g.zero_grad()
        self.opt_d.zero_grad()
        total, bundle = td_total_loss(batch_s, batch_t, self.t_s2t, self.t_t2s,
                                      self.d1, self.d2, self.state, pmap_s, pmap_t,
                                      rng=rng)
        bundle.check_finite()
        total.backward()
        self.opt_g.step()

        # discriminator step on detached translations
        self.opt_d.zero_grad()
        with ad.no_grad():
            fake_t, _ = self.t_s2t(batch_s, rng=rng)
            fake_s, _ = self.t_t2s(batch_t, rng=rng)
        conv = self.state.conventional_adv
        d_obj = (_adv_terms(self.d1(batch_t), self.d1(fake_t.detach()), conv)
                 + _adv_terms(self.d2(batch_s), self.d2(fake_s.detach()), conv))
        if not np.isfinite(d_obj.item()):
            raise DivergenceError("disc_objective", d_obj.item())
        (-d_obj).backward()
        self.opt_d.step()
        return bundle

    def train_epoch(self, source_images: np.ndarray, target_images: np.ndarray,
                    p_provider, batch_size: int, rng: np.random.Generator
                    ) -> list[LossBundle]:
        """One pass over min(|source|, |target|) images in shuffled pairs.

        p_provider(images, domain) -> TransferabilityMap for the batch; the
        Lagrange multipliers ratchet once per epoch on the epoch means.
        """
        m = min(len(source_images), len(target_images))
        perm_s = rng.permutation(len(source_images))[:m]
        perm_t = rng.permutation(len(target_images))[:m]
        bundles = []
        for start in range(0, m, batch_size):
            bs = source_images[perm_s[start:start + batch_size]]
            bt = target_images[perm_t[start:start + batch_size]]
            pmap_s = p_provider(bs, "source")
            pmap_t = p_provider(bt, "target")
            bundles.append(self.train_step(bs, bt, pmap_s, pmap_t, rng))
        mean_lb_s = float(np.mean([b.bottleneck_s for b in bundles]))
        mean_lb_t = float(np.mean([b.bottleneck_t for b in bundles]))
        self.state.lambda_s = lagrange_update(self.state.lambda_s, self.state.gamma, mean_lb_s)
        self.state.lambda_t = lagrange_update(self.state.lambda_t, self.state.gamma, mean_lb_t)
        self.lambda_history.append((self.state.lambda_s, self.state.lambda_t))
        return bundles


def zero_p_provider(images: np.ndarray, domain: str) -> TransferabilityMap:
    """Constant-zero transferability, used before any feature discriminator
    has been trained."""
    n = len(images)
    return zero_map(n, 1, 1)
