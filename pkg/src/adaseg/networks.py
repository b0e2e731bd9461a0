"""Network constructors: translators, discriminators, segmenter, augmentor.

All builds are desk-scale encoder-decoders parameterized by NetworkSpec.
Every forward pass is a pure function of (parameters, inputs) once a network
is in eval mode; stochastic paths (latent sampling, noise injection) take
their randomness as explicit arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv2d, ConvBlock, Module, ResBlock
from .ra2b import RA2B
from .transferability import TransferabilityMap, residual_weight, resize_to

GAN_INIT_STD = 0.02


@dataclass
class NetworkSpec:
    """Sizing knobs shared by all five networks."""

    base_channels: int = 16
    depth: int = 3
    num_classes: int = 2
    latent_channels: int = 8
    ra2b_count: int = 16
    noise_channels: int = 4

    def __post_init__(self):
        for name in ("base_channels", "depth", "num_classes", "latent_channels",
                     "ra2b_count", "noise_channels"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"NetworkSpec.{name} must be a positive integer, got {v!r}")
        if self.depth < 2:
            raise ValueError("NetworkSpec.depth must be >= 2 (distinct low/high taps)")
        if self.num_classes < 2:
            raise ValueError("NetworkSpec.num_classes must be >= 2")

    @property
    def high_channels(self) -> int:
        return self.base_channels * 2 ** (self.depth - 1)

    @property
    def low_channels(self) -> int:
        return self.base_channels * 2 ** (self.depth - 2)


@dataclass
class BottleneckOut:
    """Diagonal-Gaussian head of the translator encoder."""

    mu: Tensor
    log_var: Tensor


class Segmenter(Module):
    """Encoder-decoder pixel classifier exposing low/high feature taps."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        c = spec.base_channels
        self.spec = spec
        enc = [ConvBlock(3, c, rng=rng, dtype=dtype)]
        ch = c
        for _ in range(spec.depth - 1):
            enc.append(ConvBlock(ch, ch * 2, stride=2, rng=rng, dtype=dtype))
            ch *= 2
        self.encoder = enc
        # low tap sits one stride-2 stage above the high tap
        self.low_index = spec.depth - 2
        self.res = ResBlock(ch, rng=rng, dtype=dtype)
        dec = []
        for _ in range(spec.depth - 1):
            dec.append(ConvBlock(ch, ch // 2, rng=rng, dtype=dtype))
            ch //= 2
        self.decoder = dec
        # near-uniform initial predictions: pseudo-label confidence then
        # grows only as the network actually learns
        self.head = Conv2d(ch, spec.num_classes, 1, rng=rng, init_std=1e-3, dtype=dtype)

    def forward_with_taps(self, x) -> tuple[Tensor, dict[str, Tensor]]:
        y = ad.as_tensor(x)
        taps = {}
        for i, block in enumerate(self.encoder):
            y = block(y)
            if i == self.low_index:
                taps["low"] = y
        y = self.res(y)
        taps["high"] = y
        for block in self.decoder:
            y = block(ad.upsample2x(y))
        return self.head(y), taps

    def __call__(self, x) -> Tensor:
        logits, _ = self.forward_with_taps(x)
        return logits


class Translator(Module):
    """Image-to-image translator with a variational bottleneck head."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        c = spec.base_channels
        self.spec = spec
        enc = [ConvBlock(3, c, rng=rng, init_std=GAN_INIT_STD, dtype=dtype)]
        ch = c
        for _ in range(spec.depth - 1):
            enc.append(ConvBlock(ch, ch * 2, stride=2, rng=rng, init_std=GAN_INIT_STD, dtype=dtype))
            ch *= 2
        self.encoder = enc
        self.enc_res = ResBlock(ch, rng=rng, init_std=GAN_INIT_STD, dtype=dtype)
        self.mu_head = Conv2d(ch, spec.latent_channels, 1, rng=rng, init_std=GAN_INIT_STD, dtype=dtype)
        self.logvar_head = Conv2d(ch, spec.latent_channels, 1, rng=rng,
                                  init_std=1e-3, dtype=dtype)
        self.expand = ConvBlock(spec.latent_channels, ch, kernel=1, padding=0, rng=rng,
                                init_std=GAN_INIT_STD, dtype=dtype)
        self.dec_res = ResBlock(ch, rng=rng, init_std=GAN_INIT_STD, dtype=dtype)
        dec = []
        for _ in range(spec.depth - 1):
            dec.append(ConvBlock(ch, ch // 2, rng=rng, init_std=GAN_INIT_STD, dtype=dtype))
            ch //= 2
        self.decoder = dec
        self.out_conv = Conv2d(ch, 3, 3, padding=1, rng=rng, init_std=GAN_INIT_STD, dtype=dtype)

    def encode(self, x) -> BottleneckOut:
        y = ad.as_tensor(x)
        for block in self.encoder:
            y = block(y)
        y = self.enc_res(y)
        return BottleneckOut(mu=self.mu_head(y), log_var=self.logvar_head(y))

    def decode(self, z: Tensor) -> Tensor:
        y = self.dec_res(self.expand(z))
        for block in self.decoder:
            y = block(ad.upsample2x(y))
        return ad.sigmoid(self.out_conv(y))

    def __call__(self, x, rng: np.random.Generator | None = None
                 ) -> tuple[Tensor, BottleneckOut]:
        """Translate an image batch; samples the latent when training with rng."""
        head = self.encode(x)
        if self.training and rng is not None:
            eps = rng.standard_normal(head.mu.shape).astype(head.mu.dtype)
            z = head.mu + ad.exp(head.log_var * 0.5) * Tensor(eps)
        else:
            z = head.mu
        return self.decode(z), head


FEATURE_DISC_CHANNELS = (16, 32, 64, 64, 1)


class Discriminator(Module):
    """Fully convolutional domain critic with sigmoid output in (0, 1).

    The feature kind uses five stride-1 convolutions with the fixed channel
    ladder (16, 32, 64, 64, 1); the image kind downsamples in its first
    three layers to judge patches.
    """

    def __init__(self, in_channels: int, kind: str, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        if kind not in ("image", "feature"):
            raise ValueError(f"unknown discriminator kind {kind!r}")
        self.kind = kind
        chans = FEATURE_DISC_CHANNELS
        strides = (2, 2, 2, 1, 1) if kind == "image" else (1, 1, 1, 1, 1)
        layers = []
        prev = in_channels
        for i, (ch, st) in enumerate(zip(chans, strides)):
            last = i == len(chans) - 1
            layers.append(ConvBlock(prev, ch, kernel=3, stride=st, padding=1, rng=rng,
                                    norm=False, act="sigmoid" if last else "lrelu",
                                    init_std=GAN_INIT_STD, dtype=dtype))
            prev = ch
        self.layers = layers

    def __call__(self, x) -> Tensor:
        y = ad.as_tensor(x)
        for layer in self.layers:
            y = layer(y)
        return y


class Augmentor(Module):
    """Feature synthesizer: fuses the segmenter's taps with injected noise
    and refines them through a stack of attention blocks.

    Output matches the high tap's shape, the feature the discriminator
    judges. An optional transferability map scales each block's gated update
    so low-score locations stay close to the plain convolutional path.
    """

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        ch = spec.high_channels
        cl = spec.low_channels
        self.noise_high = Conv2d(spec.noise_channels, ch, 1, rng=rng,
                                 init_std=GAN_INIT_STD, dtype=dtype)
        self.noise_low = Conv2d(spec.noise_channels, cl, 1, rng=rng,
                                init_std=GAN_INIT_STD, dtype=dtype)
        self.low_reduce = ConvBlock(cl, ch, stride=2, rng=rng, init_std=GAN_INIT_STD, dtype=dtype)
        self.merge = ConvBlock(2 * ch, ch, kernel=1, padding=0, rng=rng,
                               init_std=GAN_INIT_STD, dtype=dtype)
        self.blocks = [RA2B(ch, rng=rng, gate_mode="channel", dtype=dtype)
                       for _ in range(spec.ra2b_count)]
        self.out_conv = Conv2d(ch, ch, 1, rng=rng, init_std=GAN_INIT_STD, dtype=dtype)

    def __call__(self, tap_low, tap_high, noise,
                 pmap: TransferabilityMap | None = None) -> Tensor:
        tap_low, tap_high = ad.as_tensor(tap_low), ad.as_tensor(tap_high)
        noise = ad.as_tensor(noise)
        b, _, hh, wh = tap_high.shape
        _, _, hl, wl = tap_low.shape
        if noise.shape[2:] != (hh, wh):
            raise ValueError(f"noise spatial size {noise.shape[2:]} != high tap {(hh, wh)}")
        n_low = noise
        while n_low.shape[2] < hl:
            n_low = ad.upsample2x(n_low)
        low = tap_low + self.noise_low(n_low)
        high = tap_high + self.noise_high(noise)
        merged = self.merge(ad.concat([self.low_reduce(low), high], axis=1))
        gain = None
        if pmap is not None:
            gain = residual_weight(resize_to(pmap, hh, wh))
        y = merged
        for block in self.blocks:
            y = block(y, gain=gain)
        return self.out_conv(y)


def build_segmenter(spec: NetworkSpec, rng: np.random.Generator | None = None,
                    dtype=np.float32) -> Segmenter:
    return Segmenter(spec, rng or np.random.default_rng(0), dtype=dtype)


def build_translator(spec: NetworkSpec, rng: np.random.Generator | None = None,
                     dtype=np.float32) -> Translator:
    return Translator(spec, rng or np.random.default_rng(0), dtype=dtype)


def build_discriminator(spec: NetworkSpec, kind: str,
                        rng: np.random.Generator | None = None,
                        dtype=np.float32) -> Discriminator:
    in_ch = 3 if kind == "image" else spec.high_channels
    return Discriminator(in_ch, kind, rng or np.random.default_rng(0), dtype=dtype)


def build_augmentor(spec: NetworkSpec, rng: np.random.Generator | None = None,
                    dtype=np.float32) -> Augmentor:
    return Augmentor(spec, rng or np.random.default_rng(0), dtype=dtype)
