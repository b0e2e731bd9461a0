"""Per-location transferability scores derived from the feature discriminator.

A sigmoid discriminator output near 0 or 1 means the location is confidently
domain-specific (still transferable knowledge to move), while 0.5 means the
discriminator is fooled, i.e. the location is already aligned. The score is
one minus the base-2 Bernoulli entropy of the discriminator output, so it
lives in [0, 1] with 0 at maximal uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS = 1e-6


@dataclass
class TransferabilityMap:
    """Spatial score map in [0, 1], shape [B, 1, h, w].

    Carries no gradient: consumers treat it as a constant signal, so the
    discriminator that produced it never receives gradients through it.
    ``source`` records which discriminator state produced the map.
    """

    values: np.ndarray
    source: str = "unspecified"

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim == 2:
            self.values = self.values[None, None]
        elif self.values.ndim == 3:
            self.values = self.values[:, None]
        if self.values.ndim != 4 or self.values.shape[1] != 1:
            raise ValueError(f"expected [B,1,h,w] map, got {self.values.shape}")
        if np.min(self.values) < -1e-7 or np.max(self.values) > 1.0 + 1e-7:
            raise ValueError("transferability values outside [0,1]")

    @property
    def shape(self):
        return self.values.shape


def binary_entropy(p: np.ndarray) -> np.ndarray:
    """Base-2 entropy of a Bernoulli probability map, clamped away from {0,1}."""
    p = np.clip(np.asarray(p), EPS, 1.0 - EPS)
    return -(p * np.log2(p) + (1.0 - p) * np.log2(1.0 - p))


def transferability(d_out: np.ndarray, source: str = "unspecified") -> TransferabilityMap:
    """Score map P = 1 - H2(d) from a discriminator's sigmoid output."""
    p = 1.0 - binary_entropy(d_out)
    return TransferabilityMap(np.clip(p, 0.0, 1.0), source=source)


def residual_weight(pmap: TransferabilityMap) -> np.ndarray:
    """Multiplicative feedback weight 1 + P, in [1, 2].

    The +1 keeps the modulation at identity when the score is zero, so a
    miscalibrated discriminator can amplify but never suppress a feature
    below its unmodulated value.
    """
    return 1.0 + pmap.values


def resize_to(pmap: TransferabilityMap, target_h: int, target_w: int) -> TransferabilityMap:
    """Bilinear resampling of the score map to a new spatial size."""
    v = pmap.values
    b, _, h, w = v.shape
    if (h, w) == (target_h, target_w):
        return TransferabilityMap(v.copy(), source=pmap.source)
    out = np.empty((b, 1, target_h, target_w), dtype=v.dtype)
    # half-pixel-centre sampling with edge clamping
    ys = (np.arange(target_h) + 0.5) * (h / target_h) - 0.5
    xs = (np.arange(target_w) + 0.5) * (w / target_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    for i in range(b):
        plane = v[i, 0]
        top = plane[np.ix_(y0, x0)] * (1 - wx) + plane[np.ix_(y0, x1)] * wx
        bot = plane[np.ix_(y1, x0)] * (1 - wx) + plane[np.ix_(y1, x1)] * wx
        out[i, 0] = top * (1 - wy) + bot * wy
    return TransferabilityMap(np.clip(out, 0.0, 1.0), source=pmap.source)


def zero_map(batch: int, h: int, w: int, dtype=np.float32) -> TransferabilityMap:
    """All-zero score map used before any feature discriminator exists."""
    return TransferabilityMap(np.zeros((batch, 1, h, w), dtype=dtype), source="zero-init")
