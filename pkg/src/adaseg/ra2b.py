"""Residual attention-on-attention block.

The block self-attends over pixel positions, then gates the attended map
against the query features before adding it back residually:

    raw        = C1 @ C2^T                       (pairwise pixel affinities)
    A          = row-stochastic attention matrix applied to C3
    F_p        = A @ C3
    f          = W_f1 C1 + W_f2 F_p + B_f        (information flow)
    g          = sigmoid(W_g1 C1 + W_g2 F_p + B_g)   (relevance gate)
    F_o        = delta * (f * g) + F_i

delta starts at 0 so a fresh block is exactly the identity.

Two gate parameterizations exist: "literal" keeps the full NxN spatial
transforms (quadratic in pixel count, fine for small maps and used by the
oracle tests) and "channel" swaps them for CxC channel maps, which is
size-agnostic and what the networks use by default.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv2d, Module


def attention_map(c1, c2) -> Tensor:
    """Attention matrix with each column softmax-normalized.

    c1, c2: [N, C] or [B, N, C]. Entry (i, j) scores the affinity of pixel i
    of c1 with pixel j of c2; normalization runs over i with j fixed.
    """
    c1, c2 = ad.as_tensor(c1), ad.as_tensor(c2)
    if c1.shape != c2.shape:
        raise ValueError(f"shape mismatch: {c1.shape} vs {c2.shape}")
    raw = c1 @ ad.swap_last2(c2)
    return ad.softmax(raw, axis=-2)


def attention_apply(m, c3) -> Tensor:
    """Aggregate value rows with the transposed attention matrix: M^T @ C3.

    With a column-stochastic M the applied matrix is row-stochastic, so each
    output pixel is a convex combination of value vectors.
    """
    m, c3 = ad.as_tensor(m), ad.as_tensor(c3)
    if m.shape[-1] != c3.shape[-2]:
        raise ValueError(f"shape mismatch: {m.shape} vs {c3.shape}")
    return ad.swap_last2(m) @ c3


def applied_attention(c1, c2, reading: str = "column") -> Tensor:
    """Row-stochastic matrix that actually multiplies the value features.

    reading="column": normalize affinities over the first index, then
    transpose (the default). reading="row": normalize over the second index
    and apply directly. Both produce a row-stochastic operator; they differ
    only in which of c1/c2 acts as the query.
    """
    c1, c2 = ad.as_tensor(c1), ad.as_tensor(c2)
    raw = c1 @ ad.swap_last2(c2)
    if reading == "column":
        return ad.softmax(ad.swap_last2(raw), axis=-1)
    if reading == "row":
        return ad.softmax(raw, axis=-1)
    raise ValueError(f"unknown attention reading {reading!r}")


def aoa_gate(c1, f_p, w_f1, w_f2, b_f, w_g1, w_g2, b_g, mode: str = "literal"):
    """Information flow f and relevance gate g from query and attended maps.

    literal mode: w_* are [N, N] spatial transforms applied from the left,
    b_* are [N, C]. channel mode: w_* are [C, C] applied from the right,
    b_* broadcast over pixels.
    """
    c1, f_p = ad.as_tensor(c1), ad.as_tensor(f_p)
    if mode == "literal":
        f = ad.as_tensor(w_f1) @ c1 + ad.as_tensor(w_f2) @ f_p + ad.as_tensor(b_f)
        g_pre = ad.as_tensor(w_g1) @ c1 + ad.as_tensor(w_g2) @ f_p + ad.as_tensor(b_g)
    elif mode == "channel":
        f = c1 @ ad.as_tensor(w_f1) + f_p @ ad.as_tensor(w_f2) + ad.as_tensor(b_f)
        g_pre = c1 @ ad.as_tensor(w_g1) + f_p @ ad.as_tensor(w_g2) + ad.as_tensor(b_g)
    else:
        raise ValueError(f"unknown gate mode {mode!r}")
    return f, ad.sigmoid(g_pre)


class RA2B(Module):
    """One residual attention-on-attention block over NCHW features.

    gate_mode="channel" (default) keeps the block independent of spatial
    size; "literal" allocates the full NxN transforms and requires height
    and width at construction.
    """

    MAX_LITERAL_PIXELS = 4096

    def __init__(self, channels: int, rng: np.random.Generator | None = None,
                 gate_mode: str = "channel", height: int | None = None,
                 width: int | None = None, attention_reading: str = "column",
                 dtype=np.float32, init_std: float = 0.02):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.gate_mode = gate_mode
        self.attention_reading = attention_reading
        self.conv_q = Conv2d(channels, channels, 1, rng=rng, init_std=init_std, dtype=dtype)
        self.conv_k = Conv2d(channels, channels, 1, rng=rng, init_std=init_std, dtype=dtype)
        self.conv_v = Conv2d(channels, channels, 1, rng=rng, init_std=init_std, dtype=dtype)
        if gate_mode == "literal":
            if height is None or width is None:
                raise ValueError("literal gate mode needs height and width")
            n = height * width
            if n > self.MAX_LITERAL_PIXELS:
                raise ValueError(f"literal gates infeasible for {n} pixels")
            shape_w, shape_b = (n, n), (n, channels)
        elif gate_mode == "channel":
            shape_w, shape_b = (channels, channels), (1, channels)
        else:
            raise ValueError(f"unknown gate mode {gate_mode!r}")
        def winit():
            return Tensor(rng.normal(0.0, init_std, size=shape_w).astype(dtype),
                          requires_grad=True)
        self.w_f1, self.w_f2, self.w_g1, self.w_g2 = winit(), winit(), winit(), winit()
        self.b_f = Tensor(np.zeros(shape_b, dtype=dtype), requires_grad=True)
        self.b_g = Tensor(np.zeros(shape_b, dtype=dtype), requires_grad=True)
        self.delta = Tensor(np.zeros((), dtype=dtype), requires_grad=True)

    def __call__(self, f_i: Tensor, gain: np.ndarray | None = None) -> Tensor:
        """Forward pass; optional gain multiplies the gated update before the
        residual add (used for transferability feedback)."""
        f_i = ad.as_tensor(f_i)
        b, c, h, w = f_i.shape
        c1 = ad.transpose(self.conv_q(f_i).reshape(b, c, h * w), (0, 2, 1))
        c2 = ad.transpose(self.conv_k(f_i).reshape(b, c, h * w), (0, 2, 1))
        c3 = ad.transpose(self.conv_v(f_i).reshape(b, c, h * w), (0, 2, 1))
        att = applied_attention(c1, c2, reading=self.attention_reading)
        f_p = att @ c3
        f, g = aoa_gate(c1, f_p, self.w_f1, self.w_f2, self.b_f,
                        self.w_g1, self.w_g2, self.b_g, mode=self.gate_mode)
        update = self.delta * (f * g)
        update = ad.transpose(update, (0, 2, 1)).reshape(b, c, h, w)
        if gain is not None:
            update = update * Tensor(np.asarray(gain, dtype=f_i.dtype))
        return update + f_i


def ra2b_forward(f_i, block: RA2B, gain: np.ndarray | None = None) -> Tensor:
    """Functional alias for a block forward pass."""
    return block(ad.as_tensor(f_i), gain=gain)
