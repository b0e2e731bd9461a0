"""Layers and parameter containers built on the autodiff core."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class: recursive named-parameter collection and train/eval mode."""

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                params[key] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        params[f"{key}.{i}"] = item
        return params

    def set_training(self, flag: bool):
        self.training = flag
        for value in vars(self).values():
            if isinstance(value, Module):
                value.set_training(flag)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.set_training(flag)
        return self

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameter arrays: {sorted(missing)[:4]}")
        for name, p in params.items():
            a = np.asarray(arrays[name], dtype=p.data.dtype)
            if a.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {a.shape} vs {p.data.shape}")
            p.data = a.copy()

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.named_parameters().values()))


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None,
                 init_std: float | None = None, dtype=np.float32, bias: bool = True):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if init_std is None:
            fan_in = in_ch * kernel * kernel
            init_std = float(np.sqrt(2.0 / fan_in))
        w = rng.normal(0.0, init_std, size=(out_ch, in_ch, kernel, kernel))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 init_std: float | None = None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if init_std is None:
            init_std = float(np.sqrt(1.0 / in_dim))
        self.weight = Tensor(rng.normal(0.0, init_std, size=(in_dim, out_dim)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class InstanceNorm2d(Module):
    """Per-sample, per-channel normalization with learned affine."""

    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = ad.mean(x, axis=(2, 3), keepdims=True)
        centered = x - mu
        var = ad.mean(centered * centered, axis=(2, 3), keepdims=True)
        inv = ad.power(var + self.eps, -0.5)
        return centered * inv * self.gamma + self.beta


class ConvBlock(Module):
    """conv -> optional instance norm -> activation."""

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=1, rng=None,
                 norm: bool = True, act: str = "relu", init_std=None, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, padding, rng=rng,
                           init_std=init_std, dtype=dtype)
        self.norm = InstanceNorm2d(out_ch, dtype=dtype) if norm else None
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        if self.norm is not None:
            y = self.norm(y)
        if self.act == "relu":
            y = ad.relu(y)
        elif self.act == "lrelu":
            y = ad.leaky_relu(y, 0.2)
        elif self.act == "sigmoid":
            y = ad.sigmoid(y)
        elif self.act == "none":
            pass
        else:
            raise ValueError(f"unknown activation {self.act}")
        return y


class ResBlock(Module):
    def __init__(self, channels: int, rng=None, init_std=None, dtype=np.float32):
        super().__init__()
        self.c1 = ConvBlock(channels, channels, rng=rng, init_std=init_std, dtype=dtype)
        self.c2 = ConvBlock(channels, channels, rng=rng, act="none", init_std=init_std, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(self.c2(self.c1(x)) + x)
