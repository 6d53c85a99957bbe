"""Layer builders over the autodiff primitives.

Layers register their parameters in a ParamStore under hierarchical names and
are callable on Tensors. Initialization is drawn from a caller-supplied
numpy Generator so whole models are reproducible from one seed.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor


class Conv3d:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, k: int,
                 rng: np.random.Generator, stride: int = 1, pad: int = 0):
        std = 1.0 / np.sqrt(cin * k ** 3)
        self.w = store.add(f"{name}.w", rng.normal(0.0, std, (cout, cin, k, k, k)))
        self.b = store.add(f"{name}.b", np.zeros(cout))
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv3d(x, self.w, self.stride, self.pad)
        return ad.add(y, ad.reshape(self.b, (1, -1, 1, 1, 1)))


class ConvTranspose3d:
    """Upsampling conv; weight keeps the (cin, cout, k, k, k) adjoint layout."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, k: int,
                 rng: np.random.Generator, stride: int = 1, pad: int = 0):
        std = 1.0 / np.sqrt(cin * k ** 3)
        self.w = store.add(f"{name}.w", rng.normal(0.0, std, (cin, cout, k, k, k)))
        self.b = store.add(f"{name}.b", np.zeros(cout))
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv_transpose3d(x, self.w, self.stride, self.pad)
        return ad.add(y, ad.reshape(self.b, (1, -1, 1, 1, 1)))


class Conv2d:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, k: int,
                 rng: np.random.Generator, stride: int = 1, pad: int = 0):
        std = 1.0 / np.sqrt(cin * k ** 2)
        self.w = store.add(f"{name}.w", rng.normal(0.0, std, (cout, cin, k, k)))
        self.b = store.add(f"{name}.b", np.zeros(cout))
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.w, self.stride, self.pad)
        return ad.add(y, ad.reshape(self.b, (1, -1, 1, 1)))


class ConvTranspose2d:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, k: int,
                 rng: np.random.Generator, stride: int = 1, pad: int = 0):
        std = 1.0 / np.sqrt(cin * k ** 2)
        self.w = store.add(f"{name}.w", rng.normal(0.0, std, (cin, cout, k, k)))
        self.b = store.add(f"{name}.b", np.zeros(cout))
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv_transpose2d(x, self.w, self.stride, self.pad)
        return ad.add(y, ad.reshape(self.b, (1, -1, 1, 1)))


class Linear:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int,
                 rng: np.random.Generator):
        self.w = store.add(f"{name}.w", rng.normal(0.0, 1.0 / np.sqrt(cin), (cin, cout)))
        self.b = store.add(f"{name}.b", np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class GroupNorm:
    def __init__(self, store: ParamStore, name: str, channels: int, groups: int = 8):
        self.gamma = store.add(f"{name}.gamma", np.ones(channels))
        self.beta = store.add(f"{name}.beta", np.zeros(channels))
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return ad.group_norm(x, self.gamma, self.beta, self.groups)


class Embedding:
    def __init__(self, store: ParamStore, name: str, count: int, dim: int,
                 rng: np.random.Generator, std: float = 1.0):
        self.table = store.add(f"{name}.table", rng.normal(0.0, std, (count, dim)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ad.embedding_lookup(self.table, ids)


def sinusoidal_time_embedding(t, dim: int) -> np.ndarray:
    """Transformer-style sin/cos features of integer timesteps, shape (n, dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = np.atleast_1d(np.asarray(t, dtype=np.float64))[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)
