"""Small trainable-module system over the autodiff tensors.

Modules hold Tensors and child modules as attributes; ``named_parameters``
walks them in sorted attribute order so parameter enumeration (optimizer
state, checkpoints) is deterministic.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .errors import ShapeError
from .numerics import Tensor, gather_rows, layer_norm, matmul, pad2d, tensor

__all__ = ["Module", "Linear", "Mlp", "LayerNorm", "Conv2d"]


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in sorted(vars(self)):
            obj = vars(self)[name]
            full = f"{prefix}{name}"
            if isinstance(obj, Tensor):
                if obj.requires_grad:
                    yield full, obj
            elif isinstance(obj, Module):
                yield from obj.named_parameters(f"{full}.")
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    """y = x @ W + b with xavier-uniform or zero init."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            limit = np.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-limit, limit, size=(d_in, d_out))
        self.weight = tensor(w, requires_grad=True)
        self.bias = tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class Mlp(Module):
    """Stack of Linear layers with ReLU between them."""

    def __init__(self, dims: list[int], rng: np.random.Generator,
                 zero_init_last: bool = False):
        if len(dims) < 2:
            raise ShapeError("Mlp needs at least input and output dims")
        self.layers = [
            Linear(dims[i], dims[i + 1], rng,
                   zero_init=(zero_init_last and i == len(dims) - 2))
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = tensor(np.ones(dim), requires_grad=True)
        self.beta = tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    """Same-padded KxK convolution on [H, W, C] via gather + matmul."""

    _idx_cache: dict[tuple[int, int, int], np.ndarray] = {}

    def __init__(self, c_in: int, c_out: int, ksize: int, rng: np.random.Generator):
        if ksize % 2 != 1:
            raise ShapeError("Conv2d requires an odd kernel size")
        self.ksize = ksize
        self.c_in = c_in
        fan = ksize * ksize * c_in
        limit = np.sqrt(6.0 / (fan + c_out))
        self.weight = tensor(rng.uniform(-limit, limit, size=(fan, c_out)),
                             requires_grad=True)
        self.bias = tensor(np.zeros(c_out), requires_grad=True)

    @classmethod
    def _taps(cls, H: int, W: int, ksize: int) -> np.ndarray:
        """Flat padded-grid indices of each output pixel's KxK neighborhood."""
        key = (H, W, ksize)
        if key not in cls._idx_cache:
            pad = ksize // 2
            wp = W + 2 * pad
            rows = (np.arange(H)[:, None] + np.arange(ksize)[None, :])  # [H, k]
            cols = (np.arange(W)[:, None] + np.arange(ksize)[None, :])  # [W, k]
            flat = (rows[:, None, :, None] * wp + cols[None, :, None, :])
            cls._idx_cache[key] = flat.reshape(H * W, ksize * ksize)
        return cls._idx_cache[key]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[2] != self.c_in:
            raise ShapeError(f"Conv2d expects [H, W, {self.c_in}], got {x.shape}")
        H, W, _ = x.shape
        pad = self.ksize // 2
        padded = pad2d(x, pad)
        flat = padded.reshape((H + 2 * pad) * (W + 2 * pad), self.c_in)
        taps = self._taps(H, W, self.ksize)
        patches = gather_rows(flat, taps.reshape(-1))
        patches = patches.reshape(H * W, self.ksize * self.ksize * self.c_in)
        out = matmul(patches, self.weight) + self.bias
        return out.reshape(H, W, self.weight.shape[1])
