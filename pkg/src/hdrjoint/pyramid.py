"""Gaussian/Laplacian pyramid with exact reconstruction.

Blurring uses the separable 5-tap binomial kernel with mirror (reflect-101)
borders. Each resampling step is a dense constant matrix applied along one
image axis, which keeps both directions differentiable for free.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .numerics import Tensor, add, as_tensor, fixed_linear, sub

LEVELS = 4
KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _reflect(i: int, n: int) -> int:
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = abs(i) % period
    return period - i if i >= n else i


@lru_cache(maxsize=32)
def blur_matrix(n: int) -> np.ndarray:
    m = np.zeros((n, n))
    for row in range(n):
        for k, tap in enumerate(KERNEL):
            m[row, _reflect(row + k - 2, n)] += tap
    return m


@lru_cache(maxsize=32)
def down_matrix(n: int) -> np.ndarray:
    """Blur then keep even samples: maps length n to n // 2."""
    return blur_matrix(n)[::2].copy()


@lru_cache(maxsize=32)
def up_matrix(n: int) -> np.ndarray:
    """Zero-insert to 2n then blur with the kernel doubled (x4 over both axes)."""
    zero_insert = np.zeros((2 * n, n))
    zero_insert[::2] = np.eye(n)
    return 2.0 * blur_matrix(2 * n) @ zero_insert


def downsample(x: Tensor) -> Tensor:
    x = as_tensor(x)
    h, w = x.shape[:2]
    return fixed_linear(fixed_linear(x, down_matrix(h), axis=0), down_matrix(w), axis=1)


def upsample(x: Tensor) -> Tensor:
    x = as_tensor(x)
    h, w = x.shape[:2]
    return fixed_linear(fixed_linear(x, up_matrix(h), axis=0), up_matrix(w), axis=1)


@dataclass
class Pyramid:
    laplacian: list[Tensor]   # l0, l1, l2 (finest first)
    base: Tensor              # g3, also called l3

    @property
    def levels(self) -> list[Tensor]:
        return [*self.laplacian, self.base]

    def reconstruct(self) -> Tensor:
        return reconstruct(*self.laplacian, self.base)


def decompose(patch, levels: int = LEVELS) -> Pyramid:
    patch = as_tensor(patch)
    h, w = patch.shape[:2]
    step = 2 ** (levels - 1)
    if h % step or w % step:
        raise ValueError(f"{h}x{w} patch: both sides must be divisible by {step} for {levels} levels")
    g = patch
    lap = []
    for _ in range(levels - 1):
        nxt = downsample(g)
        lap.append(sub(g, upsample(nxt)))
        g = nxt
    return Pyramid(lap, g)


def reconstruct(*levels) -> Tensor:
    """Collapse (l0, ..., l_{k-1}, base) back into the finest level."""
    if len(levels) < 1:
        raise ValueError("need at least a base level")
    out = as_tensor(levels[-1])
    for lap in reversed(levels[:-1]):
        lap = as_tensor(lap)
        if lap.shape[:2] != (2 * out.shape[0], 2 * out.shape[1]) or lap.shape[2:] != out.shape[2:]:
            raise ValueError(f"level of shape {lap.shape} cannot sit above {out.shape}")
        out = add(lap, upsample(out))
    return out
