"""Whole-image enhancement: half-overlapping patches, per-level processing,
windowed re-merge."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from .models import DFTL, ORDERINGS, PATCH, TFDL, ModelBundle, denoise_level, tonemap_level
from .numerics import Tensor
from .pyramid import LEVELS, Pyramid, decompose, reconstruct
from .transforms import TILE, grid_origins

WINDOW_FLOOR = 1e-3

LevelFn = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class EnhanceConfig:
    ordering: str | None = None   # None: use the checkpoint's flag
    patch_size: int = PATCH
    overlap: float = 0.5

    def __post_init__(self):
        if self.ordering is not None and self.ordering not in ORDERINGS:
            raise ValueError(f"ordering must be one of {ORDERINGS}")
        if self.patch_size % 2 ** (LEVELS - 1) or self.patch_size < TILE:
            raise ValueError(f"patch size must be a multiple of {2 ** (LEVELS - 1)} and at least {TILE}")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError("overlap must lie in [0, 1)")

    @property
    def stride(self) -> int:
        return max(1, int(round(self.patch_size * (1.0 - self.overlap))))


class LevelOps(NamedTuple):
    tonemap: LevelFn
    denoise: LevelFn | None   # None for the base level


def bundle_level_ops(bundle: ModelBundle) -> list[LevelOps]:
    ops = [LevelOps(lambda x, net=tm: tonemap_level(x, net, signed=True),
                    lambda x, net=dn: denoise_level(x, net))
           for tm, dn in zip(bundle.tonemappers[:-1], bundle.denoisers)]
    ops.append(LevelOps(lambda x, net=bundle.tonemappers[-1]: tonemap_level(x, net, signed=False), None))
    return ops


def compose_level(x: Tensor, ops: LevelOps, ordering: str) -> Tensor:
    """Tone-map then denoise (TFDL) or denoise then tone-map (DFTL)."""
    if ops.denoise is None:
        return ops.tonemap(x)
    if ordering == TFDL:
        return ops.denoise(ops.tonemap(x))
    if ordering == DFTL:
        return ops.tonemap(ops.denoise(x))
    raise ValueError(f"unknown ordering {ordering!r}")


def process_pyramid(pyr: Pyramid, ops: Sequence[LevelOps], ordering: str) -> Pyramid:
    out = [compose_level(lvl, op, ordering) for lvl, op in zip(pyr.laplacian, ops[:-1])]
    return Pyramid(out, ops[-1].tonemap(pyr.base))


def enhance_patch(patch, bundle: ModelBundle | None = None, ordering: str | None = None,
                  level_ops: Sequence[LevelOps] | None = None) -> np.ndarray:
    """Enhance one patch; ``level_ops`` replaces the bundle's networks."""
    if level_ops is None:
        if bundle is None:
            raise ValueError("need a bundle or explicit level operators")
        level_ops = bundle_level_ops(bundle)
    ordering = ordering or (bundle.ordering if bundle is not None else TFDL)
    out = process_pyramid(decompose(nx.as_tensor(patch)), level_ops, ordering).reconstruct()
    return np.clip(out.data, 0.0, 1.0)


# --------------------------------------------------------------------------
# patch grid


@dataclass(frozen=True)
class PatchGrid:
    origins: tuple[tuple[int, int], ...]
    source_shape: tuple[int, int]
    padded_shape: tuple[int, int]
    patch_size: int = PATCH

    @property
    def pad(self) -> tuple[int, int]:
        return (self.padded_shape[0] - self.source_shape[0], self.padded_shape[1] - self.source_shape[1])

    def __len__(self) -> int:
        return len(self.origins)


def _reflect_pad(image: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return image
    mode = "reflect" if min(image.shape[:2]) > 1 else "edge"
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), mode=mode)


def plan_grid(shape: tuple[int, int], config: EnhanceConfig = EnhanceConfig()) -> PatchGrid:
    h, w = shape
    p = config.patch_size
    ph, pw = max(0, p - h), max(0, p - w)
    hh, ww = h + ph, w + pw
    rows = grid_origins(hh, p, config.stride)
    cols = grid_origins(ww, p, config.stride)
    return PatchGrid(tuple((r, c) for r in rows for c in cols), (h, w), (hh, ww), p)


def split_patches(image, config: EnhanceConfig = EnhanceConfig()) -> tuple[PatchGrid, list[np.ndarray]]:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or min(image.shape[:2]) < 1:
        raise ValueError("expected a non-empty [H, W, C] image")
    grid = plan_grid(image.shape[:2], config)
    padded = _reflect_pad(image, *grid.pad)
    p = grid.patch_size
    patches = [padded[r:r + p, c:c + p].copy() for r, c in grid.origins]
    return grid, patches


@lru_cache(maxsize=8)
def raised_cosine(size: int, floor: float = WINDOW_FLOOR) -> np.ndarray:
    """Separable squared-sine window lifted to a small floor.

    Two copies offset by size/2 sum to the constant 1 + floor along each axis.
    """
    n = np.arange(size)
    prof = floor + (1.0 - floor) * np.sin(np.pi * (n + 0.5) / size) ** 2
    win = np.outer(prof, prof)
    win.setflags(write=False)
    return win


def merge_patches(patches: Sequence[np.ndarray], grid: PatchGrid, window: np.ndarray | None = None) -> np.ndarray:
    """Window-weighted average of patches, cropped to the source shape."""
    p = grid.patch_size
    if window is None:
        window = raised_cosine(p)
    if len(patches) != len(grid) or window.shape != (p, p):
        raise ValueError(f"expected {len(grid)} patches of {p}x{p} and a matching window")
    hh, ww = grid.padded_shape
    c = np.asarray(patches[0]).shape[-1]
    num = np.zeros((hh, ww, c))
    den = np.zeros((hh, ww))
    for (r, col), patch in zip(grid.origins, patches):
        patch = np.asarray(patch, dtype=np.float64)
        if patch.shape[:2] != (p, p):
            raise ValueError(f"patch shape {patch.shape} does not match the grid")
        num[r:r + p, col:col + p] += patch * window[..., None]
        den[r:r + p, col:col + p] += window
    if (den <= 0).any():
        raise ValueError("grid leaves pixels uncovered")
    h, w = grid.source_shape
    return (num / den[..., None])[:h, :w].astype(np.float32)


def enhance_image(image, bundle: ModelBundle, config: EnhanceConfig = EnhanceConfig()) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    ordering = config.ordering or bundle.ordering
    ops = bundle_level_ops(bundle)
    grid, patches = split_patches(image, config)
    out = [enhance_patch(pt, ordering=ordering, level_ops=ops) for pt in patches]
    return merge_patches(out, grid)
