"""Overlapping 16x16 tiling and the orthonormal tile DCT."""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .numerics import Tensor, as_tensor, fixed_linear

TILE = 16
DEFAULT_STRIDE = 8


def grid_origins(size: int, window: int, stride: int) -> list[int]:
    """Origins 0, stride, 2*stride, ... plus a flush final origin if needed."""
    if size < window:
        raise ValueError(f"extent {size} is smaller than the window {window}")
    if stride < 1:
        raise ValueError("stride must be positive")
    origins = list(range(0, size - window + 1, stride))
    if origins[-1] != size - window:
        origins.append(size - window)
    return origins


@dataclass(frozen=True)
class TileStack:
    tiles: Tensor                 # [N, 16, 16, C]
    origins: np.ndarray           # [N, 2] (row, col)
    source_shape: tuple[int, int]

    @property
    def geometry(self) -> list[tuple[int, int]]:
        return [(int(r), int(c)) for r, c in self.origins]

    def with_tiles(self, tiles: Tensor) -> "TileStack":
        return replace(self, tiles=tiles)


@lru_cache(maxsize=32)
def _tile_index(h: int, w: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    rows = grid_origins(h, TILE, stride)
    cols = grid_origins(w, TILE, stride)
    origins = np.array([(r, c) for r in rows for c in cols], dtype=np.int64)
    off = np.arange(TILE)
    pix_r = origins[:, 0, None, None] + off[None, :, None]
    pix_c = origins[:, 1, None, None] + off[None, None, :]
    flat = (pix_r * w + pix_c).reshape(-1)
    origins.setflags(write=False)
    flat.setflags(write=False)
    return origins, flat


def _flat_index(stack: TileStack) -> np.ndarray:
    h, w = stack.source_shape
    off = np.arange(TILE)
    o = np.asarray(stack.origins, dtype=np.int64)
    if o.size and (o.min() < 0 or (o[:, 0] + TILE > h).any() or (o[:, 1] + TILE > w).any()):
        raise ValueError("tile origin outside the source image")
    pix_r = o[:, 0, None, None] + off[None, :, None]
    pix_c = o[:, 1, None, None] + off[None, None, :]
    return (pix_r * w + pix_c).reshape(-1)


def _scatter_add(values: np.ndarray, flat: np.ndarray, npix: int) -> np.ndarray:
    c = values.shape[-1]
    v = values.reshape(-1, c)
    out = np.empty((npix, c), dtype=np.float64)
    for ch in range(c):
        out[:, ch] = np.bincount(flat, weights=v[:, ch], minlength=npix)
    return out


def extract_tiles(patch, stride: int = DEFAULT_STRIDE) -> TileStack:
    patch = as_tensor(patch)
    if patch.data.ndim != 3:
        raise ValueError("expected an [H, W, C] patch")
    h, w, c = patch.shape
    if h < TILE or w < TILE:
        raise ValueError(f"patch {h}x{w} is smaller than the {TILE}x{TILE} tile")
    origins, flat = _tile_index(h, w, stride)
    n = len(origins)
    data = patch.data.reshape(h * w, c)[flat].reshape(n, TILE, TILE, c)

    def bw(g):
        return (_scatter_add(g, flat, h * w).astype(g.dtype).reshape(h, w, c),)

    tiles = Tensor.from_op(data, (patch,), bw)
    return TileStack(tiles, origins, (h, w))


def merge_tiles_average(stack: TileStack) -> Tensor:
    """Average every pixel over the tiles that contain it."""
    tiles = stack.tiles
    h, w = stack.source_shape
    n, th, tw, c = tiles.shape
    if (th, tw) != (TILE, TILE) or n != len(stack.origins):
        raise ValueError("tile stack does not match its geometry")
    flat = _flat_index(stack)
    count = np.bincount(flat, minlength=h * w)
    if (count == 0).any():
        raise ValueError(f"{int((count == 0).sum())} pixels are not covered by any tile")
    inv = (1.0 / count)[:, None]
    out = (_scatter_add(tiles.data, flat, h * w) * inv).astype(tiles.data.dtype).reshape(h, w, c)

    def bw(g):
        g2 = (g.reshape(h * w, c) * inv).astype(g.dtype)
        return (g2[flat].reshape(n, TILE, TILE, c),)

    return Tensor.from_op(out, (tiles,), bw)


@lru_cache(maxsize=4)
def dct_basis(n: int = TILE) -> np.ndarray:
    """Orthonormal DCT-II matrix; row k holds frequency k."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    b = np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    b[0] *= np.sqrt(1.0 / n)
    b[1:] *= np.sqrt(2.0 / n)
    b.setflags(write=False)
    return b


def _check_tiles(stack: TileStack) -> None:
    s = stack.tiles.shape
    if len(s) != 4 or s[1:3] != (TILE, TILE):
        raise ValueError(f"expected [N, {TILE}, {TILE}, C] tiles, got {s}")


def dct2(stack: TileStack) -> TileStack:
    """Per-tile, per-channel C = B X B^T."""
    _check_tiles(stack)
    b = dct_basis()
    coeffs = fixed_linear(fixed_linear(stack.tiles, b, axis=1), b, axis=2)
    return stack.with_tiles(coeffs)


def idct2(stack: TileStack) -> TileStack:
    _check_tiles(stack)
    bt = dct_basis().T
    pixels = fixed_linear(fixed_linear(stack.tiles, bt, axis=1), bt, axis=2)
    return stack.with_tiles(pixels)
