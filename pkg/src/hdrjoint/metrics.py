"""PSNR, SSIM and TMQI for images in [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage, stats

PSNR_CAP = 100.0
REC709 = np.array([0.2126, 0.7152, 0.0722])

# TMQI constants
TMQI_A = 0.8012
TMQI_ALPHA = 0.3046
TMQI_BETA = 0.7088
TMQI_SCALE_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
TMQI_C1 = 0.01
TMQI_C2 = 10.0
NAT_MEAN, NAT_STD = 115.94, 27.99      # Gaussian model of mean brightness
NAT_BETA_A, NAT_BETA_B = 4.4, 10.1     # beta model of mean local contrast
NAT_CONTRAST_SCALE = 64.29


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., :3] @ REC709


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for unit peak; 100 dB when the images match."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


@lru_cache(maxsize=4)
def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win1d: np.ndarray) -> np.ndarray:
    r = len(win1d) // 2
    out = ndimage.correlate1d(img, win1d, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, win1d, axis=1, mode="nearest")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def _local_stats(x, y, win):
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    vx = _filter_valid(x * x, win) - mx * mx
    vy = _filter_valid(y * y, win) - my * my
    cxy = _filter_valid(x * y, win) - mx * my
    return mx, my, vx, vy, cxy


def ssim(a, b, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM on Rec.709 luma with an 11x11, sigma 1.5 Gaussian window."""
    a, b = np.asarray(a), np.asarray(b)
    _same_shape(a, b, "ssim")
    x, y = luma(a), luma(b)
    win = gaussian_window()
    if min(x.shape) < len(win):
        raise ValueError(f"ssim needs images of at least {len(win)}x{len(win)}")
    c1, c2 = k1 ** 2, k2 ** 2
    mx, my, vx, vy, cxy = _local_stats(x, y, win)
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(smap.mean())


# --------------------------------------------------------------------------
# TMQI


@dataclass(frozen=True)
class TMQIResult:
    q: float
    s: float
    n: float


def _local_structure(hdr: np.ndarray, ldr: np.ndarray, freq: float) -> float:
    win = gaussian_window()
    _, _, vh, vl, cov = _local_stats(hdr, ldr, win)
    sh = np.sqrt(np.maximum(vh, 0.0))
    sl = np.sqrt(np.maximum(vl, 0.0))
    # contrast sensitivity at this scale sets the visibility threshold
    csf = 100.0 * 2.6 * (0.0192 + 0.114 * freq) * np.exp(-((0.114 * freq) ** 1.1))
    mu = 128.0 / (1.4 * csf)
    sd = mu / 3.0
    ph = stats.norm.cdf(sh, mu, sd)
    pl = stats.norm.cdf(sl, mu, sd)
    smap = ((2 * ph * pl + TMQI_C1) / (ph ** 2 + pl ** 2 + TMQI_C1)) * ((cov + TMQI_C2) / (sh * sl + TMQI_C2))
    return float(smap.mean())


def _halve(img: np.ndarray) -> np.ndarray:
    avg = (img[:-1, :-1] + img[1:, :-1] + img[:-1, 1:] + img[1:, 1:]) / 4.0
    return avg[::2, ::2]


def structural_fidelity(hdr_l: np.ndarray, ldr_l: np.ndarray) -> float:
    """Multi-scale structural fidelity on luminance in the 0..255 range.

    Scales whose image is smaller than the 11x11 window are dropped and the
    remaining weights renormalised.
    """
    win = len(gaussian_window())
    scores, weights = [], []
    freq = 32.0
    h, l = hdr_l, ldr_l
    for w in TMQI_SCALE_WEIGHTS:
        freq /= 2
        if min(h.shape) < win:
            break
        scores.append(min(1.0, max(0.0, _local_structure(h, l, freq))))
        weights.append(w)
        h, l = _halve(h), _halve(l)
    if not scores:
        raise ValueError(f"tmqi needs images of at least {win}x{win}")
    weights = np.array(weights) / np.sum(weights) * TMQI_SCALE_WEIGHTS.sum()
    return float(np.prod(np.power(scores, weights)))


def statistical_naturalness(ldr_l: np.ndarray, block: int = 11) -> float:
    """Naturalness from global brightness and mean blockwise contrast (0..255 luma)."""
    h, w = ldr_l.shape
    stds = []
    for r in range(0, h, block):
        for c in range(0, w, block):
            blk = ldr_l[r:r + block, c:c + block]
            stds.append(blk.std(ddof=1) if blk.size > 1 else 0.0)
    contrast = float(np.mean(stds))
    mode = (NAT_BETA_A - 1) / (NAT_BETA_A + NAT_BETA_B - 2)
    pc = stats.beta.pdf(contrast / NAT_CONTRAST_SCALE, NAT_BETA_A, NAT_BETA_B) / stats.beta.pdf(
        mode, NAT_BETA_A, NAT_BETA_B)
    mean = float(ldr_l.mean())
    pb = stats.norm.pdf(mean, NAT_MEAN, NAT_STD) / stats.norm.pdf(NAT_MEAN, NAT_MEAN, NAT_STD)
    return float(min(1.0, max(0.0, pb * pc)))


def tmqi(ldr, hdr_ref) -> TMQIResult:
    """Tone-mapped image quality of ``ldr`` (values in [0, 1]) against an HDR reference.

    The HDR luminance is linearly stretched onto the LDR luminance range
    before comparison, so an LDR image scored against itself (or a
    rescaled copy) has structural fidelity exactly 1.
    """
    ldr, hdr_ref = np.asarray(ldr), np.asarray(hdr_ref)
    if ldr.shape[:2] != hdr_ref.shape[:2]:
        raise ValueError(f"tmqi: spatial shape mismatch {ldr.shape} vs {hdr_ref.shape}")
    l = luma(np.clip(ldr, 0.0, 1.0)) * 255.0
    hl = luma(hdr_ref)
    lo, hi = float(hl.min()), float(hl.max())
    if hi > lo:
        hl = l.min() + (hl - lo) * ((l.max() - l.min()) / (hi - lo))
    else:
        hl = np.full_like(hl, l.mean())
    s = structural_fidelity(hl, l)
    n = statistical_naturalness(l)
    q = TMQI_A * s ** TMQI_ALPHA + (1 - TMQI_A) * n ** TMQI_BETA
    return TMQIResult(float(q), s, n)


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    tmqi_q: float
    tmqi_s: float
    tmqi_n: float

    FIELDS = ("psnr", "ssim", "tmqi_q", "tmqi_s", "tmqi_n")

    def row(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]


def evaluate(output, reference, hdr_ref=None) -> MetricReport:
    """Full-reference scores of ``output`` against ``reference``.

    TMQI uses ``hdr_ref`` when given, otherwise ``reference``.
    """
    t = tmqi(output, reference if hdr_ref is None else hdr_ref)
    return MetricReport(psnr(output, reference), ssim(output, reference), t.q, t.s, t.n)
