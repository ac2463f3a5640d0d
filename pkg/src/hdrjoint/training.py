"""Three-phase training: tone-mappers alone, then denoisers with frozen
tone-mappers, then everything jointly."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .models import TFDL, ModelBundle
from .numerics import Tensor
from .pipeline import EnhanceConfig, LevelOps, bundle_level_ops, compose_level, process_pyramid, split_patches
from .pyramid import Pyramid, decompose, reconstruct

log = logging.getLogger(__name__)

PHASES = (1, 2, 3)
# batch size, learning rate, epochs
TABLE1 = {1: (16, 1e-5, 500), 2: (16, 1e-5, 500), 3: (16, 1e-6, 1000)}


@dataclass(frozen=True)
class LossWeights:
    l0: float = 2.0
    l1: float = 2.0
    l2: float = 2.0
    l3: float = 1.0
    denoise: float = 1.0

    def __post_init__(self):
        if min(self.l0, self.l1, self.l2, self.l3, self.denoise) < 0:
            raise ValueError("loss weights must be nonnegative")

    @property
    def levels(self) -> tuple[float, float, float, float]:
        return (self.l0, self.l1, self.l2, self.l3)

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(self.l0 * k, self.l1 * k, self.l2 * k, self.l3 * k, self.denoise * k)


@dataclass(frozen=True)
class PhaseConfig:
    phase: int
    batch_size: int = 16
    learning_rate: float = 1e-5
    epochs: int = 500

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("invalid phase settings")

    @classmethod
    def defaults(cls, phase: int, **overrides) -> "PhaseConfig":
        batch, lr, epochs = TABLE1[phase]
        kw = dict(batch_size=batch, learning_rate=lr, epochs=epochs)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(phase, **kw)


@dataclass
class SampleTriplet:
    x_noisy: np.ndarray
    y_merged: np.ndarray
    y_final: np.ndarray

    def __post_init__(self):
        shapes = {self.x_noisy.shape, self.y_merged.shape, self.y_final.shape}
        if len(shapes) != 1:
            raise ValueError(f"triplet members disagree in shape: {shapes}")


# --------------------------------------------------------------------------
# losses


def _check_count(seq, n, what):
    if len(seq) != n:
        raise ValueError(f"{what}: expected {n} levels, got {len(seq)}")


def loss_phase1(outputs: Sequence[Tensor], targets: Sequence, weights: LossWeights = LossWeights()) -> Tensor:
    """Weighted per-level L1 between tone-mapped levels and the target pyramid."""
    _check_count(outputs, 4, "loss_phase1")
    _check_count(targets, 4, "loss_phase1")
    return nx.weighted_sum((w, nx.l1_loss(o, t)) for w, o, t in zip(weights.levels, outputs, targets))


def loss_phase2(levels: Sequence[Tensor], input_base, targets: Sequence, y_merged,
                weights: LossWeights = LossWeights()) -> Tensor:
    """Per-level L1 on l0..l2 plus L1 of the image rebuilt on the *input* base
    against the clean, un-tone-mapped target."""
    _check_count(levels, 3, "loss_phase2")
    _check_count(targets, 3, "loss_phase2")
    terms = [(w, nx.l1_loss(o, t)) for w, o, t in zip(weights.levels[:3], levels, targets)]
    terms.append((weights.denoise, nx.l1_loss(reconstruct(*levels, input_base), y_merged)))
    return nx.weighted_sum(terms)


def loss_phase3(levels: Sequence[Tensor], tonemapped_base, y_final) -> Tensor:
    """L1 of the image rebuilt on the *tone-mapped* base against the final target."""
    _check_count(levels, 3, "loss_phase3")
    return nx.l1_loss(reconstruct(*levels, tonemapped_base), y_final)


# --------------------------------------------------------------------------
# training loop


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class _Prepared:
    inputs: Pyramid
    targets: list[np.ndarray]
    y_merged: np.ndarray
    y_final: np.ndarray
    tonemapped: list[Tensor] | None = None   # frozen tone-mapper outputs (phase 2, TFDL)


def _prepare(sample: SampleTriplet) -> _Prepared:
    pyr = decompose(sample.x_noisy)
    tgt = [lvl.data for lvl in decompose(sample.y_final).levels]
    return _Prepared(pyr, tgt, np.asarray(sample.y_merged, np.float32), np.asarray(sample.y_final, np.float32))


def sample_loss(bundle: ModelBundle, prep: _Prepared, phase: int, weights: LossWeights,
                ops: Sequence[LevelOps] | None = None) -> Tensor:
    ops = ops or bundle_level_ops(bundle)
    pyr = prep.inputs
    if phase == 1:
        outs = [op.tonemap(lvl) for op, lvl in zip(ops, pyr.levels)]
        return loss_phase1(outs, prep.targets, weights)
    if phase == 2:
        if bundle.ordering == TFDL and prep.tonemapped is not None:
            levels = [op.denoise(t) for op, t in zip(ops, prep.tonemapped)]
        else:
            levels = [compose_level(lvl, op, bundle.ordering) for op, lvl in zip(ops, pyr.laplacian)]
        return loss_phase2(levels, pyr.base, prep.targets[:3], prep.y_merged, weights)
    if phase == 3:
        out = process_pyramid(pyr, ops, bundle.ordering)
        return loss_phase3(out.laplacian, out.base, prep.y_final)
    raise ValueError(f"unknown phase {phase}")


def trainable_parameters(bundle: ModelBundle, phase: int) -> dict[str, Tensor]:
    if phase == 1:
        return bundle.tonemapper_parameters()
    if phase == 2:
        return bundle.denoiser_parameters()
    return bundle.named_parameters()


@dataclass
class PhaseResult:
    bundle: ModelBundle
    losses: list[float] = field(default_factory=list)
    validation: list[float] = field(default_factory=list)


def evaluate_loss(bundle: ModelBundle, dataset: Sequence[SampleTriplet], phase: int,
                  weights: LossWeights = LossWeights()) -> float:
    ops = bundle_level_ops(bundle)
    vals = [float(sample_loss(bundle, _prepare(s), phase, weights, ops).data) for s in dataset]
    return float(np.mean(vals))


def run_phase(bundle: ModelBundle, dataset: Sequence[SampleTriplet], config: PhaseConfig,
              weights: LossWeights = LossWeights(), seed: int = 0,
              validation: Sequence[SampleTriplet] | None = None,
              progress: Callable[[int, int, float], None] | None = None) -> PhaseResult:
    """Train one phase on a copy of ``bundle``; returns per-epoch mean losses."""
    if not dataset:
        raise ValueError("dataset is empty")
    bundle = bundle.copy()
    result = PhaseResult(bundle)
    if config.epochs == 0:
        return result

    phase = config.phase
    prepared = [_prepare(s) for s in dataset]
    params = trainable_parameters(bundle, phase)
    ops = bundle_level_ops(bundle)
    if phase == 2 and bundle.ordering == TFDL:
        for p in prepared:
            p.tonemapped = [Tensor(op.tonemap(lvl).data) for op, lvl in zip(ops, p.inputs.laplacian)]
    for t in params.values():
        t.requires_grad = True

    rng = np.random.default_rng(seed)
    state = nx.AdamState()
    n = len(prepared)
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            epoch_losses = []
            for b, start in enumerate(range(0, n, config.batch_size)):
                batch = order[start:start + config.batch_size]
                for t in params.values():
                    t.zero_grad()
                for idx in batch:
                    loss = sample_loss(bundle, prepared[idx], phase, weights, ops)
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise TrainingDivergedError(
                            f"phase {phase}: non-finite loss at epoch {epoch}, batch {b}, sample {idx}")
                    loss.backward(np.asarray(1.0 / len(batch), dtype=loss.data.dtype))
                    epoch_losses.append(value)
                grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
                try:
                    nx.adam_step(params, grads, state, config.learning_rate)
                except nx.NonFiniteGradientError as exc:
                    raise TrainingDivergedError(f"phase {phase}: {exc} at epoch {epoch}, batch {b}") from exc
            mean = float(np.mean(epoch_losses))
            result.losses.append(mean)
            if validation:
                result.validation.append(evaluate_loss(bundle, validation, phase, weights))
            if progress is not None:
                progress(phase, epoch, mean)
            log.debug("phase %d epoch %d loss %.6f", phase, epoch, mean)
    finally:
        for t in params.values():
            t.requires_grad = False
            t.zero_grad()
    return result


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list[tuple[int, int, float]] = field(default_factory=list)


def train(bundle: ModelBundle, dataset: Sequence[SampleTriplet], phases: Sequence[PhaseConfig],
          weights: LossWeights = LossWeights(), seed: int = 0,
          validation: Sequence[SampleTriplet] | None = None,
          progress: Callable[[int, int, float], None] | None = None) -> TrainResult:
    """Run the given phases in order, each seeded from ``seed`` and its number."""
    out = TrainResult(bundle)
    for cfg in phases:
        res = run_phase(out.bundle, dataset, cfg, weights, seed=seed * 1000 + cfg.phase,
                        validation=validation, progress=progress)
        out.bundle = res.bundle
        out.history.extend((cfg.phase, e, loss) for e, loss in enumerate(res.losses))
    return out


def write_history(history: Sequence[tuple[int, int, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "epoch", "loss"])
        for phase, epoch, loss in history:
            w.writerow([phase, epoch, repr(float(loss))])


# --------------------------------------------------------------------------
# data


def tone_curve(x, strength: float = 0.3) -> np.ndarray:
    """Gamma 1/2.2 followed by a mild, monotone s-curve."""
    v = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) ** (1 / 2.2)
    return (v - strength * np.sin(2 * np.pi * v) / (2 * np.pi)).astype(np.float32)


def gamma_baseline(x) -> np.ndarray:
    return (np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) ** (1 / 2.2)).astype(np.float32)


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.02   # gaussian read noise
    gain: float = 0.01    # shot noise: x ~ gain * Poisson(clean / gain)

    def apply(self, clean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = clean.astype(np.float64)
        if self.gain > 0:
            x = self.gain * rng.poisson(x / self.gain)
        if self.sigma > 0:
            x = x + rng.normal(0.0, self.sigma, x.shape)
        return np.clip(x, 0.0, 1.0).astype(np.float32)


def synth_scene(rng: np.random.Generator, size: int = 224, exposure: float = 0.3) -> np.ndarray:
    """Smooth colour gradients plus a few flat shapes, scaled into [0, exposure]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((size, size, 3))
    for c in range(3):
        a, gx, gy = rng.uniform(0.1, 0.6), rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)
        fx, fy, ph = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
        img[..., c] = a + gx * xx + gy * yy + 0.1 * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    for _ in range(rng.integers(3, 8)):
        colour = rng.uniform(0.0, 1.0, 3)
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.05, 0.25)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
        img[mask] = colour
    return (exposure * np.clip(img, 0.0, 1.0)).astype(np.float32)


def synth_dataset(n: int, seed: int, noise: NoiseModel = NoiseModel(), size: int = 224) -> list[SampleTriplet]:
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        clean = synth_scene(rng, size)
        out.append(SampleTriplet(noise.apply(clean, rng), clean, tone_curve(clean)))
    return out


def read_manifest(path) -> list[tuple[str, ...]]:
    rows = []
    base = Path(path).parent
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        rows.append(tuple(str(base / p) if not Path(p).is_absolute() else p for p in line.split("\t")))
    return rows


def ingest_manifest(path, config: EnhanceConfig = EnhanceConfig()) -> list[SampleTriplet]:
    """Load (input, merged, final) scenes and cut them into training patches."""
    from .imageio import ImageFormatError, load_image

    rows = read_manifest(path)
    if not rows:
        log.warning("manifest %s lists no scenes", path)
        return []
    out: list[SampleTriplet] = []
    for i, row in enumerate(rows):
        if len(row) != 3:
            log.warning("manifest line %d: expected 3 tab-separated paths, got %d; skipped", i + 1, len(row))
            continue
        try:
            images = [load_image(p) for p in row]
        except (OSError, ImageFormatError) as exc:
            log.warning("scene %d skipped: %s", i + 1, exc)
            continue
        if len({im.shape for im in images}) != 1:
            log.warning("scene %d skipped: image sizes differ %s", i + 1, [im.shape for im in images])
            continue
        parts = [split_patches(im, config)[1] for im in images]
        out.extend(SampleTriplet(a, b, c) for a, b, c in zip(*parts))
    if not out:
        log.warning("manifest %s produced no training patches", path)
    return out
