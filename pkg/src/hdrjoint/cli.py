"""Command-line entry point: enhance, train, eval, ordering, decompose, stats."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics
from .imageio import ImageFormatError, load_image, save_image
from .models import (ORDERINGS, TFDL, CheckpointError, init_weights, load_checkpoint,
                     param_stats, save_checkpoint)
from .pipeline import EnhanceConfig, enhance_image
from .pyramid import decompose
from .training import (PHASES, LossWeights, NoiseModel, PhaseConfig, TrainingDivergedError,
                       gamma_baseline, ingest_manifest, read_manifest, synth_dataset, train,
                       write_history)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MODEL = 0, 1, 2, 3
REPORT_HEADER = ["name", *metrics.MetricReport.FIELDS]

log = logging.getLogger("hdrjoint")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _per_phase(values, phases, name):
    if values is None:
        return {p: None for p in phases}
    if len(values) == 1:
        return {p: values[0] for p in phases}
    if len(values) != len(phases):
        raise UsageError(f"--{name} needs one value or one per phase ({len(phases)})")
    return dict(zip(phases, values))


def phase_configs(args) -> list[PhaseConfig]:
    phases = args.phases
    if any(p not in PHASES for p in phases):
        raise UsageError(f"--phases must be drawn from {PHASES}")
    epochs = _per_phase(args.epochs, phases, "epochs")
    lrs = _per_phase(args.lr, phases, "lr")
    batches = _per_phase(args.batch, phases, "batch")
    return [PhaseConfig.defaults(p, epochs=epochs[p], learning_rate=lrs[p], batch_size=batches[p])
            for p in phases]


def _progress(phase, epoch, loss):
    log.info("phase %d epoch %d loss %.6f", phase, epoch, loss)


def write_report(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for name, rep in rows:
            w.writerow([name, *(f"{v:.6f}" for v in rep.row())])


# --------------------------------------------------------------------------
# subcommands


def cmd_enhance(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    image = load_image(args.input)
    if args.order and args.order != bundle.ordering:
        log.warning("checkpoint was trained as %s, running as %s", bundle.ordering, args.order)
    out = enhance_image(image, bundle, EnhanceConfig(ordering=args.order))
    save_image(args.output, out, bits=args.bits)
    return EXIT_OK


def _dataset(args):
    if args.manifest:
        data = ingest_manifest(args.manifest)
        if not data:
            raise OSError(f"{args.manifest}: no usable training scenes")
        return data
    return synth_dataset(args.synthetic, args.seed, NoiseModel(args.noise_sigma, args.noise_gain))


def cmd_train(args) -> int:
    configs = phase_configs(args)
    data = _dataset(args)
    if args.init:
        bundle = load_checkpoint(args.init)
        bundle.ordering = args.order or bundle.ordering
    else:
        bundle = init_weights(args.seed, ordering=args.order or TFDL)
    t0 = time.time()
    res = train(bundle, data, configs, LossWeights(), seed=args.seed, progress=_progress)
    log.info("trained %d samples in %.1f s", len(data), time.time() - t0)
    save_checkpoint(res.bundle, args.out)
    if args.history:
        write_history(res.history, args.history)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.lpips:
        print("note: LPIPS is not available (needs a pretrained perceptual network); skipped",
              file=sys.stderr)
    bundle = load_checkpoint(args.checkpoint) if args.checkpoint else None
    rows = []
    for entry in read_manifest(args.pairs):
        if len(entry) not in (2, 3):
            raise UsageError(f"{args.pairs}: each line needs 2 or 3 tab-separated paths")
        src = load_image(entry[0])
        ref = load_image(entry[1])
        hdr = load_image(entry[2]) if len(entry) == 3 else src
        out = enhance_image(src, bundle, EnhanceConfig(ordering=args.order)) if bundle else src
        rows.append((Path(entry[0]).stem, metrics.evaluate(out, ref, hdr)))
    write_report(rows, args.report)
    return EXIT_OK


def _mean_report(reports) -> metrics.MetricReport:
    arr = np.array([r.row() for r in reports])
    return metrics.MetricReport(*arr.mean(axis=0))


def ordering_experiment(n_train: int, n_heldout: int, seed: int, configs, noise: NoiseModel,
                        outdir: Path | None = None):
    """Train DFTL and TFDL from the same init on the same data; score held-out triplets.

    Returns (name, MetricReport) rows: the gamma baseline, each untrained
    model and each trained model, all against the tone-mapped clean target.
    """
    data = synth_dataset(n_train, seed, noise)
    held = synth_dataset(n_heldout, seed + 7919, noise)

    def score(fn):
        return _mean_report([metrics.evaluate(fn(s.x_noisy), s.y_final, s.y_merged) for s in held])

    rows = [("gamma_baseline", score(gamma_baseline))]
    for order in ORDERINGS:
        start = init_weights(seed, ordering=order)
        rows.append((f"untrained_{order}", score(lambda x: enhance_image(x, start))))
        res = train(start, data, configs, LossWeights(), seed=seed, progress=_progress)
        if outdir is not None:
            outdir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(res.bundle, outdir / f"{order}.ckpt")
            write_history(res.history, outdir / f"{order}_history.csv")
        rows.append((order, score(lambda x: enhance_image(x, res.bundle))))
    return rows


def cmd_ordering(args) -> int:
    configs = phase_configs(args)
    noise = NoiseModel(args.noise_sigma, args.noise_gain)
    rows = ordering_experiment(args.synthetic, args.heldout, args.seed, configs, noise,
                               Path(args.outdir) if args.outdir else None)
    write_report(rows, args.report)
    return EXIT_OK


def cmd_decompose(args) -> int:
    image = load_image(args.input)
    h, w = image.shape[:2]
    if h % 8 or w % 8:
        # crop to the largest size the pyramid accepts
        image = image[:h - h % 8, :w - w % 8]
        log.warning("cropped to %dx%d for a 4-level pyramid", *image.shape[:2])
    pyr = decompose(image)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    for i, lvl in enumerate(pyr.laplacian):
        np.save(out / f"l{i}.npy", lvl.data)
        save_image(out / f"l{i}.png", (lvl.data + 1.0) / 2.0)
    np.save(out / "base.npy", pyr.base.data)
    save_image(out / "base.png", pyr.base.data)
    return EXIT_OK


def cmd_stats(args) -> int:
    st = param_stats(load_checkpoint(args.checkpoint), args.patch)
    print(f"params           {st.params}")
    print(f"  tone-mappers   {st.tonemapper_params}")
    print(f"  denoisers      {st.denoiser_params}")
    print(f"MACs per {args.patch}x{args.patch} patch  {st.macs_per_patch}")
    print(f"  tone-mappers   {st.tonemapper_macs}")
    print(f"  denoisers      {st.denoiser_macs}")
    return EXIT_OK


# --------------------------------------------------------------------------


def _add_training_flags(p):
    p.add_argument("--phases", type=_int_list, default=list(PHASES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=_int_list, help="one value, or one per phase")
    p.add_argument("--lr", type=_float_list, help="one value, or one per phase")
    p.add_argument("--batch", type=_int_list, help="one value, or one per phase")
    p.add_argument("--noise-sigma", type=float, default=NoiseModel.sigma)
    p.add_argument("--noise-gain", type=float, default=NoiseModel.gain)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hdrjoint", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("enhance", help="enhance one image")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--order", choices=ORDERINGS)
    p.add_argument("--output", required=True)
    p.add_argument("--bits", type=int, choices=(8, 16), default=16)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("train", help="run the training phases")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--synthetic", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--order", choices=ORDERINGS)
    p.add_argument("--init", help="start from this checkpoint instead of a fresh init")
    p.add_argument("--history", help="write per-epoch losses as CSV")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score image pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--order", choices=ORDERINGS)
    p.add_argument("--report", required=True)
    p.add_argument("--lpips", action="store_true", help="request LPIPS (prints a note; not implemented)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ordering", help="train DFTL and TFDL on identical data and compare")
    p.add_argument("--synthetic", type=int, default=32)
    p.add_argument("--heldout", type=int, default=8)
    p.add_argument("--report", required=True)
    p.add_argument("--outdir")
    _add_training_flags(p)
    p.set_defaults(func=cmd_ordering)

    p = sub.add_parser("decompose", help="dump the pyramid levels of an image")
    p.add_argument("--input", required=True)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("stats", help="parameter and MAC counts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patch", type=int, default=224)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        if getattr(args, "synthetic", None) is not None and args.synthetic < 1:
            raise UsageError("--synthetic needs a positive count")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (OSError, ImageFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
