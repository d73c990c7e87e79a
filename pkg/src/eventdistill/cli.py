"""Unified command-line entry point.

One multiplexed executable with subcommands for every stage: synth,
voxelize, mask, teacher, encode, simmap, gradcheck, pretrain, eval,
probe, formats-check. Exit codes: 0 success, 1 validation failure,
2 I/O error, 3 numeric abort. All numeric output uses 9 significant
digits so golden files reproduce.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import event_core, features, losses, probe, synth_data, trainer
from .errors import (DimensionError, FormatError, NumericError,
                     ParameterError)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


def fmt(value: float) -> str:
    """Canonical numeric rendering: 9 significant digits."""
    return f"{float(value):.9g}"


class _Parser(argparse.ArgumentParser):
    """argparse with the exit-code contract (usage errors exit 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def build_parser() -> _Parser:
    parser = _Parser(prog="eventdistill",
                     description="Event-camera distillation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", parents=[], help="generate a synthetic dataset",
                       description="Write frame pairs, EVT1 events, label maps, "
                                   "and a manifest for N deterministic scenes.")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--contrast", type=float, default=synth_data.DEFAULT_CONTRAST)
    p.add_argument("--out", required=True)

    p = sub.add_parser("voxelize", help="window and voxelize an event file")
    p.add_argument("--events", required=True)
    p.add_argument("--bins", type=int, default=3)
    grp = p.add_mutually_exclusive_group()
    grp.add_argument("--window-us", type=int)
    grp.add_argument("--count", type=int)
    p.add_argument("--anchor", type=int,
                   help="window anchor in us (defaults to the first timestamp "
                        "for --window-us, the last for --count)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("mask", help="density map and activation mask of a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--tau", type=float, default=64.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("teacher", help="synthetic teacher features for an image")
    p.add_argument("--image", required=True)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("encode", help="encode events with a trained student")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("simmap", help="cosine similarity map around one token")
    p.add_argument("--features", required=True)
    p.add_argument("--anchor", required=True, metavar="MU,NU")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--loss", default="all",
                   choices=("l1", "intra", "cross", "student", "all"))
    p.add_argument("--tokens", type=int, default=8)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--h", type=float, default=1e-6)

    p = sub.add_parser("pretrain", help="pretrain the student encoder")
    p.add_argument("--data", help="dataset dir containing manifest.txt")
    grp = p.add_mutually_exclusive_group()
    grp.add_argument("--config", help="config file of `key = value` lines")
    grp.add_argument("--preset", choices=sorted(trainer.PRESETS))
    p.add_argument("--out", help="checkpoint path (.ckp1)")
    p.add_argument("--dump-config", action="store_true",
                   help="print the resolved config and exit")

    p = sub.add_parser("eval", help="held-out structure discrepancy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("probe", help="linear-probe a frozen student")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="training dataset dir")
    p.add_argument("--eval-data",
                   help="held-out dataset dir (defaults to --data)")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=1e-3)
    p.add_argument("--random-init", action="store_true",
                   help="score the seeded untrained student instead")

    p = sub.add_parser("formats-check", help="round-trip every container in a dir")
    p.add_argument("--dir", required=True)

    return parser


# ---------------------------------------------------------------------------
# Command handlers
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    manifest = synth_data.generate_dataset(
        args.scenes, args.seed, args.out,
        resolution=(args.width, args.height), contrast=args.contrast)
    print(f"wrote {args.scenes} scenes to {manifest.parent}")
    return EXIT_OK


def _cmd_voxelize(args) -> int:
    stream = event_core.read_evt1(args.events)
    if args.window_us is not None:
        anchor = args.anchor if args.anchor is not None else (
            int(stream.t[0]) if len(stream) else 0)
        stream = event_core.sample_window(stream, anchor,
                                          duration_us=args.window_us)
    elif args.count is not None:
        anchor = args.anchor if args.anchor is not None else (
            int(stream.t[-1]) if len(stream) else 0)
        stream = event_core.sample_window(stream, anchor, count=args.count)
    volume = event_core.voxelize(stream, args.bins)
    features.write_ftn(args.out, volume.data)
    print(f"events {len(stream)}\tsum {fmt(volume.data.sum())}")
    return EXIT_OK


def _cmd_mask(args) -> int:
    data = features.read_ftn(args.volume)
    if data.ndim != 3:
        raise FormatError(f"volume tensor must be 3-d, got {data.ndim}-d")
    volume = event_core.EventVolume(data.shape[1], data.shape[0], data.shape[2],
                                    data.astype(np.float64))
    dens = event_core.density_map(volume, args.patch)
    mask = event_core.activation_mask(dens, args.tau)
    features.write_ftn(args.out, mask.data.astype(np.float64))
    print(f"active {fmt(mask.active_fraction)}")
    return EXIT_OK


def _cmd_teacher(args) -> int:
    frame = synth_data.read_frame(args.image)
    spec = features.TeacherSpec(args.dim, args.seed, args.radius)
    grid = features.teacher_forward(spec, frame, args.patch)
    features.save_features(grid, args.out)
    print(f"grid {grid.grid_h}x{grid.grid_w}x{grid.dim}")
    return EXIT_OK


def _cmd_encode(args) -> int:
    ckpt = trainer.load_checkpoint(args.ckpt)
    stream = event_core.read_evt1(args.events)
    volume = event_core.voxelize(stream, ckpt.config.bins)
    grid = features.student_forward(ckpt.params, volume)
    features.save_features(grid, args.out)
    print(f"grid {grid.grid_h}x{grid.grid_w}x{grid.dim}")
    return EXIT_OK


def _cmd_simmap(args) -> int:
    parts = args.anchor.split(",")
    if len(parts) != 2:
        raise ParameterError(f"--anchor must be MU,NU, got {args.anchor!r}")
    try:
        mu, nu = int(parts[0]), int(parts[1])
    except ValueError:
        raise ParameterError(f"--anchor must be two integers, got {args.anchor!r}")
    grid = features.load_features(args.features)
    sims = features.similarity_map(grid, (mu, nu))
    # linear rescale [-1, 1] -> [0, 255]
    img = np.rint((sims + 1.0) * 127.5).astype(np.uint8)
    synth_data.write_pgm(args.out, img)
    print(f"anchor {mu},{nu}\tmin {fmt(sims.min())}\tmax {fmt(sims.max())}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    results = losses.gradcheck(args.loss, tokens=args.tokens, dim=args.dim,
                               seeds=args.seeds, h=args.h)
    worst = 0.0
    for r in results:
        print(f"{r.loss}\tmax_rel_err {fmt(r.max_rel_err)}\t"
              f"kinks {r.kink_count}\tchecked {r.checked}")
        worst = max(worst, r.max_rel_err)
    if worst >= 1e-5:
        print(f"FAIL: max relative error {fmt(worst)} >= 1e-05", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def _resolve_config(args) -> trainer.TrainConfig:
    if args.config:
        return trainer.read_config(args.config)
    if args.preset:
        return trainer.preset(args.preset)
    return trainer.TrainConfig()


def _cmd_pretrain(args) -> int:
    config = _resolve_config(args)
    if args.dump_config:
        sys.stdout.write(trainer.dump_config(config))
        return EXIT_OK
    if not args.data or not args.out:
        raise ParameterError("pretrain needs --data and --out (or --dump-config)")
    entries = synth_data.read_manifest(Path(args.data) / "manifest.txt")
    ckpt = trainer.pretrain(entries, config, out_path=args.out)
    if ckpt.loss_history.size:
        first, last = ckpt.loss_history[0, 3], ckpt.loss_history[-1, 3]
        print(f"steps {ckpt.step}\tinitial {fmt(first)}\tfinal {fmt(last)}")
    else:
        print(f"steps {ckpt.step}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    ckpt = trainer.load_checkpoint(args.ckpt)
    entries = synth_data.read_manifest(Path(args.data) / "manifest.txt")
    metrics = trainer.eval_structure_discrepancy(ckpt, entries)
    print(f"gram_err\t{fmt(metrics['gram_err'])}")
    print(f"l1_err\t{fmt(metrics['l1_err'])}")
    return EXIT_OK


def _probe_features(ckpt, entries):
    feats, labels = [], []
    for entry in entries:
        stream = event_core.read_evt1(entry.events)
        volume = event_core.voxelize(stream, ckpt.config.bins)
        feats.append(features.student_forward(ckpt.params, volume))
        lab = synth_data.read_labels(entry.labels)
        labels.append(probe.downsample_labels(lab, ckpt.config.patch))
    return feats, labels


def _cmd_probe(args) -> int:
    ckpt = trainer.load_checkpoint(args.ckpt)
    if args.random_init:
        cfg = ckpt.config
        ckpt = trainer.Checkpoint(
            features.StudentParams.init(cfg.patch, cfg.bins, cfg.hidden,
                                        cfg.dim, cfg.seed),
            cfg, ckpt.opt, 0, np.zeros((0, 4)))
    train_entries = synth_data.read_manifest(Path(args.data) / "manifest.txt")
    train_entries = probe.stride_subsample(train_entries, args.fraction)
    eval_dir = args.eval_data or args.data
    eval_entries = synth_data.read_manifest(Path(eval_dir) / "manifest.txt")

    fit_x, fit_y = _probe_features(ckpt, train_entries)
    ev_x, ev_y = _probe_features(ckpt, eval_entries)
    n_classes = max(int(l.data.max()) for l in fit_y + ev_y) + 1
    model = probe.fit_probe(fit_x, fit_y, alpha=args.alpha, n_classes=n_classes)
    preds = [model.predict(f) for f in ev_x]
    score = probe.miou_over_grids(preds, ev_y, n_classes)
    for c, iou in enumerate(score.per_class_iou):
        shown = "excluded" if np.isnan(iou) else fmt(iou)
        print(f"class_iou\t{c}\t{shown}")
    print(f"miou\t{fmt(score.miou)}")
    print(f"acc\t{fmt(score.acc)}")
    return EXIT_OK


@dataclass(frozen=True)
class FormatReport:
    checked: list[tuple[str, str]]  # (path, status), status "ok" or a reason

    @property
    def failures(self) -> list[tuple[str, str]]:
        return [(p, s) for p, s in self.checked if s != "ok"]


_ROUNDTRIPS = {
    ".evt1": lambda raw: event_core.evt1_bytes(event_core.parse_evt1(raw)),
    ".ftn": lambda raw: features.ftn_bytes(features.parse_ftn(raw)),
    ".ckp1": lambda raw: trainer.ckp1_bytes(trainer.parse_ckp1(raw)),
    ".ppm": lambda raw: synth_data.ppm_bytes(synth_data.parse_ppm(raw)),
    ".pgm": lambda raw: synth_data.pgm_bytes(synth_data.parse_pgm(raw)),
}


def formats_check(directory) -> FormatReport:
    """Parse and re-serialize every known container under ``directory``.

    A clean result means every file reproduces byte for byte.
    """
    root = Path(directory)
    if not root.is_dir():
        raise ParameterError(f"{directory} is not a directory")
    checked = []
    for path in sorted(root.rglob("*")):
        fn = _ROUNDTRIPS.get(path.suffix)
        if fn is None or not path.is_file():
            continue
        raw = path.read_bytes()
        try:
            again = fn(raw)
            status = "ok" if again == raw else "round-trip bytes differ"
        except FormatError as exc:
            status = str(exc)
        checked.append((str(path.relative_to(root)), status))
    return FormatReport(checked)


def _cmd_formats_check(args) -> int:
    report = formats_check(args.dir)
    for path, status in report.checked:
        print(f"{path}\t{status}")
    bad = report.failures
    if bad:
        print(f"{len(bad)} of {len(report.checked)} files failed", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


_HANDLERS = {
    "synth": _cmd_synth,
    "voxelize": _cmd_voxelize,
    "mask": _cmd_mask,
    "teacher": _cmd_teacher,
    "encode": _cmd_encode,
    "simmap": _cmd_simmap,
    "gradcheck": _cmd_gradcheck,
    "pretrain": _cmd_pretrain,
    "eval": _cmd_eval,
    "probe": _cmd_probe,
    "formats-check": _cmd_formats_check,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ParameterError, DimensionError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
