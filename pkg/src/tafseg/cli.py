"""``tafseg`` command line: gen-data, train, eval, ablate, report.

Exit codes: 0 success, 2 config error, 3 data or checkpoint error,
4 numerical abort. ``TAF_SEED`` supplies the default seed. Relative paths
are resolved against ``--workdir``.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import warnings

from . import tnsr
from .config import ConfigError, build_train_config, format_config, load_config, with_overrides
from .data import DatasetError, GenParams, gen_dataset, read_dataset, write_dataset
from .engine import TrainingAborted, evaluate, train
from .experiments import DEFAULT_SWEEPS, MIN_SEEDS, STUDIES, RunStore, write_log
from .model import CheckpointError, load_checkpoint
from .report import read_results, write_report

log = logging.getLogger("tafseg")

EXIT_CONFIG, EXIT_DATA, EXIT_ABORT = 2, 3, 4
VAL_SEED_OFFSET = 1_000_000


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _default_seed() -> int:
    env = os.environ.get("TAF_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CLIError(f"TAF_SEED must be an integer, got {env!r}", EXIT_CONFIG) from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


class Paths:
    def __init__(self, workdir: str):
        self.workdir = workdir

    def __call__(self, p):
        return None if p is None else os.path.join(self.workdir, os.path.expanduser(p))


def _check_empty(path: str, force: bool) -> None:
    if os.path.isdir(path) and os.listdir(path):
        if not force:
            raise CLIError(f"{path} exists and is not empty (use --force to overwrite)", EXIT_CONFIG)
        shutil.rmtree(path)


def _splits(path: str):
    """``path`` is either a split directory or a root holding ``train/`` and ``val/``."""
    if os.path.exists(os.path.join(path, "train", "manifest.txt")):
        val = os.path.join(path, "val")
        return read_dataset(os.path.join(path, "train")), (read_dataset(val) if os.path.isdir(val) else None)
    return read_dataset(path), None


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(args, paths: Paths) -> int:
    out = paths(args.out)
    seed = _default_seed() if args.seed is None else args.seed
    try:
        params = GenParams(size=args.size, num_classes=args.classes, half_len=args.half_len)
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from None
    val_clips = args.clips // 2 if args.val_clips is None else args.val_clips
    if args.clips < 1 or val_clips < 0:
        raise CLIError("--clips must be >= 1 and --val-clips >= 0", EXIT_CONFIG)
    _check_empty(out, args.force)
    for name, n, base in (("train", args.clips, seed), ("val", val_clips, seed + VAL_SEED_OFFSET)):
        if n == 0:
            continue
        write_dataset(gen_dataset(n, params, seed=base), os.path.join(out, name))
        print(f"{name}: {n} clips x {params.n_frames} frames, {params.size}x{params.size}, "
              f"{params.num_classes} classes, seeds {base}..{base + n - 1} -> {os.path.join(out, name)}")
    return 0


def _train_config(args):
    values = load_config(args.config_path) if args.config_path else {}
    overrides = {
        "mode": args.mode, "seed": args.seed, "width": args.width, "max_epoch": args.max_epoch,
        "init_lr": args.lr, "batch_size": args.batch_size, "arch": args.arch,
        "taf.lambda": args.lam, "taf.n_h": args.n_h, "protocol": args.protocol,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    if args.rates is not None:
        values["taf.rates"] = tuple(args.rates)
    if "seed" not in values:
        values["seed"] = _default_seed()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cfg = build_train_config(values)
    for w in caught:
        log.warning("%s", w.message)
    return cfg


def cmd_train(args, paths: Paths) -> int:
    args.config_path = paths(args.config)
    cfg = _train_config(args)
    train_ds, val_ds = _splits(paths(args.data))
    if args.val:
        val_ds = read_dataset(paths(args.val))
    out = paths(args.out)
    _check_empty(out, args.force)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
    res = train(cfg, train_ds, val_ds, checkpoint_dir=out)
    write_log(res.log, os.path.join(out, "log.csv"))
    last = res.log[-1]
    print(f"trained {cfg.arch} mode={cfg.mode} seed={cfg.seed}: {len(res.log)} steps, "
          f"final ce={last['ce']:.4f} total={last['total']:.4f}")
    if val_ds is not None:
        print(f"best val miou={res.best_miou:.4f}")
    print(f"checkpoints: {os.path.join(out, 'final')} {os.path.join(out, 'best')}")
    return 0


def _checkpoint_dir(path: str) -> str:
    return os.path.join(path, "final") if os.path.isdir(os.path.join(path, "final")) else path


def cmd_eval(args, paths: Paths) -> int:
    model = load_checkpoint(_checkpoint_dir(paths(args.ckpt)))
    data = paths(args.data)
    ds = _splits(data)[1 if args.split == "val" else 0] if os.path.isdir(os.path.join(data, "train")) \
        else read_dataset(data)
    if ds is None:
        raise CLIError(f"{data} has no {args.split} split", EXIT_DATA)
    swap = None
    if args.swap_offset is not None or args.swap_branch is not None:
        swap = (1 if args.swap_branch is None else args.swap_branch, args.swap_offset or 0)
        if not 1 <= swap[0] <= model.m:
            raise CLIError(f"--swap-branch must be in 1..{model.m}", EXIT_CONFIG)
    try:
        m = evaluate(model, ds, swap_spec=swap)
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from None
    lines = ["class,iou"] + [f"{k},{v!r}" for k, v in enumerate(m.per_class_iou.tolist())]
    summary = f"# miou={m.miou!r} pixel_acc={m.pixel_acc!r} clips={len(ds)}"
    if swap is not None:
        summary += f" swap_branch={swap[0]} swap_offset={swap[1]}"
    text = "\n".join(lines + [summary]) + "\n"
    if args.out:
        with open(paths(args.out), "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_ablate(args, paths: Paths) -> int:
    kind = args.kind
    args.config_path = paths(args.config)
    base = _train_config(args)
    default = _default_seed()
    seeds = args.seeds if args.seeds is not None else [default + k for k in range(MIN_SEEDS[kind])]
    sweep = args.sweep if args.sweep is not None else DEFAULT_SWEEPS[kind]
    if not sweep:
        raise CLIError("sweep must not be empty", EXIT_CONFIG)
    if not (kind == "class-rate" and args.gt) and len(seeds) < MIN_SEEDS[kind]:
        raise CLIError(f"{kind} compares accuracy across runs and needs >= {MIN_SEEDS[kind]} seeds", EXIT_CONFIG)
    train_ds, val_ds = _splits(paths(args.data))
    if args.val:
        val_ds = read_dataset(paths(args.val))
    if val_ds is None:
        raise CLIError("ablations need a held-out split (data root with val/ or --val)", EXIT_DATA)
    store = RunStore(paths(args.cache), train_ds, val_ds, jobs=args.jobs)
    kw = {}
    if kind == "swap-curve":
        kw["branch"] = args.branch
    if kind == "class-rate":
        kw["gt"] = args.gt
    if kind == "attenuate" and args.sweep is None:
        sweep = [args.branch]
    if kind == "change-rate" and base.mode == "baseline":
        base = with_overrides(base, mode="taf")
    rows = STUDIES[kind](store, base, seeds, sweep, **kw)

    out = paths(args.out)
    os.makedirs(out, exist_ok=True)
    _archive_configs(store, out)
    paths_out = _report(kind, rows, out, args.gnuplot, not args.no_plot)
    print(f"{kind}: {len(rows)} rows -> {paths_out['results']}")
    with open(paths_out["summary"], encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return 0


def _archive_configs(store: RunStore, out: str) -> None:
    """Copy every cached run's config beside the CSV, named by run key."""
    dest = os.path.join(out, "configs")
    os.makedirs(dest, exist_ok=True)
    for key in sorted(store.used):
        src = os.path.join(store.root, "runs", key, "config.txt")
        if os.path.exists(src):
            shutil.copyfile(src, os.path.join(dest, f"{key}.txt"))


def _report(kind, rows, out, gnuplot, plot):
    try:
        return write_report(kind, rows, out, gnuplot=gnuplot, plot=plot)
    except ImportError:
        log.warning("matplotlib not installed; skipping the PNG (install artifact[plot])")
        return write_report(kind, rows, out, gnuplot=gnuplot, plot=False)


def cmd_report(args, paths: Paths) -> int:
    rows = read_results(paths(args.results))
    out = paths(args.out) if args.out else os.path.dirname(paths(args.results))
    p = _report(args.kind, rows, out, args.gnuplot, not args.no_plot)
    print(" ".join(p.values()))
    return 0


# -- parser -----------------------------------------------------------------------


def _add_train_flags(p) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--mode", choices=("baseline", "taf"))
    p.add_argument("--seed", type=int)
    p.add_argument("--arch", choices=("MicroFCN", "MicroASPP"))
    p.add_argument("--width", type=int)
    p.add_argument("--max-epoch", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda", dest="lam", type=float, help="regularizer weight")
    p.add_argument("--n-h", type=int, help="temporal context half-length")
    p.add_argument("--rates", type=_float_list, help="per-branch change rates, e.g. 1e-4,inf,inf")
    p.add_argument("--protocol", choices=("matched_epochs", "half_batch"),
                   help="half_batch: half-labelled TAF mini-batches, twice the steps")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tafseg", description="Temporally-adaptive feature training on MovingShapes.")
    ap.add_argument("--workdir", default=".", help="base for relative paths")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate train/val MovingShapes splits")
    g.add_argument("--out", required=True)
    g.add_argument("--clips", type=int, default=200, help="training clips")
    g.add_argument("--val-clips", type=int, help="held-out clips (default clips/2)")
    g.add_argument("--half-len", type=int, default=15)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", required=True, help="split directory or root with train/ and val/")
    t.add_argument("--val", help="held-out split for best-checkpoint selection")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--force", action="store_true")
    _add_train_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on key frames")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val"), default="val", help="split when --data is a root")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--swap-branch", type=int)
    e.add_argument("--swap-offset", type=int)
    e.add_argument("--out", help="also write the metrics CSV here")

    a = sub.add_parser("ablate", help="run one ablation study")
    a.add_argument("kind", choices=sorted(STUDIES))
    a.add_argument("--data", required=True)
    a.add_argument("--val")
    a.add_argument("--out", required=True, help="directory for results.csv, summary.csv, configs/")
    a.add_argument("--cache", default="runs-cache", help="trained-run cache shared between ablations")
    a.add_argument("--seeds", type=_int_list)
    a.add_argument("--sweep", type=_float_list)
    a.add_argument("--branch", type=int, default=1)
    a.add_argument("--gt", action="store_true", help="class-rate: score synthetic ground truth")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--gnuplot", action="store_true", help="also write a gnuplot script")
    a.add_argument("--no-plot", action="store_true", help="skip the matplotlib PNG")
    _add_train_flags(a)

    r = sub.add_parser("report", help="re-render summary and figures from results.csv")
    r.add_argument("kind", choices=sorted(STUDIES))
    r.add_argument("--results", required=True)
    r.add_argument("--out")
    r.add_argument("--gnuplot", action="store_true")
    r.add_argument("--no-plot", action="store_true")
    return ap


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args, Paths(args.workdir))
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, tnsr.TnsrError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingAborted as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
