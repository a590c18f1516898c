"""``dmrf`` command line.

Every run writes a ``key=value`` manifest next to its outputs; feeding that
file back through ``--config`` (or ``dmrf --config run.manifest`` with no
subcommand) repeats the run exactly. Explicit flags override config keys.

Exit status: 0 ok, 1 data error, 2 usage error, 3 diagnostic failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .numerics import RngStream
from .training import CheckpointError, TrainConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("dmrf")

EXIT_DATA, EXIT_USAGE, EXIT_DIAG = 1, 2, 3

SUBCOMMANDS = ("train-texture", "synth", "make-sr-data", "train-sr", "sr", "eval-psnr", "diagnose")
_META = {"config", "manifest", "subcommand", "verbose"}
_IMAGE_EXT = {".pgm", ".ppm", ".pnm", ".png"}


class UsageError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        h, w = int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def _opt_float(text):
    return None if str(text).lower() in ("", "none") else float(text)


def _default_threads() -> int:
    env = os.environ.get("DMRF_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _add_train_overrides(p: argparse.ArgumentParser, cfg: TrainConfig) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--patch-size", type=int, default=cfg.patch_size)
    g.add_argument("--batch-size", type=int, default=cfg.batch_size)
    g.add_argument("--epochs", type=int, default=cfg.epochs)
    g.add_argument("--steps-per-epoch", type=int, default=cfg.steps_per_epoch)
    g.add_argument("--learning-rate", "--lr", type=float, default=cfg.learning_rate)
    g.add_argument("--rms-decay", type=float, default=cfg.rms_decay)
    g.add_argument("--momentum", type=float, default=cfg.momentum)
    g.add_argument("--epsilon", type=float, default=cfg.epsilon)
    g.add_argument("--n-cycles", type=int, default=cfg.n_cycles)
    g.add_argument("--K", type=int, default=cfg.K, dest="K")
    g.add_argument("--d", type=int, default=cfg.d, dest="d")
    g.add_argument("--kind", choices=("sigmoid", "relu"), default=cfg.kind)
    g.add_argument("--clip-norm", type=float, default=cfg.clip_norm,
                   help="global gradient-norm clip; <= 0 disables")
    g.add_argument("--checkpoint-every", type=int, default=cfg.checkpoint_every)
    g.add_argument("--history", help="loss history CSV (epoch, step, loss)")
    g.add_argument("--resume", help="checkpoint to continue from")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file (a run manifest works)")
    common.add_argument("--manifest", help="where to write the run manifest")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=_default_threads())
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="dmrf", description="Deep MRF image modelling")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", dest="top_config", help="replay a run manifest")
    sub = parser.add_subparsers(dest="subcommand")

    p = sub.add_parser("train-texture", parents=[common], help="fit a texture model")
    p.add_argument("--input", required=True, help="sample texture image")
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_train_overrides(p, TrainConfig.for_texture())

    p = sub.add_parser("synth", parents=[common], help="sample a texture")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--size", type=_size, default=(64, 64))
    p.add_argument("--refine", type=int, default=0, help="refinement cycles after sampling")
    p.add_argument("--out", required=True)

    p = sub.add_parser("make-sr-data", parents=[common], help="build low/high-res luminance pairs")
    p.add_argument("--input", required=True, help="directory (or single file) of high-res images")
    p.add_argument("--factor", type=int, choices=(2, 3, 4), required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train-sr", parents=[common], help="fit a super-resolution model")
    p.add_argument("--data", required=True, help="directory written by make-sr-data")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--fixed-var", type=_opt_float, default=0.01)
    _add_train_overrides(p, TrainConfig.for_sr())

    p = sub.add_parser("sr", parents=[common], help="super-resolve an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="low-res image (grey or colour)")
    p.add_argument("--factor", type=int, choices=(2, 3, 4), default=None,
                   help="defaults to the checkpoint's factor")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-psnr", parents=[common], help="PSNR report")
    p.add_argument("--ref", help="reference image (pair mode)")
    p.add_argument("--test", help="test image (pair mode)")
    p.add_argument("--shave", type=int, default=0)
    p.add_argument("--hires", help="directory of high-res images (benchmark mode)")
    p.add_argument("--factor", type=int, choices=(2, 3, 4), default=None)
    p.add_argument("--ckpt", help="SR checkpoint to score alongside bicubic")
    p.add_argument("--csv", required=True, help="output CSV (image, factor, method, psnr_db)")

    p = sub.add_parser("diagnose", parents=[common], help="verification checks")
    p.add_argument("check", choices=("gradcheck", "eta-sigma", "map-opt", "posterior-sim", "all"))
    p.add_argument("--out-dir", help="write CSV reports here")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--scale", type=float, default=0.1)
    return parser


# --- config files and manifests ------------------------------------------------------------


def read_kv(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _subparser(parser, name) -> argparse.ArgumentParser:
    for act in parser._subparsers._group_actions:
        if isinstance(act, argparse._SubParsersAction):
            return act.choices[name]
    raise KeyError(name)


def _apply_config(sp: argparse.ArgumentParser, cfg: dict[str, str]) -> None:
    actions = {a.dest: a for a in sp._actions if a.dest not in ("help",)}
    defaults = {}
    for key, raw in cfg.items():
        if key.startswith("version.") or key == "subcommand":
            continue
        dest = key.replace("-", "_")
        if dest in _META or dest not in actions:
            raise UsageError(f"unknown config key {key!r}")
        act = actions[dest]
        if raw == "None":
            val = None
        elif isinstance(act, argparse._CountAction):
            val = int(raw)
        elif dest == "size":
            val = _size(raw)
        elif act.type is not None:
            val = act.type(raw)
        else:
            val = raw
        if act.choices is not None and val is not None and val not in act.choices:
            raise UsageError(f"config {key}={raw!r} not in {sorted(act.choices)}")
        defaults[dest] = val
        act.required = False
        if not act.option_strings:
            act.nargs = "?"
            act.default = val
    sp.set_defaults(**defaults)


def _fmt_value(v) -> str:
    if isinstance(v, tuple):
        return "x".join(str(i) for i in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_manifest(path, args: argparse.Namespace) -> None:
    lines = [f"subcommand={args.subcommand}"]
    for k in sorted(vars(args)):
        if k in _META or k in ("top_config", "threads"):
            continue
        lines.append(f"{k}={_fmt_value(getattr(args, k))}")
    lines.append(f"threads={args.threads}")
    lines += [
        f"version.deepmrf={__version__}",
        f"version.numpy={np.__version__}",
        f"version.python={platform.python_version()}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def _manifest_path(args, default: Path) -> Path:
    return Path(args.manifest) if args.manifest else default


def _require_file(parser, path, what):
    if path is None or not Path(path).is_file():
        parser.error(f"{what} not found: {path}")


def _train_config(args, base: TrainConfig) -> TrainConfig:
    kw = {n: getattr(args, n) for n in TrainConfig.field_names() if hasattr(args, n)}
    return TrainConfig(**{**vars(base), **kw})


def _list_images(path) -> list[Path]:
    p = Path(path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise FileNotFoundError(f"no such file or directory: {p}")
    files = sorted(f for f in p.iterdir() if f.suffix.lower() in _IMAGE_EXT)
    if not files:
        raise FileNotFoundError(f"no images in {p}")
    return files


# --- subcommands ----------------------------------------------------------------------


def cmd_train_texture(args, sp):
    from .tasks import read_image, train_texture

    _require_file(sp, args.input, "input image")
    if args.resume:
        _require_file(sp, args.resume, "resume checkpoint")
    cfg = _train_config(args, TrainConfig.for_texture())
    img = read_image(args.input)
    resume = load_checkpoint(args.resume) if args.resume else None
    res = train_texture(img, cfg, ckpt_path=args.out, resume=resume, history_csv=args.history)
    save_checkpoint(res.checkpoint, args.out)
    write_manifest(_manifest_path(args, Path(args.out + ".manifest")), args)
    log.info("final epoch loss %s", res.epoch_losses[-1] if res.epoch_losses else "n/a")
    return 0


def cmd_synth(args, sp):
    from .tasks import synthesize_texture, write_image

    _require_file(sp, args.ckpt, "checkpoint")
    ck = load_checkpoint(args.ckpt)
    img = synthesize_texture(ck, args.size, RngStream(args.seed), refine_cycles=args.refine)
    write_image(args.out, img)
    Path(args.out + ".seed.txt").write_text(f"seed={args.seed}\n")
    write_manifest(_manifest_path(args, Path(args.out + ".manifest")), args)
    return 0


def cmd_make_sr_data(args, sp):
    from .tasks import make_sr_dataset, read_image, write_image

    files = _list_images(args.input)
    data = make_sr_dataset([read_image(f) for f in files], args.factor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "index.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["name", "factor", "hr", "lr", "lr_up"])
        for src, ex in zip(files, data):
            stem = src.stem
            write_image(out / f"{stem}_hr.pgm", ex.target)
            write_image(out / f"{stem}_lr.pgm", ex.lowres)
            write_image(out / f"{stem}_up.pgm", ex.lowres_up)
            w.writerow([stem, args.factor, f"{stem}_hr.pgm", f"{stem}_lr.pgm", f"{stem}_up.pgm"])
    write_manifest(_manifest_path(args, out / "run.manifest"), args)
    return 0


def _load_sr_dir(path):
    from .tasks import SrExample, read_image

    root = Path(path)
    index = root / "index.csv"
    if not index.is_file():
        raise FileNotFoundError(f"{index} missing; run make-sr-data first")
    out = []
    with open(index, newline="") as f:
        for row in csv.DictReader(f):
            fac = int(row["factor"])
            out.append(SrExample(read_image(root / row["lr_up"]), read_image(root / row["hr"]),
                                 fac, read_image(root / row["lr"]), fac))
    if not out:
        raise ValueError(f"{index} lists no examples")
    return out


def cmd_train_sr(args, sp):
    from .tasks import train_sr

    if not Path(args.data).is_dir():
        sp.error(f"data directory not found: {args.data}")
    if args.resume:
        _require_file(sp, args.resume, "resume checkpoint")
    data = _load_sr_dir(args.data)
    factors = {ex.factor for ex in data}
    if len(factors) != 1:
        raise ValueError(f"mixed upscale factors in {args.data}: {sorted(factors)}")
    cfg = _train_config(args, TrainConfig.for_sr(sr_factor=factors.pop()))
    resume = load_checkpoint(args.resume) if args.resume else None
    res = train_sr(data, cfg, ckpt_path=args.out, resume=resume, history_csv=args.history)
    save_checkpoint(res.checkpoint, args.out)
    write_manifest(_manifest_path(args, Path(args.out + ".manifest")), args)
    return 0


def cmd_sr(args, sp):
    from .tasks import read_image, super_resolve, write_image

    _require_file(sp, args.ckpt, "checkpoint")
    _require_file(sp, args.input, "input image")
    ck = load_checkpoint(args.ckpt)
    factor = args.factor or ck.sr_factor
    if not factor:
        sp.error("checkpoint records no upscale factor; pass --factor")
    out = super_resolve(ck, read_image(args.input), factor)
    write_image(args.out, out)
    write_manifest(_manifest_path(args, Path(args.out + ".manifest")), args)
    return 0


def cmd_eval_psnr(args, sp):
    from .tasks import evaluate_sr, psnr, read_image
    from .tasks.color import luminance

    rows = []
    if args.hires:
        if not args.factor:
            sp.error("--hires needs --factor")
        ck = None
        if args.ckpt:
            _require_file(sp, args.ckpt, "checkpoint")
            ck = load_checkpoint(args.ckpt)
        files = _list_images(args.hires)
        reports = evaluate_sr([read_image(f) for f in files], args.factor, ck, [f.stem for f in files])
        for method, rep in reports.items():
            for name, v in zip(rep.names, rep.values):
                rows.append([name, args.factor, method, v])
            rows.append(["mean", args.factor, method, rep.mean])
    elif args.ref and args.test:
        _require_file(sp, args.ref, "reference image")
        _require_file(sp, args.test, "test image")
        v = psnr(luminance(read_image(args.ref)), luminance(read_image(args.test)), args.shave)
        rows.append([Path(args.test).stem, args.factor or "", "pair", v])
    else:
        sp.error("give either --ref/--test or --hires/--factor")
    with open(args.csv, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["image", "factor", "method", "psnr_db"])
        for r in rows:
            w.writerow(r[:3] + [repr(float(r[3]))])
    for r in rows:
        print(f"{r[0]:>12} x{r[1]} {r[2]:>8} {float(r[3]):.3f} dB")
    write_manifest(_manifest_path(args, Path(args.csv + ".manifest")), args)
    return 0


def cmd_diagnose(args, sp):
    from . import diagnostics as dg

    reports = []
    want = args.check
    if want in ("gradcheck", "all"):
        for kind in ("sigmoid", "relu"):
            for cond in (False, True):
                reports.append(dg.grad_check(kind, cond, seed=args.seed))
    if want in ("eta-sigma", "all"):
        reports += [dg.eta_sigma_check(k) for k in ("sigmoid", "relu")]
    if want in ("map-opt", "all"):
        trials = args.trials or 200
        reports += [dg.map_optimality_check(k, trials=trials, seed=args.seed) for k in ("sigmoid", "relu")]
    if want in ("posterior-sim", "all"):
        trials = args.trials or 1000
        reports.append(dg.posterior_approx_sim(trials=trials, scale=args.scale, seed=args.seed))
        reports.append(dg.zeta_sweep(trials=min(trials, 300), scale=args.scale, seed=args.seed))
    for r in reports:
        print(r.summary())
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r in reports:
            safe = "".join(ch if ch.isalnum() else "_" for ch in r.name).strip("_")
            r.to_csv(out / f"{safe}.csv")
        with open(out / "summary.txt", "w") as f:
            f.write("\n".join(r.summary() for r in reports) + "\n")
        write_manifest(_manifest_path(args, out / "run.manifest"), args)
    return 0 if all(r.passed for r in reports) else EXIT_DIAG


COMMANDS = {
    "train-texture": cmd_train_texture,
    "synth": cmd_synth,
    "make-sr-data": cmd_make_sr_data,
    "train-sr": cmd_train_sr,
    "sr": cmd_sr,
    "eval-psnr": cmd_eval_psnr,
    "diagnose": cmd_diagnose,
}


def _scan_option(argv, flag):
    """Value of ``flag`` in ``argv`` (``--flag v`` or ``--flag=v``) without full parsing."""
    for i, a in enumerate(argv):
        if a == flag and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith(flag + "="):
            return a.split("=", 1)[1]
    return None


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pos = next((i for i, a in enumerate(argv) if a in SUBCOMMANDS), None)
        if pos is None:
            top = _scan_option(argv, "--config")
            if top is None:
                # --help/--version/bad subcommand are all reported by argparse
                parser.parse_args(argv)
                parser.print_usage(sys.stderr)
                return EXIT_USAGE
            if not Path(top).is_file():
                parser.error(f"config file not found: {top}")
            cfg = read_kv(top)
            if cfg.get("subcommand") not in SUBCOMMANDS:
                parser.error(f"{top} names no valid subcommand")
            rest = [a for a in argv if a not in ("--config", top, f"--config={top}")]
            argv = [cfg["subcommand"], "--config", top] + rest
            pos = 0
        sp = _subparser(parser, argv[pos])
        config = _scan_option(argv[pos + 1:], "--config")
        if config is not None:
            if not Path(config).is_file():
                sp.error(f"config file not found: {config}")
            _apply_config(sp, read_kv(config))
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"dmrf: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE

    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.subcommand](args, sp)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    except (CheckpointError, OSError, ValueError) as e:
        print(f"dmrf: error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
