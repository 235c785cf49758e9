"""Command-line entry point.

Subcommands: phantom-gen, degrade, train-ld, train-sr, train-gan, eval.
Exit codes: 0 ok, 2 usage error, 3 data error, 4 numeric divergence.
Every run writes one ``run.json`` manifest into its output directory.
"""

import argparse
import dataclasses
import json
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from lfsr import kernels
from lfsr import models as Mo
from lfsr import training as Tr
from lfsr.baselines import bilinear_upsample
from lfsr.degradation import DegradationError, DegradeConfig, degrade
from lfsr.metrics import MetricError, format_table, psnr
from lfsr.phantom_io import (ContainerError, PhantomConfig, PhantomError, gen_phantom, is_validation,
                             load_dataset, sample_filename, save_sample, save_tensors, write_manifest)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
GRID_SCALES = (2, 4)
GRID_SIGMAS = (0.0, 20.0, 40.0)
MANIFEST = "run.json"
# files a command may own inside its output directory; --force clears only these
_OWNED = ("sample_*.lftb", "manifest.txt", "psnr.txt", "*.lftb", "*.json", "report*.txt", "checkpoint")


class CliError(Exception):
    def __init__(self, msg, code=EXIT_USAGE):
        super().__init__(msg)
        self.code = code


# ------------------------------------------------------------------ helpers

def _build_id():
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        git = rev.stdout.strip() if rev.returncode == 0 else "unknown"
    except (OSError, subprocess.SubprocessError):
        git = "unknown"
    from lfsr import __version__
    return {"version": __version__, "git": git, "kernels": kernels.BACKEND}


def _prepare_out(out, force=False, resume=False):
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise CliError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not resume:
        if not force:
            raise CliError(f"output directory {out} is not empty (use --force to overwrite)")
        for pattern in _OWNED:
            for p in out.glob(pattern):
                if p.is_dir():
                    shutil.rmtree(p)
                else:
                    p.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out, args, argv, config, outputs, t0, **extra):
    man = {
        "command": args.command,
        "argv": list(argv),
        "config": config,
        "build": _build_id(),
        "seed": getattr(args, "seed", None),
        "outputs": sorted(str(Path(p).relative_to(out)) if Path(p).is_relative_to(out) else str(p)
                          for p in outputs),
        "wall_time_s": round(time.time() - t0, 3),
    }
    man.update(extra)
    (Path(out) / MANIFEST).write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")


def _args_echo(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


def _load_samples(path):
    path = Path(path)
    if not (path / "manifest.txt").is_file():
        raise CliError(f"no dataset manifest in {path}", EXIT_DATA)
    samples = load_dataset(path)
    if not samples:
        raise CliError(f"dataset {path} is empty", EXIT_DATA)
    return samples


def _parse_value(raw, current, name):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise CliError(f"config key {name!r} expects a boolean, got {raw!r}")
    try:
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float) or current is None:
            return None if raw.lower() == "none" else float(raw)
    except ValueError:
        raise CliError(f"config key {name!r} expects a number, got {raw!r}") from None
    return raw


def read_config_file(path):
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    pairs = []
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliError(f"cannot read config file {path}: {e}", EXIT_DATA) from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def build_train_config(args):
    """TrainConfig from defaults, then the config file, then flags."""
    base = Tr.TrainConfig()
    values = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    weights = dataclasses.asdict(base.weights)
    pairs = read_config_file(args.config) if args.config else []
    pairs += [tuple(s.split("=", 1)) if "=" in s else (s, None) for s in args.set or []]
    for k, v in pairs:
        if v is None:
            raise CliError(f"--set expects key=value, got {k!r}")
        if k in weights:
            weights[k] = _parse_value(v, 0.0, k)
        elif k in values and k != "weights":
            values[k] = _parse_value(v, values[k], k)
        else:
            raise CliError(f"unknown config key {k!r}")
    for flag in ("scale", "sigma", "seed", "crop"):
        if getattr(args, flag, None) is not None:
            values[flag] = getattr(args, flag)
    if args.desk_scale is not None:
        values["desk_scale_factor"] = args.desk_scale
    values["weights"] = weights
    try:
        return Tr.TrainConfig(**values)
    except Tr.TrainingError as e:
        raise CliError(str(e)) from None


def _load_net(path, what):
    p = Path(path)
    if not p.is_file() or not p.with_suffix(".json").is_file():
        raise CliError(f"{what} {p} not found (need {p.name} and {p.with_suffix('.json').name})", EXIT_DATA)
    return Mo.load_network(p)


def _log(msg):
    print(msg, flush=True)


# ------------------------------------------------------------------ commands

def cmd_phantom_gen(args, argv):
    t0 = time.time()
    if args.n < 1:
        raise CliError("--n must be >= 1")
    try:
        cfg = PhantomConfig(image_size=args.size, n_samples=args.n, seed=args.seed)
    except PhantomError as e:
        raise CliError(str(e)) from None
    out = _prepare_out(args.out, args.force)
    samples, outputs = [], []
    for i in range(args.n):
        s = gen_phantom(cfg, i)
        outputs.append(save_sample(s, out))
        samples.append(s)
    write_manifest(samples, out)
    outputs.append(out / "manifest.txt")
    n_val = sum(is_validation(s.id) for s in samples)
    _log(f"wrote {args.n} phantoms ({args.size}x{args.size}, {n_val} validation) to {out}")
    _write_manifest(out, args, argv, dataclasses.asdict(cfg), outputs, t0)


def cmd_degrade(args, argv):
    t0 = time.time()
    samples = _load_samples(args.data)
    out = _prepare_out(args.out, args.force)
    try:
        dc = DegradeConfig(scale=args.scale, sigma=args.sigma, seed=args.seed, data_range=Tr.DATA_RANGE)
    except DegradationError as e:
        raise CliError(str(e)) from None
    lines, outputs, values = ["# id file psnr_bilinear_db"], [], []
    for s in samples:
        try:
            lr = degrade(s.hr, dc, s.id)
        except DegradationError as e:
            raise CliError(f"sample {s.id}: {e}", EXIT_DATA) from None
        path = out / sample_filename(s.id)
        save_tensors(path, {"lr": lr})
        outputs.append(path)
        value = psnr(bilinear_upsample(lr, args.scale), s.hr, Tr.DATA_RANGE)
        values.append(value)
        lines.append(f"{s.id} {path.name} {value:.4f}")
        _log(f"{path.name} {lr.shape[0]}x{lr.shape[1]} psnr(bilinear, hr) {value:.3f} dB")
    (out / "psnr.txt").write_text("\n".join(lines) + "\n")
    outputs.append(out / "psnr.txt")
    _log(f"mean psnr {np.mean(values):.3f} dB over {len(values)} files")
    _write_manifest(out, args, argv, dataclasses.asdict(dc), outputs, t0, mean_psnr_db=float(np.mean(values)))


def _train(args, argv, kind):
    t0 = time.time()
    cfg = build_train_config(args)
    samples = _load_samples(args.data)
    out = _prepare_out(args.out, args.force, resume=args.resume)
    ckpt = out / "checkpoint"
    if (ckpt / "meta.json").exists() and not args.resume:
        raise CliError(f"{ckpt} holds a checkpoint; pass --resume to continue it")
    common = dict(checkpoint_dir=ckpt, stop_after=args.stop_after, log=_log)
    ld = _load_net(args.ld, "detector") if getattr(args, "ld", None) else None
    _log(f"{kind}: {len(samples)} samples, config {cfg.hash()}")
    if kind == "ld":
        res = Tr.train_ld(cfg, samples, **common)
    elif kind == "srresnet":
        res = Tr.train_srresnet(cfg, samples, ld=ld, **common)
    else:
        pre = _load_net(args.pretrained, "pretrained generator") if args.pretrained else None
        res = Tr.train_gan(cfg, samples, pretrained_g=pre, ld=ld, **common)
    outputs = [ckpt / "state.lftb", ckpt / "meta.json"]
    if res.completed:
        for name, net in res.nets.items():
            Mo.save_network(net, out / f"{name}.lftb")
            outputs += [out / f"{name}.lftb", out / f"{name}.json"]
    (out / "curves.json").write_text(json.dumps(res.curves) + "\n")
    outputs.append(out / "curves.json")
    status = "complete" if res.completed else f"stopped after epoch {res.epochs_done}; rerun with --resume"
    _log(f"{kind}: {status}")
    _write_manifest(out, args, argv, cfg.to_dict(), outputs, t0, config_hash=cfg.hash(),
                    epochs_done=res.epochs_done, completed=res.completed)


def _parse_models(entries):
    models = {}
    for e in entries or []:
        key, sep, path = e.partition("=")
        method, at, scale = key.partition("@")
        if not sep or not at:
            raise CliError(f"--models expects METHOD@SCALE=PATH, got {e!r}")
        if method not in Tr.METHODS or method == "B+NLD":
            raise CliError(f"unknown learned method {method!r}; choose from SRResNet, GAN, LFSR")
        models[(method, int(scale))] = _load_net(path, f"{method} model")
    return models


def _parse_lds(entries):
    lds = {}
    for e in entries or []:
        scale, sep, path = e.partition("=")
        if not sep:
            raise CliError(f"--ld expects SCALE=PATH, got {e!r}")
        lds[int(scale)] = _load_net(path, "detector")
    return lds


def cmd_eval(args, argv):
    t0 = time.time()
    models, lds = _parse_models(args.models), _parse_lds(args.ld)
    if args.grid:
        methods, scales, sigmas = Tr.METHODS, GRID_SCALES, GRID_SIGMAS
    else:
        methods = tuple(args.methods.split(",")) if args.methods else tuple(sorted({m for m, _ in models}))
        scales = tuple(int(s) for s in args.scales.split(","))
        sigmas = tuple(float(s) for s in args.sigmas.split(","))
        for m in methods:
            if m not in Tr.METHODS:
                raise CliError(f"unknown method {m!r}")
    configs = [(sc, sg) for sc in scales for sg in sigmas]
    for m in methods:
        for sc in scales:
            if m != "B+NLD" and (m, sc) not in models:
                raise CliError(f"no model for {m} at scale {sc}; pass --models {m}@{sc}=PATH")
    samples = _load_samples(args.data)
    if args.split == "val":
        samples = [s for s in samples if is_validation(s.id)]
        if not samples:
            raise CliError("dataset has no validation samples (use --split all)", EXIT_DATA)
    report = Path(args.report)
    out = report.parent if str(report.parent) else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    if report.exists() and not args.force:
        raise CliError(f"report {report} exists (use --force to overwrite)")
    try:
        reports = Tr.evaluate_suite(methods, samples, configs, models, lds, roi_size=args.roi_size, seed=args.seed)
    except Tr.TrainingError as e:
        raise CliError(str(e)) from None
    table = format_table(reports)
    report.write_text(table)
    records = report.with_suffix(".json")
    records.write_text(json.dumps([r.to_record() for r in reports], indent=1) + "\n")
    sys.stdout.write(table)
    _write_manifest(out, args, argv, _args_echo(args), [report, records], t0, n_samples=len(samples))


# ------------------------------------------------------------------ parser

def _train_parser(sub, name, help_):
    p = sub.add_parser(name, help=help_)
    p.add_argument("--data", required=True, help="phantom dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="file of key=value lines (TrainConfig fields, w_mse, w_vgg, w_adv)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--desk-scale", type=int, help="divide every epoch count by this factor")
    p.add_argument("--scale", type=int, choices=(2, 4))
    p.add_argument("--sigma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint")
    p.add_argument("--stop-after", type=int, metavar="EPOCHS", help="checkpoint and stop after this many epochs")
    p.add_argument("--force", action="store_true")
    return p


def build_parser():
    ap = argparse.ArgumentParser(prog="lfsr", description="Lesion-focused super-resolution on synthetic MRI phantoms")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a synthetic lesion phantom dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=128, help="image size, a power of two")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("degrade", help="simulate LR acquisitions by k-space truncation and noise")
    p.add_argument("--data", required=True)
    p.add_argument("--scale", type=int, choices=(2, 4), required=True)
    p.add_argument("--sigma", type=float, choices=GRID_SIGMAS, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_degrade)

    p = _train_parser(sub, "train-ld", "train the lesion detector")
    p.set_defaults(func=lambda a, v: _train(a, v, "ld"), crop=None)

    p = _train_parser(sub, "train-sr", "train the SRResNet generator with pixel MSE")
    p.add_argument("--crop", choices=("random", "roi", "whole"))
    p.add_argument("--ld", help="detector for ROI crops (ground-truth boxes when omitted)")
    p.set_defaults(func=lambda a, v: _train(a, v, "srresnet"))

    p = _train_parser(sub, "train-gan", "MSE pretraining then adversarial training")
    p.add_argument("--crop", choices=("random", "roi", "whole"))
    p.add_argument("--ld", help="detector for ROI crops (ground-truth boxes when omitted)")
    p.add_argument("--pretrained", help="generator to start from; skips the pretraining phase")
    p.set_defaults(func=lambda a, v: _train(a, v, "gan"))

    p = sub.add_parser("eval", help="PSNR/SSIM/detection grid over methods, scales and noise levels")
    p.add_argument("--data", required=True)
    p.add_argument("--models", nargs="*", default=[], metavar="METHOD@SCALE=PATH")
    p.add_argument("--ld", nargs="*", default=[], metavar="SCALE=PATH")
    p.add_argument("--grid", action="store_true", help="all 4 methods x scales 2,4 x sigma 0,20,40")
    p.add_argument("--methods", help="comma list (ignored with --grid)")
    p.add_argument("--scales", default="2")
    p.add_argument("--sigmas", default="0")
    p.add_argument("--split", choices=("val", "all"), default="val")
    p.add_argument("--roi-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True, help="report table path; records go to the .json sibling")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        args.func(args, argv)
    except CliError as e:
        print(f"lfsr {args.command}: error: {e}", file=sys.stderr)
        return e.code
    except Tr.DivergenceError as e:
        print(f"lfsr {args.command}: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except Tr.TrainingError as e:
        print(f"lfsr {args.command}: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ContainerError, PhantomError, DegradationError, MetricError, Mo.ModelError, OSError) as e:
        print(f"lfsr {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
