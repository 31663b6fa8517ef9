"""Command-line entry point: ``hran train|infer|eval|degrade|params``.

Exit codes: 0 ok, 2 configuration, 3 data, 4 numerical abort, 5 partial
evaluation. Diagnostics are one line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint
from .data import (
    PairedDataset,
    bicubic_resize,
    crop_to_multiple,
    degrade,
    list_images,
    load_image,
    save_image,
    to_float,
    to_u8,
)
from .errors import ConfigError, DataError, HRANError
from .metrics import evaluate, self_ensemble
from .model import HRAN, ModelConfig, param_breakdown, param_count
from .train import TrainConfig, train_loop

EXIT_PARTIAL = 5

MODEL_KEYS = ("scale", "channels", "rg_count", "hrab_per_rg", "ca_reduction", "leaky_slope", "fusion_mode")
TRAIN_KEYS = ("batch", "patch", "lr0", "halve_every", "max_iters", "beta1", "beta2", "eps", "seed",
              "checkpoint_every", "log_every", "window")
PATH_KEYS = ("dataset", "lr_dir", "manifest", "out_dir", "resume")
RUN_KEYS = MODEL_KEYS + TRAIN_KEYS + PATH_KEYS + ("threads",)


def _field_types():
    types = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    types.update({f.name: f.type for f in dataclasses.fields(TrainConfig)})
    types.update({k: "str" for k in PATH_KEYS})
    types["threads"] = "int"
    names = {"int": int, "float": float, "str": str}
    return {k: names[getattr(types[k], "__name__", types[k])] for k in RUN_KEYS}


FIELD_TYPES = _field_types()


def read_config(path) -> dict[str, str]:
    """Parse a flat ``key = value`` file. ``#`` starts a comment."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        if key not in FIELD_TYPES:
            raise ConfigError(f"{path}:{n}: unknown key '{key}'")
        out[key] = value.strip()
    return out


def _coerce(key: str, value) -> object:
    kind = FIELD_TYPES[key]
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None


def resolve(file_values: dict, flag_values: dict) -> dict:
    """Merge config-file values with flag overrides (flags win), typed."""
    merged = {k: _coerce(k, v) for k, v in file_values.items()}
    merged.update({k: _coerce(k, v) for k, v in flag_values.items() if v is not None})
    return merged


def build_configs(values: dict) -> tuple[ModelConfig, TrainConfig]:
    cfg = ModelConfig(**{k: values[k] for k in MODEL_KEYS if k in values})
    tcfg = TrainConfig(**{k: values[k] for k in TRAIN_KEYS if k in values})
    return cfg, tcfg


def _add_run_flags(p: argparse.ArgumentParser, keys) -> None:
    for key in keys:
        if key == "threads":
            continue
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar=key.upper(),
                       help=f"override '{key}' ({FIELD_TYPES[key].__name__})")


def _apply_threads(n) -> None:
    if n is not None:
        if int(n) < 1:
            raise ConfigError(f"threads must be positive, got {n}")
        T.set_num_threads(int(n))


# -- train ------------------------------------------------------------------------


def cmd_train(args) -> int:
    values = resolve(read_config(args.config) if args.config else {},
                     {k: getattr(args, k) for k in RUN_KEYS if k != "threads"})
    _apply_threads(args.threads if args.threads is not None else values.get("threads"))
    cfg, tcfg = build_configs(values)
    if "dataset" not in values and "manifest" not in values:
        raise ConfigError("train needs a dataset directory (--dataset or 'dataset = ...')")
    out_dir = Path(values.get("out_dir", "runs/hran"))
    resume = values.get("resume")
    if resume is not None and not Path(resume).is_file():
        raise ConfigError(f"resume checkpoint not found: {resume}")
    dataset = PairedDataset.from_dir(values.get("dataset"), cfg.scale, values.get("lr_dir"),
                                     values.get("manifest"))
    result = train_loop(cfg, tcfg, dataset, out_dir=out_dir, resume=resume)
    print(f"trained to iteration {result.state.t}; checkpoint {result.checkpoint}")
    return 0


# -- infer ----------------------------------------------------------------------------


def _collect_inputs(paths) -> list[Path]:
    found = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            found.extend(list_images(p))
        elif p.is_file():
            found.append(p)
        else:
            raise DataError(f"input not found: {p}")
    if not found:
        raise DataError("no input images")
    return found


def bicubic_operator(scale: int):
    """The float bicubic x``scale`` upscaler as a model-like callable."""

    def run(x: np.ndarray) -> np.ndarray:
        return bicubic_resize(x, x.shape[2] * scale, x.shape[3] * scale).astype(x.dtype)

    return run


def cmd_infer(args) -> int:
    _apply_threads(args.threads)
    if (args.checkpoint is None) == (not args.bicubic):
        raise ConfigError("give exactly one of --checkpoint or --bicubic")
    if args.bicubic:
        if args.scale is None:
            raise ConfigError("--bicubic needs --scale")
        scale = args.scale
        run = bicubic_operator(scale)
    else:
        ckpt = load_checkpoint(args.checkpoint)
        scale = ckpt.cfg.scale
        if args.scale is not None and args.scale != scale:
            raise ConfigError(f"checkpoint is x{scale} but --scale {args.scale} was requested")
        run = HRAN(ckpt.cfg, ckpt.store)
    inputs = _collect_inputs(args.inputs)
    images = [(p, load_image(p)) for p in inputs]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = ".png" if args.png else ".ppm"
    for path, img in images:
        x = to_float(img)
        y = self_ensemble(run, x) if args.ensemble else run(x)
        dest = out_dir / f"{path.stem}_x{scale}{ext}"
        save_image(dest, to_u8(y))
        print(dest)
    return 0


# -- eval --------------------------------------------------------------------------------


def cmd_eval(args) -> int:
    _apply_threads(args.threads)
    source = Path(args.source)
    if source.is_file():
        ckpt = load_checkpoint(source)
        if ckpt.cfg.scale != args.scale:
            raise ConfigError(f"checkpoint is x{ckpt.cfg.scale} but --scale {args.scale} was requested")
        model = HRAN(ckpt.cfg, ckpt.store)
        report = evaluate(model, args.hr_dir, args.scale, ensemble=args.ensemble, lr_dir=args.lr_dir,
                          model_id=source.stem)
    elif source.is_dir():
        if args.ensemble:
            raise ConfigError("--ensemble needs a checkpoint source")
        report = evaluate(source, args.hr_dir, args.scale)
    else:
        raise DataError(f"SR source not found: {source}")
    tsv = report.to_tsv()
    if args.out:
        Path(args.out).write_text(tsv, encoding="utf-8")
    else:
        sys.stdout.write(tsv)
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n", encoding="utf-8")
    if not report.complete:
        print(f"error: {len(report.missing)} HR image(s) without SR counterpart: "
              + ", ".join(report.missing), file=sys.stderr)
        return EXIT_PARTIAL
    return 0


# -- degrade -----------------------------------------------------------------------------


def cmd_degrade(args) -> int:
    _apply_threads(args.threads)
    if args.scale < 1:
        raise ConfigError(f"scale must be positive, got {args.scale}")
    paths = list_images(args.hr_dir)
    if not paths:
        raise DataError(f"no images in {args.hr_dir}")
    # decode everything first so a bad file leaves no partial output tree
    images = [(p, load_image(p)) for p in paths]
    for p, img in images:
        if img.height < args.scale or img.width < args.scale:
            raise DataError(f"{p.name}: {img.width}x{img.height} is smaller than the scale")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for p, img in images:
        dest = out_dir / f"{p.stem}x{args.scale}.ppm"
        save_image(dest, degrade(img, args.scale))
        if args.hr_out:
            hr_dir = Path(args.hr_out)
            hr_dir.mkdir(parents=True, exist_ok=True)
            save_image(hr_dir / f"{p.stem}.ppm", crop_to_multiple(img, args.scale))
        print(dest)
    return 0


# -- params ------------------------------------------------------------------------------


def cmd_params(args) -> int:
    if args.checkpoint:
        cfg = load_checkpoint(args.checkpoint).cfg
    else:
        values = resolve(read_config(args.config) if args.config else {},
                         {k: getattr(args, k) for k in MODEL_KEYS})
        cfg = ModelConfig(**{k: values[k] for k in MODEL_KEYS if k in values})
    total = param_count(cfg)
    for name, n in param_breakdown(cfg).items():
        print(f"{name}\t{n}")
    print(f"total\t{total}\t({total / 1e6:.2f} M)")
    return 0


# -- wiring ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads for conv kernels (results do not depend on it; env HRAN_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="hran", description="Numpy super-resolution engine: train, run and evaluate HRAN models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--config", help="flat 'key = value' config file; flags override it")
    _add_run_flags(p, RUN_KEYS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="super-resolve images")
    p.add_argument("inputs", nargs="+", help="LR images or directories")
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.add_argument("--bicubic", action="store_true", help="use bicubic upscaling instead of a model")
    p.add_argument("--scale", type=int, help="required with --bicubic; must match the checkpoint otherwise")
    p.add_argument("--ensemble", action="store_true", help="average over the eight flips/rotations")
    p.add_argument("--out", default=".", help="output directory (default: cwd)")
    p.add_argument("--png", action="store_true", help="write PNG instead of PPM")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="Y-channel PSNR/SSIM report")
    p.add_argument("source", help="directory of SR images, or a checkpoint to run")
    p.add_argument("hr_dir", help="directory of HR ground truth")
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--ensemble", action="store_true", help="self-ensemble (checkpoint source only)")
    p.add_argument("--lr-dir", help="pre-degraded LR images <stem>x<scale> (checkpoint source only)")
    p.add_argument("--out", help="write the TSV here instead of stdout")
    p.add_argument("--json", help="also write a JSON report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("degrade", parents=[common], help="bicubic-downscale HR images")
    p.add_argument("hr_dir")
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--out", required=True, help="directory for <stem>x<scale>.ppm files")
    p.add_argument("--hr-out", help="also write the cropped HR images here")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("params", parents=[common], help="count model parameters")
    p.add_argument("--config", help="flat config file")
    p.add_argument("--checkpoint", help="read the model config from a checkpoint")
    _add_run_flags(p, MODEL_KEYS)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HRANError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
