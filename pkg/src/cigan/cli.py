"""Command-line entry point: ``cigan {train,enhance,degrade,evaluate,ablate}``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
Relative output directories in a config file are resolved against
``$CIGAN_OUTPUT_ROOT`` when it is set, otherwise against the config file's
directory.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
import yaml

from .checkpoint import CheckpointError
from .data import DatasetError, build_unpaired_dataset
from .imaging import ImageFormatError, list_images, load_image, make_rng, save_image
from .metrics import evaluate_dir
from .training import TOGGLES, NonFiniteLossError, TrainConfig, fit, load_model, read_loss_log

log = logging.getLogger("cigan")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
OUTPUT_ROOT_ENV = "CIGAN_OUTPUT_ROOT"
PATH_KEYS = ("normal_dir", "low_dir", "out_dir", "eval_low_dir", "eval_gt_dir")
VARIANTS = (*TOGGLES, "all")
VANILLA_OFF = ("lgt", "frp", "exp_loss")


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    normal_dir: Path
    low_dir: Path
    out_dir: Path
    eval_low_dir: Optional[Path] = None
    eval_gt_dir: Optional[Path] = None

    def to_dict(self) -> dict:
        d = self.train.to_dict()
        for k in PATH_KEYS:
            v = getattr(self, k)
            d[k] = str(v) if v is not None else None
        return d


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a flat key/value mapping")
    raw = dict(raw)
    base = path.parent
    paths = {}
    for key in PATH_KEYS:
        val = raw.pop(key, None)
        if val is None:
            if key in ("normal_dir", "low_dir", "out_dir"):
                raise ConfigError(f"{path}: missing required key {key!r}")
            paths[key] = None
            continue
        p = Path(val)
        if not p.is_absolute():
            root = os.environ.get(OUTPUT_ROOT_ENV) if key == "out_dir" else None
            p = Path(root) / p if root else base / p
        paths[key] = p
    for key, val in raw.items():
        if isinstance(val, dict):
            raise ConfigError(f"{path}: key {key!r} must be a scalar or list (config is flat)")
    try:
        train = TrainConfig.from_dict(raw)
    except KeyError as exc:
        raise ConfigError(f"{path}: {exc.args[0]}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return RunConfig(train=train, **paths)


def _snapshot(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(payload, sort_keys=True))


def _as_rgb(img: torch.Tensor) -> torch.Tensor:
    return img.expand(-1, 3, -1, -1) if img.shape[1] == 1 else img


# --------------------------------------------------------------------------- commands


def cmd_train(config) -> int:
    try:
        rc = load_run_config(config)
        ds = build_unpaired_dataset(rc.normal_dir, rc.low_dir, rc.train.crop, hflip=rc.train.hflip)
    except (ConfigError, DatasetError, NotADirectoryError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    _snapshot(rc.out_dir / "run_config.yaml", rc.to_dict())
    try:
        final = fit(rc.train, ds, rc.out_dir)
    except NonFiniteLossError as exc:
        log.error("training aborted: %s", exc)
        return EXIT_RUNTIME
    except (OSError, DatasetError, ImageFormatError) as exc:
        log.error("training failed: %s", exc)
        return EXIT_RUNTIME
    log.info("final checkpoint: %s", final)
    return EXIT_OK


def _load_for_inference(checkpoint):
    try:
        return load_model(checkpoint)
    except (CheckpointError, KeyError, RuntimeError) as exc:
        log.error("cannot load checkpoint %s: %s", checkpoint, exc)
        return None


@torch.no_grad()
def cmd_enhance(checkpoint, in_dir, out_dir) -> int:
    out_dir = Path(out_dir)
    _snapshot(out_dir / "enhance_config.yaml", {"checkpoint": str(checkpoint), "in": str(in_dir), "out": str(out_dir)})
    loaded = _load_for_inference(checkpoint)
    if loaded is None:
        return EXIT_RUNTIME
    model, _ = loaded
    try:
        inputs = list_images(in_dir)
    except NotADirectoryError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    written = 0
    for path in inputs:
        try:
            img = _as_rgb(load_image(path))
            out = model.enhance(img)
        except (ImageFormatError, ValueError) as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        save_image(out, out_dir / f"{path.stem}.png")
        written += 1
    if inputs and written == 0:
        log.error("no image in %s could be enhanced", in_dir)
        return EXIT_RUNTIME
    return EXIT_OK


@torch.no_grad()
def cmd_degrade(checkpoint, in_dir, ref_dir, out_dir, seed: int = 0, deterministic: bool = False) -> int:
    out_dir = Path(out_dir)
    _snapshot(
        out_dir / "degrade_config.yaml",
        {"checkpoint": str(checkpoint), "in": str(in_dir), "ref": str(ref_dir), "out": str(out_dir),
         "seed": int(seed), "deterministic": bool(deterministic)},
    )
    loaded = _load_for_inference(checkpoint)
    if loaded is None:
        return EXIT_RUNTIME
    model, _ = loaded
    try:
        inputs, refs = list_images(in_dir), list_images(ref_dir)
    except NotADirectoryError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    if not refs:
        log.error("reference directory %s has no images", ref_dir)
        return EXIT_USAGE
    rng = make_rng(seed)
    written = 0
    for path in inputs:
        ref_path = refs[int(torch.randint(0, len(refs), (1,), generator=rng))]
        try:
            img = _as_rgb(load_image(path))
            ref = _as_rgb(load_image(ref_path))
            if ref.shape != img.shape:
                ref = F.interpolate(ref, size=img.shape[-2:], mode="bilinear", align_corners=False, antialias=True)
                ref = ref.clamp(0.0, 1.0)
            out = model.degrade(img, ref, rng=rng, deterministic=deterministic)
        except (ImageFormatError, ValueError) as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        save_image(out, out_dir / f"{path.stem}.png")
        written += 1
    if inputs and written == 0:
        log.error("no image in %s could be degraded", in_dir)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_evaluate(pred_dir, gt_dir, out_csv) -> int:
    out_csv = Path(out_csv)
    _snapshot(out_csv.with_suffix(".config.yaml"), {"in": str(pred_dir), "ref": str(gt_dir), "out": str(out_csv)})
    try:
        report = evaluate_dir(pred_dir, gt_dir)
    except (FileNotFoundError, NotADirectoryError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (ValueError, ImageFormatError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    report.write_csv(out_csv)
    return EXIT_OK


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    off = VANILLA_OFF if variant == "all" else (variant,)
    return dataclasses.replace(cfg, **{k: False for k in off})


ABLATION_COLUMNS = [
    "variant", *TOGGLES, "steps", "lg_total", "ld_total", "l_exp", "l_con", "l_per",
    "psnr", "psnr_gc", "ssim", "ssim_gc",
]


def _run_variant(rc: RunConfig, variant: str) -> dict:
    cfg = variant_config(rc.train, variant)
    run_dir = rc.out_dir / f"variant_{variant}"
    _snapshot(run_dir / "run_config.yaml", dataclasses.replace(rc, train=cfg, out_dir=run_dir).to_dict())
    ds = build_unpaired_dataset(rc.normal_dir, rc.low_dir, cfg.crop, hflip=cfg.hflip)
    final = fit(cfg, ds, run_dir)
    rows = read_loss_log(run_dir / "losses.csv")
    last = rows[-1] if rows else {}
    row = {"variant": variant, **{k: getattr(cfg, k) for k in TOGGLES}, "steps": int(last.get("step", 0))}
    for k in ("lg_total", "ld_total", "l_exp", "l_con", "l_per"):
        row[k] = last.get(k, float("nan"))
    if rc.eval_low_dir is not None and rc.eval_gt_dir is not None:
        pred_dir = run_dir / "eval_enhanced"
        if cmd_enhance(final, rc.eval_low_dir, pred_dir) != EXIT_OK:
            raise RuntimeError(f"enhancing evaluation set failed for variant {variant}")
        report = evaluate_dir(pred_dir, rc.eval_gt_dir)
        row.update({k: report.mean(k) for k in ("psnr", "psnr_gc", "ssim", "ssim_gc")})
    else:
        row.update({k: "" for k in ("psnr", "psnr_gc", "ssim", "ssim_gc")})
    return row


def cmd_ablate(config, variants: Sequence[str], parallel: int = 1) -> int:
    try:
        rc = load_run_config(config)
        for v in variants:
            variant_config(rc.train, v)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    if not variants:
        log.error("no variants given")
        return EXIT_USAGE
    _snapshot(rc.out_dir / "ablation_config.yaml", {**rc.to_dict(), "variants": list(variants)})
    try:
        if parallel > 1:
            with ProcessPoolExecutor(max_workers=parallel) as pool:
                rows = list(pool.map(_run_variant, [rc] * len(variants), variants))
        else:
            rows = [_run_variant(rc, v) for v in variants]
    except (NonFiniteLossError, RuntimeError, OSError, DatasetError) as exc:
        log.error("ablation failed: %s", exc)
        return EXIT_RUNTIME
    with (rc.out_dir / "ablation.csv").open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


# --------------------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cigan", description="Cycle-interactive GAN for low-light enhancement")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)

    e = sub.add_parser("enhance", help="enhance a directory of low-light images")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--in", dest="in_dir", required=True)
    e.add_argument("--out", required=True)

    d = sub.add_parser("degrade", help="synthesise low-light versions of normal-light images")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--in", dest="in_dir", required=True)
    d.add_argument("--ref", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--deterministic", action="store_true", help="disable feature perturbation")

    v = sub.add_parser("evaluate", help="PSNR/SSIM (+ gamma-corrected) of predictions vs ground truth")
    v.add_argument("--in", dest="in_dir", required=True, help="prediction directory")
    v.add_argument("--ref", required=True, help="ground-truth directory")
    v.add_argument("--out", required=True, help="report CSV")

    a = sub.add_parser("ablate", help="train one run per disabled component")
    a.add_argument("--config", required=True)
    a.add_argument("--variants", required=True, help=f"comma-separated subset of {','.join(VARIANTS)}")
    a.add_argument("--parallel", type=int, default=1)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "train":
        return cmd_train(args.config)
    if args.command == "enhance":
        return cmd_enhance(args.checkpoint, args.in_dir, args.out)
    if args.command == "degrade":
        return cmd_degrade(args.checkpoint, args.in_dir, args.ref, args.out, args.seed, args.deterministic)
    if args.command == "evaluate":
        return cmd_evaluate(args.in_dir, args.ref, args.out)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    return cmd_ablate(args.config, variants, args.parallel)


if __name__ == "__main__":
    sys.exit(main())
