"""Command-line entry point: ``srdiff {train,sample,fam,eval,inpaint,compare-maps}``.

Standard output carries one ``config\\t<json>`` line (enough to rerun the
command) followed by ``artifact\\t<path>`` lines. Failures print a single JSON
object ``{"error": ..., "type": ...}`` on standard error and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import load_folder, read_pnm, from_uint8, write_image, write_pnm
from .experiments import COMPARE_ORDER, build_dataset, compare_maps, denoiser_from_section
from .highlighter import grad_cam
from .inpainting import MaskKind, make_mask, repaint_sample
from .io import save_map
from .metrics import PERCEPTUAL_LABEL, PixelPCAEmbedder, desk_fid, perceptual_distance, psnr, ssim, write_metric_rows
from .render import grid_cells, heatmap, image_grid, overlay
from .trainer import load_config, load_highlighter, load_model, run_training

logger = logging.getLogger("srdiff")
SSIM_WINDOW = 11


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


def _emit_config(command, args, **extra):
    d = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    d.update(extra)
    d["command"] = command
    print("config\t" + json.dumps(d, sort_keys=True, default=str))


def _artifact(path):
    print(f"artifact\t{path}")
    return path


def _load_images(path, resolution=None) -> np.ndarray:
    p = Path(path)
    if p.is_dir():
        if resolution is None:
            first = sorted(q for q in p.iterdir() if q.suffix.lower() in (".pgm", ".ppm", ".pnm"))
            if not first:
                raise CliError(f"no .pgm/.ppm files in {p}")
            resolution = read_pnm(first[0]).shape[-1]
        return load_folder(p, resolution)
    px = read_pnm(p)
    img = from_uint8(px)[None]
    if resolution is not None and img.shape[-1] != resolution:
        from .data import resize_area

        img = resize_area(img[0], resolution, resolution)[None].astype(np.float32)
    return img


# -- commands ----------------------------------------------------------------------------


def cmd_train(args):
    cfg, den, data = load_config(args.config)
    dataset = build_dataset(data)
    dcfg = denoiser_from_section(den, dataset)
    _emit_config("train", args, seed=cfg.seed)
    out = Path(args.out_dir)
    result = run_training(cfg, dataset, dcfg, out_dir=out, resume=args.resume)
    for path in result.paths.values():
        _artifact(path)
    summary = out / "summary.json"
    losses = [r.loss for r in result.log]
    summary.write_text(json.dumps({
        "steps_run": len(losses),
        "final_loss_mean_100": float(np.mean(losses[-100:])) if losses else None,
        "refreshes": result.trainer.cycle.n_refreshes,
        "train_config": cfg.to_dict(),
        "denoiser_config": dcfg.to_dict(),
    }, indent=2, sort_keys=True))
    _artifact(summary)


def cmd_sample(args):
    model, sched, meta = load_model(args.ckpt)
    _emit_config("sample", args)
    gen = torch.Generator().manual_seed(args.seed)
    from .diffusion import sample

    shape = tuple(meta["image_shape"])
    x = sample(model, sched, shape, gen, args.count).clamp(-1, 1).numpy()
    out = Path(args.out_dir)
    ext = "pgm" if shape[0] == 1 else "ppm"
    _artifact(write_image(out / f"samples_seed{args.seed}.{ext}", image_grid(x)))
    if args.individual:
        for i, img in enumerate(x):
            _artifact(write_image(out / "samples" / f"sample_{i:04d}.{ext}", img))


def cmd_fam(args):
    hl = load_highlighter(args.highlighter)
    images = _load_images(args.images_dir, hl.image_shape_[-1])
    names = sorted(q.stem for q in Path(args.images_dir).iterdir()
                   if q.suffix.lower() in (".pgm", ".ppm", ".pnm")) if Path(args.images_dir).is_dir() \
        else [Path(args.images_dir).stem]
    _emit_config("fam", args)
    fams = grad_cam(hl, images)
    out = Path(args.out_dir)
    report = []
    for name, img, fam in zip(names, images, fams):
        _artifact(save_map(out / f"{name}.fam", fam))
        _artifact(write_pnm(out / f"{name}_heatmap.ppm", heatmap(fam)))
        _artifact(write_pnm(out / f"{name}_overlay.ppm", overlay(img, fam)))
        cells = grid_cells(fam, args.grid, args.top_k)
        report.append({"image": name, "grid": args.grid,
                       "top_cells": [{"row": r, "col": c, "score": s} for r, c, s in cells]})
    mean = fams.astype(np.float64).mean(axis=0)
    _artifact(save_map(out / "mean.fam", mean))
    _artifact(write_pnm(out / "mean_heatmap.ppm", heatmap(mean)))
    rp = out / "grid_cells.jsonl"
    with open(rp, "w") as fh:
        for r in report:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    _artifact(rp)


def cmd_eval(args):
    real = _load_images(args.real_dir)
    gen = _load_images(args.gen_dir, real.shape[-1])
    _emit_config("eval", args)
    rows = []
    if args.highlighter:
        hl = load_highlighter(args.highlighter)
        rows.append({"metric": "desk-FID", "split": "gen-vs-real", "value": desk_fid(real, gen, hl),
                     "seed": args.seed, "embedder": "highlighter"})
        n = min(len(real), len(gen))
        d = perceptual_distance(real[:n], gen[:n], hl)
        rows.append({"metric": PERCEPTUAL_LABEL, "split": "gen-vs-real", "value": float(np.mean(d)),
                     "seed": args.seed, "pairs": n})
    else:
        pca = PixelPCAEmbedder(random_state=args.seed).fit(real)
        rows.append({"metric": "desk-FID", "split": "gen-vs-real", "value": desk_fid(real, gen, pca),
                     "seed": args.seed, "embedder": "pixel-pca"})
    out = Path(args.out_dir)
    write_metric_rows(rows, out / "metrics.csv", out / "metrics.jsonl")
    _artifact(out / "metrics.csv")
    _artifact(out / "metrics.jsonl")


def cmd_inpaint(args):
    model, sched, meta = load_model(args.ckpt)
    shape = tuple(meta["image_shape"])
    gt = _load_images(args.image, shape[-1])
    _emit_config("inpaint", args)
    kinds = list(MaskKind) if args.mask_kind == "all" else [MaskKind(args.mask_kind)]
    hl = load_highlighter(args.highlighter) if args.highlighter else None
    out = Path(args.out_dir)
    ext = "pgm" if shape[0] == 1 else "ppm"
    rows = []
    for kind in kinds:
        mask = make_mask(kind, shape[-2], shape[-1], args.seed)
        gen = torch.Generator().manual_seed(args.seed)
        result = repaint_sample(model, sched, gt, mask, args.jump_len, args.jump_n, gen).clamp(-1, 1)
        # clamping can only move unknown pixels: known ones equal the ground truth already in range
        result = torch.where(torch.as_tensor(mask == 1).expand_as(result), torch.from_numpy(gt), result).numpy()
        masked = np.where(mask == 1, gt, -1.0).astype(np.float32)
        _artifact(save_map(out / f"mask_{kind.value}.fam", mask, binary=True))
        _artifact(write_image(out / f"masked_{kind.value}.{ext}", image_grid(masked)))
        _artifact(write_image(out / f"result_{kind.value}.{ext}", image_grid(result)))
        rows.append({"metric": "PSNR", "split": kind.value, "value": psnr(result, gt), "seed": args.seed})
        if min(shape[-2:]) >= SSIM_WINDOW:
            rows.append({"metric": "SSIM", "split": kind.value, "value": ssim(result, gt), "seed": args.seed})
        else:
            logger.warning("SSIM needs images of at least %dx%d; skipped", SSIM_WINDOW, SSIM_WINDOW)
        if len(gt) >= 2:
            emb = hl if hl is not None else PixelPCAEmbedder(n_components=min(16, len(gt)), random_state=args.seed).fit(gt)
            rows.append({"metric": "desk-FID", "split": kind.value, "value": desk_fid(gt, result, emb),
                         "seed": args.seed, "embedder": "highlighter" if hl is not None else "pixel-pca"})
        else:
            logger.warning("desk-FID needs at least 2 images; skipped for %s", kind.value)
        if hl is not None:
            rows.append({"metric": PERCEPTUAL_LABEL, "split": kind.value,
                         "value": float(np.mean(perceptual_distance(gt, result, hl))), "seed": args.seed})
    write_metric_rows(rows, out / "inpaint_metrics.csv", out / "inpaint_metrics.jsonl")
    _artifact(out / "inpaint_metrics.csv")
    _artifact(out / "inpaint_metrics.jsonl")


def cmd_compare_maps(args):
    cfg, den, data = load_config(args.config)
    if args.total_steps is not None:
        base = round(cfg.base_steps * args.total_steps / cfg.total_steps)
        cfg = type(cfg).from_dict({**cfg.to_dict(), "total_steps": args.total_steps, "base_steps": base})
    dataset = build_dataset(data)
    dcfg = denoiser_from_section(den, dataset)
    data = data or {}
    eval_samples = int(data.get("eval_samples", 256))
    eval_seed = int(data.get("eval_seed", 12345))
    _emit_config("compare-maps", args, seed=cfg.seed, eval_seed=eval_seed, total_steps=cfg.total_steps, base_steps=cfg.base_steps)
    out = Path(args.out_dir)
    rows = compare_maps(cfg, dataset, dcfg, eval_samples=eval_samples, eval_seed=eval_seed, work_dir=out / "runs" if args.keep_runs else None)
    rows = [rows[[r["map"] for r in rows].index(k)] for k in COMPARE_ORDER]
    write_metric_rows(rows, out / "compare_maps.csv", out / "compare_maps.jsonl")
    _artifact(out / "compare_maps.csv")
    _artifact(out / "compare_maps.jsonl")


def build_parser():
    p = _Parser(prog="srdiff", description="Self-refining diffusion at desk scale")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="run dual-phase training from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", default=None, help="checkpoint to resume from")
    s.add_argument("--out-dir", default="runs/train")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw a sample grid from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", default="runs/samples")
    s.add_argument("--individual", action="store_true", help="also write one file per sample")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("fam", help="flaw activation maps, heatmaps, overlays, grid-cell report")
    s.add_argument("--highlighter", required=True, help="highlighter or trainer checkpoint")
    s.add_argument("--images-dir", required=True)
    s.add_argument("--out-dir", default="runs/fam")
    s.add_argument("--grid", type=int, default=3)
    s.add_argument("--top-k", type=int, default=3)
    s.set_defaults(func=cmd_fam)

    s = sub.add_parser("eval", help="desk-FID and highlighter-perceptual distance")
    s.add_argument("--real-dir", required=True)
    s.add_argument("--gen-dir", required=True)
    s.add_argument("--highlighter", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", default="runs/eval")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inpaint", help="RePaint-style inpainting with one or all mask kinds")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True, help="image file or directory of images")
    s.add_argument("--mask-kind", default="all", choices=["all"] + [k.value for k in MaskKind])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jump-len", type=int, default=10)
    s.add_argument("--jump-n", type=int, default=2)
    s.add_argument("--highlighter", default=None)
    s.add_argument("--out-dir", default="runs/inpaint")
    s.set_defaults(func=cmd_inpaint)

    s = sub.add_parser("compare-maps", help="train one model per guidance map and rank by desk-FID")
    s.add_argument("--config", required=True)
    s.add_argument("--total-steps", type=int, default=None, help="override the step budget (phase ratio kept)")
    s.add_argument("--out-dir", default="runs/compare_maps")
    s.add_argument("--keep-runs", action="store_true")
    s.set_defaults(func=cmd_compare_maps)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        args.func(args)
        return 0
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - single-line error contract
        msg = str(exc).replace("\n", " ")
        print(json.dumps({"error": msg, "type": type(exc).__name__}), file=sys.stderr)
        return 2 if isinstance(exc, CliError) else 1


if __name__ == "__main__":
    sys.exit(main())
