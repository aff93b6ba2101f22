"""Multi-run experiments built on branching from a shared base-phase checkpoint.

Runs that differ only in refinement settings share an identical base phase
(same seed, same data stream), so the base phase is trained once and each
variant resumes from the phase-boundary checkpoint.
"""

from __future__ import annotations

import logging
import tempfile
from pathlib import Path

import numpy as np

from .data import gen_toy_faces, load_folder, resize_area
from .denoiser import DenoiserConfig
from .diffusion import sample
from .guidance import GUIDANCE_KINDS
from .metrics import PixelPCAEmbedder, desk_fid
from .trainer import TrainConfig, Trainer

logger = logging.getLogger(__name__)

COMPARE_ORDER = ("center-gaussian", "inverted-gaussian", "edge", "fam")
assert set(COMPARE_ORDER) == set(GUIDANCE_KINDS)


def build_dataset(data: dict | None) -> np.ndarray:
    """Dataset from a config ``data`` section (default: 2048 toy faces at 16x16)."""
    data = dict(data or {})
    source = data.pop("source", "toy-faces")
    data.pop("eval_samples", None)
    data.pop("eval_seed", None)
    unknown = set(data) - {"n", "resolution", "seed", "path", "resize_to"}
    if unknown:
        raise ValueError(f"unknown data keys: {sorted(unknown)}")
    if source == "toy-faces":
        X = gen_toy_faces(int(data.get("n", 2048)), int(data.get("resolution", 16)), int(data.get("seed", 0)))
    elif source == "folder":
        if "path" not in data:
            raise ValueError("data.source 'folder' needs data.path")
        X = load_folder(data["path"], int(data.get("resolution", 16)))
    else:
        raise ValueError(f"unknown data.source {source!r} (expected 'toy-faces' or 'folder')")
    size = data.get("resize_to")
    if size is not None:  # area-average down to a smaller square, e.g. 8x8 for quick runs
        size = int(size)
        X = np.stack([resize_area(x, size, size) for x in X]).astype(np.float32)
    return X


def denoiser_from_section(section: dict | None, dataset) -> DenoiserConfig:
    section = dict(section or {})
    section.setdefault("in_channels", int(dataset.shape[1]))
    section.setdefault("image_size", int(dataset.shape[-1]))
    return DenoiserConfig(**section)


def train_base(cfg: TrainConfig, dataset, dcfg: DenoiserConfig, path) -> Path:
    """Train the base phase only and checkpoint at the phase boundary."""
    trainer = Trainer(cfg, dataset, dcfg)
    trainer.run(until=cfg.base_steps)
    return trainer.save(path)


def run_branch(boundary_ckpt, dataset, overrides: dict, log_path=None) -> Trainer:
    trainer = Trainer.load(boundary_ckpt, dataset, log_path=log_path, overrides=overrides)
    trainer.run()
    return trainer


def generate(trainer: Trainer, n: int, seed: int) -> np.ndarray:
    import torch

    gen = torch.Generator().manual_seed(int(seed))
    return sample(trainer.model, trainer.sched, trainer.image_shape, gen, n).clamp(-1, 1).numpy()


def compare_maps(cfg: TrainConfig, dataset, dcfg: DenoiserConfig, eval_samples: int = 256,
                 eval_seed: int = 12345, work_dir=None, kinds=COMPARE_ORDER) -> list:
    """Train one refinement branch per guidance map and rank them by desk-FID.

    The embedder is a pixel-PCA basis fitted on the real data, shared by all rows.
    """
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        work = Path(work_dir) if work_dir else Path(tmp)
        work.mkdir(parents=True, exist_ok=True)
        boundary = train_base(cfg, dataset, dcfg, work / "boundary.srdf")
        embedder = PixelPCAEmbedder(n_components=16, random_state=cfg.seed).fit(dataset)
        for kind in kinds:
            trainer = run_branch(boundary, dataset, {"guidance": kind}, log_path=work / f"metrics_{kind}.csv")
            gen = generate(trainer, eval_samples, eval_seed)
            fid = desk_fid(dataset, gen, embedder)
            logger.info("guidance %s: desk-FID %.5f", kind, fid)
            rows.append({"metric": "desk-FID", "split": kind, "value": fid, "seed": cfg.seed,
                         "map": kind, "embedder": "pixel-pca", "steps": cfg.total_steps})
    for rank, r in enumerate(sorted(rows, key=lambda r: r["value"]), start=1):
        r["rank"] = rank
    return rows


def baseline_vs_refined(cfg: TrainConfig, dataset, dcfg: DenoiserConfig, eval_samples: int = 500,
                        eval_seed: int = 2024, work_dir=None) -> dict:
    """Same-seed comparison of a lambda=0 refinement branch against ``cfg``'s lambdas.

    Both branches are scored with the same embedder: the highlighter trained at
    the phase boundary (identical for both branches). With ``work_dir`` the
    boundary and both final checkpoints are kept there.
    """
    with tempfile.TemporaryDirectory() as tmp:
        work = Path(work_dir) if work_dir else Path(tmp)
        work.mkdir(parents=True, exist_ok=True)
        boundary = work / f"boundary_seed{cfg.seed}.srdf"
        if not boundary.exists():
            train_base(cfg, dataset, dcfg, boundary)
        refined = run_branch(boundary, dataset, {"lambda_fwd": cfg.lambda_fwd, "lambda_rev": cfg.lambda_rev})
        baseline = run_branch(boundary, dataset, {"lambda_fwd": 0.0, "lambda_rev": 0.0})
        if work_dir:
            refined.save(work / f"refined_seed{cfg.seed}.srdf")
            baseline.save(work / f"baseline_seed{cfg.seed}.srdf")
        gen_ref = generate(refined, eval_samples, eval_seed)
        gen_base = generate(baseline, eval_samples, eval_seed)
        pca = PixelPCAEmbedder(n_components=16, random_state=cfg.seed).fit(dataset)
        return {
            "seed": cfg.seed,
            "desk_fid_baseline": desk_fid(dataset, gen_base, refined.highlighter),
            "desk_fid_refined": desk_fid(dataset, gen_ref, refined.highlighter),
            "pca_fid_baseline": desk_fid(dataset, gen_base, pca),
            "pca_fid_refined": desk_fid(dataset, gen_ref, pca),
        }


__all__ = ["COMPARE_ORDER", "build_dataset", "denoiser_from_section", "train_base", "run_branch",
           "generate", "compare_maps", "baseline_vs_refined"]
