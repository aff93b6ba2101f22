"""Dual-phase training: plain DDPM steps, then guidance-map refinement with periodic refresh.

Two independent RNG streams keep runs comparable. ``train_rng`` drives batch
selection, timesteps and noise; ``aux_rng`` drives everything the refinement
machinery does (highlighter training, refresh sampling). A refinement run with
both lambdas at zero therefore reproduces a plain run's loss trace bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import yaml

from . import guidance as gmaps
from ._validation import as_generator, check_images
from .denoiser import DenoiserConfig, UNetDenoiser
from .diffusion import DivergenceError, NoiseSchedule, make_linear_schedule, sample, sample_timesteps, sr_loss
from .highlighter import FlawHighlighter, HighlighterNet, grad_cam, mean_fam, train_highlighter
from .io import FormatError, load_container, save_container

logger = logging.getLogger(__name__)

# grid explored for the full-scale runs; the config accepts any value
CYCLE_GRID = (10, 50, 100, 500, 1000)
PHASE_RATIO_GRID = ((1, 4), (1, 1), (4, 1))
LAMBDA_GRID = (0.01, 0.025, 0.05, 0.1)


class Phase(str, Enum):
    BASE = "base"
    REFINE = "refine"


@dataclass
class TrainConfig:
    total_steps: int = 40_000
    base_steps: int = 20_000
    cycle: int = 100
    lambda_fwd: float = 0.01
    lambda_rev: float = 0.025
    batch_size: int = 32
    learning_rate: float = 5e-4
    seed: int = 0
    refresh_sample_count: int = 16
    # schedule
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # refinement machinery
    guidance: str = "fam"
    refresh_sample_steps: int | None = None
    highlighter_samples: int = 128
    highlighter_epochs: int = 30
    highlighter_channels: tuple = (16, 32, 32)
    retrain_highlighter: bool = False
    sigma_frac: float = 0.25
    edge_low: float = 0.3
    edge_high: float = 0.6
    edge_blur: float = 1.0
    # bookkeeping
    checkpoint_every: int = 5000

    def __post_init__(self):
        self.highlighter_channels = tuple(int(c) for c in self.highlighter_channels)
        self.validate()

    def validate(self):
        for name in ("total_steps", "cycle", "batch_size", "refresh_sample_count", "T",
                     "highlighter_samples", "highlighter_epochs"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if not 0 <= self.base_steps <= self.total_steps:
            raise ValueError(f"need 0 <= base_steps <= total_steps, got {self.base_steps} / {self.total_steps}")
        if self.lambda_fwd < 0 or self.lambda_rev < 0:
            raise ValueError("lambda_fwd and lambda_rev must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.guidance not in gmaps.GUIDANCE_KINDS:
            raise ValueError(f"guidance must be one of {gmaps.GUIDANCE_KINDS}, got {self.guidance!r}")
        if self.refresh_sample_steps is not None and self.refresh_sample_steps < 1:
            raise ValueError("refresh_sample_steps must be >= 1 or null")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["highlighter_channels"] = list(self.highlighter_channels)
        return d

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


class PhaseSchedule:
    """Step -> phase and step -> refresh-due views over a :class:`TrainConfig`."""

    def __init__(self, cfg: TrainConfig):
        self.total = cfg.total_steps
        self.base = cfg.base_steps
        self.cycle = cfg.cycle

    def phase_of(self, step: int) -> Phase:
        if not 0 <= step < self.total:
            raise IndexError(f"step {step} outside [0, {self.total})")
        return Phase.BASE if step < self.base else Phase.REFINE

    def refresh_due(self, step: int) -> bool:
        return self.phase_of(step) is Phase.REFINE and (step - self.base) % self.cycle == 0

    def refresh_steps(self) -> list:
        return list(range(self.base, self.total, self.cycle))

    def n_refreshes(self) -> int:
        return math.ceil((self.total - self.base) / self.cycle)


def phase_of(step: int, cfg: TrainConfig) -> Phase:
    return PhaseSchedule(cfg).phase_of(step)


@dataclass
class CycleState:
    mfam: np.ndarray | None = None
    last_refresh: int | None = None
    n_refreshes: int = 0


@dataclass
class LogRecord:
    step: int
    phase: Phase
    loss: float
    refresh: bool

    def line(self) -> str:
        return f"{self.step},{self.phase.value},{self.loss!r},{int(self.refresh)}"


LOG_HEADER = "step,phase,loss,refresh"


def read_log(path) -> list:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line == LOG_HEADER:
                continue
            step, phase, loss, refresh = line.split(",")
            records.append(LogRecord(int(step), Phase(phase), float(loss), refresh == "1"))
    return records


def compute_guidance(kind, model, highlighter, cfg: TrainConfig, sched, image_shape, rng) -> np.ndarray:
    """Produce the ``(H, W)`` guidance map for one refresh."""
    h, w = image_shape[-2:]
    if kind == "center-gaussian":
        return gmaps.center_gaussian_map(h, w, cfg.sigma_frac).astype(np.float32)
    if kind == "inverted-gaussian":
        return gmaps.inverted_gaussian_map(h, w, cfg.sigma_frac).astype(np.float32)
    samples = sample(model, sched, image_shape, rng, cfg.refresh_sample_count, steps=cfg.refresh_sample_steps)
    samples = samples.clamp(-1, 1)
    if kind == "edge":
        return gmaps.edge_guidance(samples.numpy(), cfg.edge_low, cfg.edge_high, cfg.edge_blur).astype(np.float32)
    if kind == "fam":
        if highlighter is None:
            raise RuntimeError("refinement with FAM guidance requires a trained highlighter")
        return mean_fam(grad_cam(highlighter, samples.numpy())).astype(np.float32)
    raise ValueError(f"unknown guidance kind {kind!r}")


def refresh_mfam(model, highlighter, cfg: TrainConfig, rng, sched=None, image_shape=None) -> np.ndarray:
    """Sample from the current model, take fake-class Grad-CAM per sample, average."""
    sched = sched or cfg.schedule()
    if image_shape is None:
        mc = model.config
        image_shape = (mc.in_channels, mc.image_size, mc.image_size)
    return compute_guidance("fam", model, highlighter, cfg, sched, image_shape, as_generator(rng))


# settings that leave the base phase untouched
BRANCHABLE = frozenset({
    "total_steps", "cycle", "lambda_fwd", "lambda_rev", "refresh_sample_count", "guidance",
    "refresh_sample_steps", "highlighter_samples", "highlighter_epochs", "highlighter_channels",
    "retrain_highlighter", "sigma_frac", "edge_low", "edge_high", "edge_blur", "checkpoint_every",
})


class Trainer:
    """Stateful training loop. ``step`` is the index of the next step to run."""

    def __init__(self, cfg: TrainConfig, dataset, denoiser_cfg: DenoiserConfig | None = None, log_path=None):
        self.cfg = cfg
        self.data = torch.from_numpy(check_images(dataset, name="dataset"))
        self.image_shape = tuple(self.data.shape[1:])
        if denoiser_cfg is None:
            denoiser_cfg = DenoiserConfig(in_channels=self.image_shape[0], image_size=self.image_shape[-1])
        if (denoiser_cfg.in_channels, denoiser_cfg.image_size, denoiser_cfg.image_size) != self.image_shape:
            raise ValueError(f"denoiser expects {denoiser_cfg.in_channels}x{denoiser_cfg.image_size}^2 "
                             f"images, dataset has {self.image_shape}")
        self.denoiser_cfg = denoiser_cfg
        self.sched = cfg.schedule()
        self.phases = PhaseSchedule(cfg)

        self.train_rng = torch.Generator().manual_seed(cfg.seed)
        self.aux_rng = torch.Generator().manual_seed(cfg.seed + 1_000_003)
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.model = UNetDenoiser(denoiser_cfg)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.learning_rate)
        self.highlighter: FlawHighlighter | None = None
        self.cycle = CycleState()
        self.step = 0
        self.log: list[LogRecord] = []
        self.log_path = Path(log_path) if log_path else None

    # -- loop -------------------------------------------------------------------------

    def _prepare_refinement(self, step):
        needs_highlighter = self.cfg.guidance == "fam"
        if needs_highlighter and (self.highlighter is None or (self.cfg.retrain_highlighter and step > self.cfg.base_steps)):
            self.highlighter = self._train_highlighter()
        self.cycle.mfam = compute_guidance(
            self.cfg.guidance, self.model, self.highlighter, self.cfg, self.sched, self.image_shape, self.aux_rng
        )
        self.cycle.last_refresh = step
        self.cycle.n_refreshes += 1

    def _train_highlighter(self):
        n = self.cfg.highlighter_samples
        fake = sample(self.model, self.sched, self.image_shape, self.aux_rng, n,
                      steps=self.cfg.refresh_sample_steps).clamp(-1, 1)
        idx = torch.randperm(self.data.shape[0], generator=self.aux_rng)[:n]
        seed = int(torch.randint(0, 2**31 - 1, (1,), generator=self.aux_rng))
        hl = train_highlighter(self.data[idx].numpy(), fake.numpy(), channels=self.cfg.highlighter_channels,
                               epochs=self.cfg.highlighter_epochs, random_state=seed)
        logger.info("highlighter trained at step %d: validation accuracy %.3f", self.step, hl.validation_accuracy_)
        return hl

    def train_step(self) -> LogRecord:
        step = self.step
        phase = self.phases.phase_of(step)
        refresh = self.phases.refresh_due(step)
        if phase is Phase.REFINE:
            if refresh or self.cycle.mfam is None:
                self._prepare_refinement(step)
            mfam, lam_f, lam_r = torch.from_numpy(self.cycle.mfam), self.cfg.lambda_fwd, self.cfg.lambda_rev
        else:
            mfam, lam_f, lam_r = None, 0.0, 0.0

        B = self.cfg.batch_size
        idx = torch.randint(0, self.data.shape[0], (B,), generator=self.train_rng)
        x0 = self.data[idx]
        t = sample_timesteps(B, self.sched.T, self.train_rng)
        eps = torch.randn(x0.shape, generator=self.train_rng)

        loss = sr_loss(self.model, x0, t, eps, mfam, lam_f, lam_r, self.sched)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()

        rec = LogRecord(step, phase, float(loss.item()), refresh)
        self.log.append(rec)
        if self.log_path is not None:
            new = not self.log_path.exists()
            with open(self.log_path, "a") as fh:
                if new:
                    fh.write(LOG_HEADER + "\n")
                fh.write(rec.line() + "\n")
        self.step += 1
        return rec

    def run(self, until: int | None = None, checkpoint_dir=None):
        until = self.cfg.total_steps if until is None else min(until, self.cfg.total_steps)
        every = self.cfg.checkpoint_every
        while self.step < until:
            try:
                self.train_step()
            except DivergenceError:
                if checkpoint_dir is not None:
                    path = self.save(Path(checkpoint_dir) / "last_good.srdf")
                    logger.error("training diverged at step %d; last good state kept at %s", self.step, path)
                raise
            if checkpoint_dir is not None and every and self.step % every == 0:
                self.save(Path(checkpoint_dir) / f"step_{self.step:07d}.srdf")
        return self

    @property
    def losses(self) -> list:
        return [r.loss for r in self.log]

    # -- checkpoints ------------------------------------------------------------------

    def save(self, path) -> Path:
        arrays = {}
        for name, p in self.model.state_dict().items():
            arrays[f"model.{name}"] = p.detach().numpy().astype(np.float32)
        for i, p in enumerate(self.model.parameters()):
            st = self.optimizer.state.get(p)
            if st:
                arrays[f"adam.{i}.exp_avg"] = st["exp_avg"].numpy().astype(np.float32)
                arrays[f"adam.{i}.exp_avg_sq"] = st["exp_avg_sq"].numpy().astype(np.float32)
                arrays[f"adam.{i}.step"] = np.asarray([float(st["step"])], dtype=np.float32)
        arrays["rng.train"] = self.train_rng.get_state().numpy()
        arrays["rng.aux"] = self.aux_rng.get_state().numpy()
        if self.cycle.mfam is not None:
            arrays["cycle.mfam"] = self.cycle.mfam.astype(np.float32)
        hl_meta = None
        if self.highlighter is not None:
            for name, p in self.highlighter.net_.state_dict().items():
                arrays[f"highlighter.{name}"] = p.detach().numpy().astype(np.float32)
            hl_meta = {"params": {k: (list(v) if isinstance(v, tuple) else v)
                                  for k, v in self.highlighter.get_params().items()},
                       "image_shape": list(self.highlighter.image_shape_)}
        meta = {
            "kind": "srdiff-trainer",
            "step": self.step,
            "train_config": self.cfg.to_dict(),
            "denoiser_config": self.denoiser_cfg.to_dict(),
            "image_shape": list(self.image_shape),
            "cycle": {"last_refresh": self.cycle.last_refresh, "n_refreshes": self.cycle.n_refreshes},
            "highlighter": hl_meta,
        }
        return save_container(path, arrays, meta)

    @classmethod
    def load(cls, path, dataset, log_path=None, overrides: dict | None = None) -> "Trainer":
        """Restore a checkpoint. ``overrides`` may change refinement-only settings
        when the checkpoint was taken before refinement started (branching)."""
        arrays, meta = load_container(path)
        if not meta or meta.get("kind") != "srdiff-trainer":
            raise FormatError(f"{path}: not a trainer checkpoint")
        cfg_dict = dict(meta["train_config"])
        if overrides:
            bad = set(overrides) - BRANCHABLE
            if bad:
                raise ValueError(f"cannot override {sorted(bad)} when branching; allowed: {sorted(BRANCHABLE)}")
            if int(meta["step"]) > cfg_dict["base_steps"]:
                raise ValueError("branching is only allowed from a checkpoint inside the base phase")
            cfg_dict.update(overrides)
        cfg = TrainConfig.from_dict(cfg_dict)
        dcfg = DenoiserConfig(**meta["denoiser_config"])
        trainer = cls(cfg, dataset, dcfg, log_path=log_path)
        if list(trainer.image_shape) != meta["image_shape"]:
            raise FormatError(f"{path}: checkpoint image shape {meta['image_shape']} != dataset {trainer.image_shape}")
        _load_module(trainer.model, arrays, "model.", path)

        params = list(trainer.model.parameters())
        state = {}
        for i, p in enumerate(params):
            if f"adam.{i}.exp_avg" in arrays:
                state[i] = {
                    "step": torch.tensor(float(arrays[f"adam.{i}.step"][0])),
                    "exp_avg": torch.from_numpy(arrays[f"adam.{i}.exp_avg"]).reshape(p.shape).clone(),
                    "exp_avg_sq": torch.from_numpy(arrays[f"adam.{i}.exp_avg_sq"]).reshape(p.shape).clone(),
                }
        opt_state = trainer.optimizer.state_dict()
        opt_state["state"] = state
        trainer.optimizer.load_state_dict(opt_state)

        trainer.train_rng.set_state(torch.from_numpy(arrays["rng.train"]))
        trainer.aux_rng.set_state(torch.from_numpy(arrays["rng.aux"]))
        trainer.step = int(meta["step"])
        trainer.cycle = CycleState(
            mfam=arrays.get("cycle.mfam"),
            last_refresh=meta["cycle"]["last_refresh"],
            n_refreshes=meta["cycle"]["n_refreshes"],
        )
        if meta.get("highlighter"):
            trainer.highlighter = restore_highlighter(arrays, meta["highlighter"], path)
        return trainer


def _load_module(module, arrays, prefix, path):
    state = module.state_dict()
    for name, ref in state.items():
        key = prefix + name
        if key not in arrays:
            raise FormatError(f"{path}: missing parameter {key!r}")
        value = arrays[key]
        if tuple(value.shape) != tuple(ref.shape):
            raise FormatError(f"{path}: parameter {key!r} has shape {tuple(value.shape)}, "
                              f"model expects {tuple(ref.shape)}")
        state[name] = torch.from_numpy(value).to(ref.dtype)
    extra = [k for k in arrays if k.startswith(prefix) and k[len(prefix):] not in state]
    if extra:
        raise FormatError(f"{path}: unexpected parameters {extra[:3]}")
    module.load_state_dict(state)


def restore_highlighter(arrays, hl_meta, path="<memory>") -> FlawHighlighter:
    params = dict(hl_meta["params"])
    params["channels"] = tuple(params["channels"])
    hl = FlawHighlighter(**params)
    shape = tuple(hl_meta["image_shape"])
    hl.net_ = HighlighterNet(shape[0], params["channels"])
    _load_module(hl.net_, arrays, "highlighter.", path)
    hl.net_.eval()
    hl.classes_ = np.array([0, 1])
    hl.image_shape_ = shape
    hl.n_features_in_ = int(np.prod(shape))
    return hl


def save_highlighter(path, hl: FlawHighlighter) -> Path:
    arrays = {f"highlighter.{k}": v.detach().numpy().astype(np.float32) for k, v in hl.net_.state_dict().items()}
    meta = {"kind": "srdiff-highlighter",
            "highlighter": {"params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in hl.get_params().items()},
                            "image_shape": list(hl.image_shape_)}}
    return save_container(path, arrays, meta)


def load_highlighter(path) -> FlawHighlighter:
    arrays, meta = load_container(path)
    if not meta or "highlighter" not in meta or not meta["highlighter"]:
        raise FormatError(f"{path}: no highlighter stored")
    return restore_highlighter(arrays, meta["highlighter"], path)


@dataclass
class TrainResult:
    model: UNetDenoiser
    log: list
    trainer: Trainer
    paths: dict = field(default_factory=dict)


def run_training(cfg: TrainConfig, dataset, denoiser_cfg: DenoiserConfig | None = None,
                 out_dir=None, resume=None) -> TrainResult:
    """Run (or resume) a full dual-phase training; returns the model and its log."""
    out = Path(out_dir) if out_dir else None
    log_path = out / "metrics.csv" if out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if resume:
        trainer = Trainer.load(resume, dataset, log_path=log_path)
        if log_path is not None and log_path.exists():
            _truncate_log(log_path, trainer.step)
    else:
        if log_path is not None and log_path.exists():
            log_path.unlink()
        trainer = Trainer(cfg, dataset, denoiser_cfg, log_path=log_path)
    trainer.run(checkpoint_dir=out)
    paths = {}
    if out:
        paths["checkpoint"] = trainer.save(out / "final.srdf")
        paths["log"] = log_path
        if trainer.highlighter is not None:
            paths["highlighter"] = save_highlighter(out / "highlighter.srdf", trainer.highlighter)
        if trainer.cycle.mfam is not None:
            from .io import save_map
            paths["mfam"] = save_map(out / "mfam.fam", trainer.cycle.mfam)
    return TrainResult(trainer.model, trainer.log, trainer, paths)


def _truncate_log(path, step):
    """Drop log lines at or beyond ``step`` so a resumed run appends cleanly."""
    keep = [r for r in read_log(path) if r.step < step]
    with open(path, "w") as fh:
        fh.write(LOG_HEADER + "\n")
        for r in keep:
            fh.write(r.line() + "\n")


def load_model(path) -> tuple:
    """Load ``(model, schedule, meta)`` from a trainer checkpoint for sampling."""
    arrays, meta = load_container(path)
    if not meta or meta.get("kind") != "srdiff-trainer":
        raise FormatError(f"{path}: not a trainer checkpoint")
    dcfg = DenoiserConfig(**meta["denoiser_config"])
    model = UNetDenoiser(dcfg)
    _load_module(model, arrays, "model.", path)
    model.eval()
    cfg = TrainConfig.from_dict(meta["train_config"])
    return model, cfg.schedule(), meta


def load_config(path) -> tuple:
    """Parse a YAML/JSON config: TrainConfig keys at top level, plus optional
    ``denoiser`` and ``data`` sections."""
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a mapping")
    raw = dict(raw)
    denoiser = raw.pop("denoiser", None) or {}
    data = raw.pop("data", None) or {}
    cfg = TrainConfig.from_dict(raw)
    return cfg, denoiser, data


def dump_config(cfg: TrainConfig, denoiser: dict | None = None, data: dict | None = None) -> str:
    d = cfg.to_dict()
    if denoiser:
        d["denoiser"] = denoiser
    if data:
        d["data"] = data
    return json.dumps(d, sort_keys=True)


__all__ = [
    "Phase",
    "TrainConfig",
    "PhaseSchedule",
    "CycleState",
    "LogRecord",
    "Trainer",
    "TrainResult",
    "phase_of",
    "refresh_mfam",
    "compute_guidance",
    "run_training",
    "load_model",
    "load_config",
    "save_highlighter",
    "load_highlighter",
    "read_log",
]
