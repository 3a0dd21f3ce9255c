"""Joint denoising objective, training loop and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .corpus import CorpusConfig, PairedSample
from .diffusion import NoisePair, NoiseSchedule, build_schedule, forward_diffuse
from .model import codec
from .model.checkpoint import CheckpointError, read_container, write_container
from .model.denoiser import (
    DenoiserConfig,
    DenoiserParams,
    denoise,
    embed_batch,
    init_denoiser,
)
from .model.prompts import FIELDS, VOCABULARY
from .numerics import ops
from .numerics import rng as prng
from .numerics.optim import OptimizerState, adamw_step, clip_grad_norm
from .numerics.tensor import NonFiniteError, ShapeError, Tensor, backward, get_tape

log = logging.getLogger(__name__)

# fields that set the run length, not the run identity; excluded from the config hash
BUDGET_FIELDS = ("steps", "checkpoint_every", "log_every")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    warmup_steps: int = 100
    decay_steps: int = 3000
    final_lr_fraction: float = 0.05
    weight_decay: float = 0.01
    p_drop: float = 0.1
    T: int = 1000
    loss: str = "l1"
    grad_clip: float = 1.0
    seed: int = 0
    corpus_size: int = 2048
    checkpoint_every: int = 1000
    log_every: int = 10
    model: DenoiserConfig = field(default_factory=lambda: DenoiserConfig(codec="patchify"))
    corpus: CorpusConfig = field(default_factory=CorpusConfig)

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.warmup_steps < 0 or self.decay_steps < 1 or not 0 <= self.final_lr_fraction <= 1:
            raise ValueError("need warmup_steps >= 0, decay_steps >= 1, final_lr_fraction in [0, 1]")
        if not 0 <= self.weight_decay < 1:
            raise ValueError("weight_decay must lie in [0, 1)")
        if not 0 <= self.p_drop <= 1:
            raise ValueError("p_drop must lie in [0, 1]")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"loss must be 'l1' or 'l2', got {self.loss!r}")
        if self.model.image_size != self.corpus.size or self.model.num_classes != self.corpus.num_classes \
                or self.model.image_channels != self.corpus.channels:
            raise ValueError("model and corpus configs disagree on image size, channels or classes")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["model"] = self.model.to_dict()
        d["corpus"] = self.corpus.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = DenoiserConfig.from_dict(d["model"])
        if "corpus" in d:
            d["corpus"] = CorpusConfig.from_dict(d["corpus"])
        return cls(**d)

    def lr_at(self, step: int) -> float:
        """Learning rate for the 1-based optimiser step: linear warm-up, then optional cosine decay."""
        scale = min(1.0, step / self.warmup_steps) if self.warmup_steps else 1.0
        if self.lr_schedule == "cosine":
            frac = min(step, self.decay_steps) / self.decay_steps
            lo = self.final_lr_fraction
            scale *= lo + (1 - lo) * 0.5 * (1 + math.cos(math.pi * frac))
        return self.lr * scale

    def config_hash(self) -> str:
        d = self.to_dict()
        for k in BUDGET_FIELDS:
            d.pop(k, None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


PRESETS = {
    # squared error: under L1 the fit is the per-pixel median, which is background nearly everywhere
    "desk": {"loss": "l2"},
    "smoke": {"loss": "l2", "steps": 200, "corpus_size": 256, "checkpoint_every": 100},
    # low constant lr over ~30k steps; selectable but far beyond a single CPU
    "long": {"lr": 1e-5, "batch_size": 20, "steps": 300 * 2048 // 20, "lr_schedule": "constant",
              "warmup_steps": 0},
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


# -- objective ---------------------------------------------------------------------

def loss_joint(target: NoisePair, pred: NoisePair, kind: str = "l1") -> Tensor:
    """Image-stream term plus mask-stream term, each mean-reduced over its elements."""
    px = pred.eps_x if isinstance(pred.eps_x, Tensor) else Tensor(pred.eps_x)
    pm = pred.eps_m if isinstance(pred.eps_m, Tensor) else Tensor(pred.eps_m)
    tx, tm = np.asarray(target.eps_x), np.asarray(target.eps_m)
    if px.shape != tx.shape or pm.shape != tm.shape:
        raise ShapeError(f"loss_joint: prediction {px.shape}/{pm.shape} vs target {tx.shape}/{tm.shape}")
    fn = ops.l1_loss if kind == "l1" else ops.mse_loss
    return ops.add(fn(px, Tensor(tx.astype(px.dtype))), fn(pm, Tensor(tm.astype(pm.dtype))))


def encode_batch(samples: list[PairedSample], cfg: DenoiserConfig) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = codec.rasterize_mask(np.stack([s.mask for s in samples]), cfg.num_classes, cfg.image_channels)
    return codec.encode(images, cfg.codec), codec.encode(masks, cfg.codec)


@dataclass
class StepDraws:
    t: np.ndarray
    noise: NoisePair
    drop: np.ndarray


def draw_step(r: np.random.Generator, n: int, shape: tuple, T: int, p_drop: float) -> StepDraws:
    """Timesteps (one per sample, shared by both streams), independent stream noise, dropout flags."""
    t = r.integers(1, T + 1, size=n)
    eps_x = r.standard_normal((n, *shape)).astype(np.float32)
    eps_m = r.standard_normal((n, *shape)).astype(np.float32)
    drop = r.random(n) < p_drop
    return StepDraws(t, NoisePair(eps_x, eps_m), drop)


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    return prng.stream(seed, "batch", step).choice(n, size=min(batch_size, n), replace=False)


def train_step(params: DenoiserParams, batch: list[PairedSample], schedule: NoiseSchedule,
               rng: np.random.Generator, state: OptimizerState, cfg: TrainConfig,
               draws: StepDraws | None = None) -> tuple[DenoiserParams, float]:
    """One optimisation step on ``batch``; returns the updated params and the loss value.

    Timesteps, noise and dropout flags come from ``rng`` unless ``draws`` is given.
    """
    mcfg = params.config
    if draws is None:
        draws = draw_step(rng, len(batch), mcfg.latent_shape, schedule.T, cfg.p_drop)
    z0, y0 = encode_batch(batch, mcfg)
    lat = forward_diffuse(z0, y0, draws.t, draws.noise, schedule)
    try:
        emb = embed_batch(params, [s.prompt for s in batch], draws.drop)
        px, pm = denoise(params, lat.z, lat.y, draws.t, emb)
        loss = loss_joint(draws.noise, NoisePair(px, pm), cfg.loss)
        params.zero_grad()
        backward(loss)
        grads = params.grads()
        if cfg.grad_clip:
            clip_grad_norm(grads, cfg.grad_clip)
        adamw_step(params.arrays(), grads, state, lr=cfg.lr_at(state.step + 1))
    except NonFiniteError as exc:
        get_tape().reset()
        seeds = [s.seed for s in batch]
        raise TrainingError(f"non-finite value during training ({exc}); batch sample seeds: {seeds}") from exc
    params.trained_steps += 1
    return params, loss.item()


# -- loop ------------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: DenoiserParams
    state: OptimizerState
    losses: list[float]
    checkpoints: list[Path]


def new_model(cfg: TrainConfig) -> tuple[DenoiserParams, OptimizerState]:
    params = init_denoiser(cfg.model, seed=cfg.seed)
    params.meta["schedule"] = {"T": cfg.T, "kind": "linear"}
    state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    return params, state


def train(cfg: TrainConfig, samples: list[PairedSample], *, params: DenoiserParams | None = None,
          state: OptimizerState | None = None, out_dir=None, log_path=None,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train (or resume) until ``cfg.steps`` optimiser steps have been taken.

    Batches, timesteps, noise and dropout are drawn from counter-based
    streams keyed by the step index, so a resumed run reproduces the same
    sequence as an uninterrupted one.
    """
    if not samples:
        raise TrainingError("empty training corpus")
    if params is None:
        params, state = new_model(cfg)
    elif state is None:
        state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    schedule = build_schedule(cfg.T)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    logf = open(log_path, "a") if log_path else None
    losses, ckpts = [], []
    t0 = time.time()
    try:
        for step in range(state.step + 1, cfg.steps + 1):
            idx = batch_indices(cfg.seed, step, len(samples), cfg.batch_size)
            batch = [samples[i] for i in idx]
            rng = prng.stream(cfg.seed, "train", step)
            params, loss = train_step(params, batch, schedule, rng, state, cfg)
            losses.append(loss)
            if on_step:
                on_step(step, loss)
            if logf and (step % cfg.log_every == 0 or step == cfg.steps):
                rec = {"step": step, "loss": loss, "lr": cfg.lr_at(step), "wall_time": round(time.time() - t0, 3)}
                logf.write(json.dumps(rec) + "\n")
                logf.flush()
            if step % cfg.log_every == 0:
                log.info("step %d loss %.4f", step, loss)
            if out and (step % cfg.checkpoint_every == 0 or step == cfg.steps):
                path = out / f"ckpt_{step:06d}.ckpt"
                save_checkpoint(params, cfg, path, state)
                ckpts.append(path)
    finally:
        if logf:
            logf.close()
    return TrainResult(params, state, losses, ckpts)


# -- checkpoints ----------------------------------------------------------------------

def save_checkpoint(params: DenoiserParams, cfg: TrainConfig, path, state: OptimizerState | None = None) -> Path:
    header = {
        "kind": "pairdiff-denoiser",
        "tool_version": __version__,
        "model_version": params.config.version,
        "model_config": params.config.to_dict(),
        "train_config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "schedule": params.meta.get("schedule", {"T": cfg.T, "kind": "linear"}),
        "vocabulary": {f: list(VOCABULARY[f]) for f in FIELDS},
        "trained_steps": params.trained_steps,
        "optimizer": None,
    }
    arrays: dict[str, np.ndarray] = {f"param/{k}": t.data for k, t in params.tensors.items()}
    arrays.update({f"frozen/{k}": v for k, v in params.frozen.items()})
    if state is not None:
        header["optimizer"] = {"step": state.step, **state.hyperparameters()}
        for k in params.tensors:
            if k in state.m:
                arrays[f"adam_m/{k}"] = state.m[k]
                arrays[f"adam_v/{k}"] = state.v[k]
    return write_container(path, header, arrays)


def load_checkpoint(path) -> tuple[DenoiserParams, TrainConfig, OptimizerState | None]:
    header, arrays = read_container(path)
    if header.get("kind") != "pairdiff-denoiser":
        raise CheckpointError(f"{path}: not a denoiser checkpoint")
    if header.get("model_version") != DenoiserConfig().version:
        raise CheckpointError(f"{path}: model version {header.get('model_version')} "
                              f"does not match this build ({DenoiserConfig().version})")
    cfg = TrainConfig.from_dict(header["train_config"])
    if cfg.config_hash() != header.get("config_hash"):
        raise CheckpointError(f"{path}: config hash mismatch")
    mcfg = DenoiserConfig.from_dict(header["model_config"])
    if mcfg != cfg.model:
        raise CheckpointError(f"{path}: model config disagrees with training config")
    tensors, frozen = {}, {}
    m, v = {}, {}
    for key, arr in arrays.items():
        kind, name = key.split("/", 1)
        if kind == "param":
            tensors[name] = Tensor(arr.copy(), requires_grad=True, name=name)
        elif kind == "frozen":
            frozen[name] = arr.copy()
        elif kind == "adam_m":
            m[name] = arr.copy()
        elif kind == "adam_v":
            v[name] = arr.copy()
    from .model.denoiser import parameter_shapes
    expected = parameter_shapes(mcfg)
    if set(expected) != set(tensors) or any(tuple(expected[k]) != tensors[k].shape for k in expected):
        raise CheckpointError(f"{path}: parameter set does not match the model config")
    params = DenoiserParams(mcfg, {k: tensors[k] for k in expected}, frozen,
                            trained_steps=int(header["trained_steps"]),
                            meta={"schedule": header["schedule"]})
    state = None
    opt = header.get("optimizer")
    if opt is not None:
        state = OptimizerState(lr=opt["lr"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"],
                               weight_decay=opt["weight_decay"], step=int(opt["step"]), m=m, v=v)
    return params, cfg, state
