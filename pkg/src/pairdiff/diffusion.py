"""Noise schedule, paired forward diffusion and the guided ancestral sampler.

Timesteps are 1-based: ``t = 1..T`` maps to ``alpha_bars[t - 1]`` and
``t = 0`` denotes the clean latent (alpha_bar = 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import PairedSample
from .model import codec
from .model.denoiser import DenoiserParams, denoise, embed_batch
from .model.prompts import NULL_PROMPT, PromptSpec
from .numerics import rng as prng
from .numerics.tensor import NonFiniteError, ShapeError, Tensor, no_grad

SAMPLER = "ddpm-ancestral"
DEFAULT_STEPS = 50
DEFAULT_GUIDANCE = 7.5


class UntrainedModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "linear"

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]: {t}")
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind}


def build_schedule(T: int = 1000, kind: str = "linear",
                   beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"schedule needs T >= 1, got {T}")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(T, betas, np.cumprod(1.0 - betas), kind)


@dataclass
class NoisePair:
    eps_x: np.ndarray
    eps_m: np.ndarray


@dataclass
class PairedLatent:
    z: np.ndarray
    y: np.ndarray
    t: np.ndarray | int


def _per_sample(coef: np.ndarray, like: np.ndarray) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape((-1,) + (1,) * (like.ndim - 1))


def diffuse_with_alpha_bar(z0, y0, alpha_bar, noise: NoisePair) -> tuple[np.ndarray, np.ndarray]:
    """``sqrt(ab) * x0 + sqrt(1 - ab) * eps`` for both streams with a shared ab."""
    z0, y0 = np.asarray(z0), np.asarray(y0)
    if z0.shape != y0.shape or np.shape(noise.eps_x) != z0.shape or np.shape(noise.eps_m) != z0.shape:
        raise ShapeError(f"forward diffusion: shapes {z0.shape}, {y0.shape}, "
                         f"{np.shape(noise.eps_x)}, {np.shape(noise.eps_m)} must agree")
    ab = _per_sample(alpha_bar, z0)
    a, s = np.sqrt(ab), np.sqrt(1.0 - ab)
    dtype = np.result_type(z0.dtype, np.float32)
    z = (a * z0 + s * noise.eps_x).astype(dtype)
    y = (a * y0 + s * noise.eps_m).astype(dtype)
    return z, y


def forward_diffuse(z0, y0, t, noise: NoisePair, s: NoiseSchedule) -> PairedLatent:
    """Noise both clean latents to step t (scalar or one per sample), independent noise per stream."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > s.T):
        raise ValueError(f"forward_diffuse: t must lie in [1, {s.T}], got {t}")
    z, y = diffuse_with_alpha_bar(z0, y0, s.alpha_bar(t_arr), noise)
    return PairedLatent(z, y, t)


def cfg_combine(eps_uncond, eps_cond, scale: float):
    """Classifier-free guidance, written as ``(1 - s) * u + s * c``.

    Equal to ``u + s * (c - u)``; this form returns ``c`` exactly at s = 1 and
    ``u`` exactly at s = 0.
    """
    u = eps_uncond.data if isinstance(eps_uncond, Tensor) else np.asarray(eps_uncond)
    c = eps_cond.data if isinstance(eps_cond, Tensor) else np.asarray(eps_cond)
    if u.shape != c.shape:
        raise ShapeError(f"cfg_combine: shapes {u.shape} and {c.shape} differ")
    s = float(scale)
    return (1.0 - s) * u + s * c


def inference_timesteps(T: int, steps: int) -> list[int]:
    """Evenly strided descending subsequence, e.g. T=1000, steps=50 -> 1000, 980, ..., 20."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if T % steps:
        raise ValueError(f"steps={steps} does not divide the {T}-step schedule evenly")
    stride = T // steps
    return [T - i * stride for i in range(steps)]


def posterior_step(x, eps, t: int, t_prev: int, s: NoiseSchedule, noise=None, clip_x0: bool = True):
    """One DDPM ancestral update from step t to t_prev (posterior variance beta-tilde)."""
    ab_t = float(s.alpha_bar(t))
    ab_prev = float(s.alpha_bar(t_prev))
    beta = 1.0 - ab_t / ab_prev
    x0 = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    if clip_x0:
        x0 = np.clip(x0, -1.0, 1.0)
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = c0 * x0 + ct * x
    if t_prev > 0 and noise is not None:
        var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
        mean = mean + np.sqrt(var) * noise
    return mean.astype(x.dtype, copy=False)


def schedule_for(params: DenoiserParams) -> NoiseSchedule:
    sch = params.meta.get("schedule", {"T": 1000, "kind": "linear"})
    return build_schedule(int(sch["T"]), sch.get("kind", "linear"))


def sample_latents(params: DenoiserParams, prompts: list[PromptSpec], seeds: list[int], *,
                   steps: int = DEFAULT_STEPS, guidance: float | None = DEFAULT_GUIDANCE,
                   schedule: NoiseSchedule | None = None, clip_x0: bool = True,
                   allow_untrained: bool = False, trajectory: list | None = None):
    """Run the two-stream sampler; returns final (z, y) latents of shape (n, c, h, w).

    Each sample's initial noise and per-step noise come from its own seed,
    with separate streams for the image and mask latents.  ``guidance=None``
    evaluates only the conditional branch.  If ``trajectory`` is a list, the
    latents after every step are appended to it.
    """
    if len(prompts) != len(seeds):
        raise ValueError("need one seed per prompt")
    if params.trained_steps <= 0 and not allow_untrained:
        raise UntrainedModelError("model has no training steps; refusing to sample")
    params.check_finite()
    s = schedule or schedule_for(params)
    ts = inference_timesteps(s.T, steps)
    shape = params.config.latent_shape
    z = np.stack([prng.normal(sd, "sampler", "init", "z", shape=shape) for sd in seeds])
    y = np.stack([prng.normal(sd, "sampler", "init", "y", shape=shape) for sd in seeds])
    with no_grad():
        emb_c = embed_batch(params, prompts)
        emb_u = embed_batch(params, [NULL_PROMPT] * len(prompts)) if guidance is not None else None
        for k, t in enumerate(ts):
            t_prev = ts[k + 1] if k + 1 < len(ts) else 0
            cz, cy = denoise(params, z, y, t, emb_c)
            if guidance is None:
                ez, ey = cz.data, cy.data
            else:
                uz, uy = denoise(params, z, y, t, emb_u)
                ez, ey = cfg_combine(uz, cz, guidance), cfg_combine(uy, cy, guidance)
            nz = np.stack([prng.normal(sd, "sampler", "z", k, shape=shape) for sd in seeds])
            ny = np.stack([prng.normal(sd, "sampler", "y", k, shape=shape) for sd in seeds])
            z = posterior_step(z, ez, t, t_prev, s, nz, clip_x0)
            y = posterior_step(y, ey, t, t_prev, s, ny, clip_x0)
            if not (np.isfinite(z).all() and np.isfinite(y).all()):
                raise NonFiniteError("sampler", f"step t={t}")
            if trajectory is not None:
                trajectory.append((z.copy(), y.copy()))
    return z, y


def decode_pair(params: DenoiserParams, z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cfg = params.config
    image = codec.decode(z, cfg.codec)
    mask = codec.mask_from_grey(codec.decode(y, cfg.codec), cfg.num_classes)
    return image, mask


def sample_pairs(params: DenoiserParams, prompts: list[PromptSpec], seeds: list[int], *,
                 steps: int = DEFAULT_STEPS, guidance: float | None = DEFAULT_GUIDANCE,
                 batch_size: int = 32, **kw) -> list[PairedSample]:
    """Generate decoded (image, mask) pairs, processed in fixed-size chunks."""
    out: list[PairedSample] = []
    for start in range(0, len(prompts), batch_size):
        ps, ss = prompts[start:start + batch_size], seeds[start:start + batch_size]
        z, y = sample_latents(params, ps, ss, steps=steps, guidance=guidance, **kw)
        images, masks = decode_pair(params, z, y)
        for p, sd, img, m in zip(ps, ss, images, masks):
            out.append(PairedSample(img, m, p, "synthetic", int(sd)))
    return out


def sample_pair(params: DenoiserParams, prompt: PromptSpec, steps: int = DEFAULT_STEPS,
                guidance: float | None = DEFAULT_GUIDANCE, seed: int = 0, **kw) -> PairedSample:
    return sample_pairs(params, [prompt], [seed], steps=steps, guidance=guidance, **kw)[0]
