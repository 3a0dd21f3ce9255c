"""Shared-weight dual-stream denoiser.

One parameter set serves both streams.  A forward pass runs the image
latent (with the image prompt embedding) and the mask latent (with the mask
prompt embedding) through the same backbone side by side; inside every
attention stage each stream applies text cross-attention, then
self-attention, then the two streams exchange information through joint
cross-attention.  The image-slot output is the image-noise prediction, the
mask-slot output the mask-noise prediction.  Since every layer is shared and
the exchange is symmetric, calling with the roles swapped returns the
outputs swapped.
"""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from ..numerics import ops
from ..numerics.tensor import NonFiniteError, ShapeError, Tensor
from . import codec, layers
from .prompts import SEQ_LEN, PromptSpec, init_token_table, token_ids

MODEL_VERSION = 1
ATTENTION_STAGES = ("enc1", "mid", "dec1")
JCA_MODES = ("full", "none", "no_mask_to_image", "no_image_to_mask")


@dataclass(frozen=True)
class DenoiserConfig:
    image_channels: int = 1
    image_size: int = 32
    num_classes: int = 2
    codec: str = "identity"
    width: int = 32
    heads: int = 4
    groups: int = 8
    attention_stages: tuple[str, ...] = ATTENTION_STAGES
    jca: str = "full"
    jca_stages: tuple[str, ...] | None = None
    text_seed: int = 1234
    version: int = MODEL_VERSION

    def __post_init__(self):
        if self.jca not in JCA_MODES:
            raise ValueError(f"jca must be one of {JCA_MODES}, got {self.jca!r}")
        bad = set(self.attention_stages) - set(ATTENTION_STAGES)
        if bad:
            raise ValueError(f"unknown attention stages {sorted(bad)}; choose from {ATTENTION_STAGES}")
        if self.jca_stages is not None and set(self.jca_stages) - set(self.attention_stages):
            raise ValueError("jca_stages must be a subset of attention_stages")
        if self.width % self.heads or self.width % self.groups:
            raise ValueError("width must be divisible by heads and groups")
        if self.image_size % 4 or (self.codec == "patchify" and self.image_size % 8):
            raise ValueError(f"image size {self.image_size} not divisible by the backbone's downsampling")
        if not 2 <= self.num_classes <= 4:
            raise ValueError("num_classes must be between 2 and 4")

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return codec.latent_shape(self.codec, self.image_channels, self.image_size)

    @property
    def jca_enabled_stages(self) -> tuple[str, ...]:
        if self.jca == "none":
            return ()
        return tuple(self.attention_stages if self.jca_stages is None else self.jca_stages)

    @property
    def mask_to_image(self) -> bool:
        return self.jca in ("full", "no_image_to_mask")

    @property
    def image_to_mask(self) -> bool:
        return self.jca in ("full", "no_mask_to_image")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["attention_stages"] = list(self.attention_stages)
        if self.jca_stages is not None:
            d["jca_stages"] = list(self.jca_stages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["attention_stages"] = tuple(d.get("attention_stages", ATTENTION_STAGES))
        if d.get("jca_stages") is not None:
            d["jca_stages"] = tuple(d["jca_stages"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def parameter_shapes(cfg: DenoiserConfig) -> dict[str, tuple]:
    """Ordered name -> shape map of every trainable parameter."""
    w, c = cfg.width, cfg.latent_shape[0]
    tdim = w
    s: dict[str, tuple] = {}
    s.update(layers.linear_shapes("time.l1", w, 2 * w))
    s.update(layers.linear_shapes("time.l2", 2 * w, tdim))
    s["null.e_x"] = (SEQ_LEN, w)
    s["null.e_m"] = (SEQ_LEN, w)
    s.update(layers.conv_shapes("conv_in", c, w))
    s.update(layers.resblock_shapes("enc0", w, w, tdim))
    s.update(layers.conv_shapes("down0", w, w))
    s.update(layers.resblock_shapes("enc1", w, w, tdim))
    s.update(layers.conv_shapes("down1", w, w))
    s.update(layers.resblock_shapes("mid", w, w, tdim))
    s.update(layers.conv_shapes("up1", w, w))
    s.update(layers.resblock_shapes("dec1", 2 * w, w, tdim))
    s.update(layers.conv_shapes("up0", w, w))
    s.update(layers.resblock_shapes("dec0", 2 * w, w, tdim))
    s.update(layers.norm_shapes("out_norm", w))
    s.update(layers.conv_shapes("conv_out", w, c))
    for stage in cfg.attention_stages:
        for part in ("text", "self"):
            s.update(layers.norm_shapes(f"{stage}.{part}_norm", w))
            s.update(layers.attention_shapes(f"{stage}.{part}", w))
    for stage in cfg.jca_enabled_stages:
        s.update(jca_shapes(stage, w))
    return s


def jca_shapes(stage: str, w: int) -> dict[str, tuple]:
    s = layers.norm_shapes(f"{stage}.jca_norm", w)
    s.update(layers.attention_shapes(f"{stage}.jca", w))
    return s


def parameter_count(cfg: DenoiserConfig) -> int:
    return int(sum(np.prod(shape) for shape in parameter_shapes(cfg).values()))


def jca_parameter_count(cfg: DenoiserConfig) -> int:
    """Closed form: per JCA stage, four d x d projections, an output bias and a norm."""
    w = cfg.width
    return len(cfg.jca_enabled_stages) * (4 * w * w + w + 2 * w)


@dataclass
class PromptEmbedding:
    e_x: Tensor
    e_m: Tensor


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    tensors: dict[str, Tensor]
    frozen: dict[str, np.ndarray]
    trained_steps: int = 0
    meta: dict = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def check_finite(self) -> None:
        for k, t in self.tensors.items():
            if not np.isfinite(t.data).all():
                raise NonFiniteError("parameters", f"'{k}' contains NaN or inf")


def init_denoiser(cfg: DenoiserConfig, seed: int) -> DenoiserParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.startswith("null."):
            arr = rng.standard_normal(shape).astype(np.float32)
        else:
            arr = layers.init_param(name, shape, rng)
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    # small output head so the untrained network is near zero but not constant
    tensors["conv_out.w"].data *= 0.1
    frozen = {"text.table": init_token_table(cfg.width, cfg.text_seed)}
    return DenoiserParams(cfg, tensors, frozen)


# -- prompt embeddings ---------------------------------------------------------------

def encode_prompt(params: DenoiserParams, p: PromptSpec) -> PromptEmbedding:
    """Frozen-table lookup; the all-null prompt maps to the learned null pair."""
    if p.is_null:
        return PromptEmbedding(params.tensors["null.e_x"], params.tensors["null.e_m"])
    table = params.frozen["text.table"]
    return PromptEmbedding(Tensor(table[token_ids(p, "image")]), Tensor(table[token_ids(p, "mask")]))


def embed_batch(params: DenoiserParams, prompts: list[PromptSpec],
                drop: np.ndarray | None = None) -> PromptEmbedding:
    """Batch embeddings (n, L, d); prompts flagged in ``drop`` use the null pair.

    The null parameters only enter the graph when at least one row is null.
    """
    table = params.frozen["text.table"]
    n = len(prompts)
    null = np.array([p.is_null for p in prompts], dtype=bool)
    if drop is not None:
        null |= np.asarray(drop, dtype=bool)
    out = []
    for stream, key in (("image", "null.e_x"), ("mask", "null.e_m")):
        const = np.zeros((n, SEQ_LEN, table.shape[1]), dtype=np.float32)
        for i, p in enumerate(prompts):
            if not null[i]:
                const[i] = table[token_ids(p, stream)]
        e = Tensor(const)
        if null.any():
            nt = params.tensors[key]
            sel = Tensor(null.astype(np.float32).reshape(n, 1))
            rows = ops.matmul(sel, ops.reshape(nt, (1, -1)))
            e = ops.add(e, ops.reshape(rows, const.shape))
        out.append(e)
    return PromptEmbedding(*out)


# -- forward -----------------------------------------------------------------------------

@contextlib.contextmanager
def _layer(name: str):
    try:
        yield
    except NonFiniteError as exc:
        raise NonFiniteError(f"{name}/{exc.op}") from exc


def time_embedding(params: DenoiserParams, t) -> Tensor:
    p = params.tensors
    cfg = params.config
    base = Tensor(layers.sinusoidal_embedding(np.asarray(t), cfg.width))
    h = ops.silu(layers.linear(p, "time.l1", base))
    return layers.linear(p, "time.l2", h)


def _attention_stage(params: DenoiserParams, stage: str, hz: Tensor, hy: Tensor,
                     emb: PromptEmbedding) -> tuple[Tensor, Tensor]:
    p, cfg = params.tensors, params.config
    h, w = hz.shape[2:]
    streams = [layers.to_tokens(hz), layers.to_tokens(hy)]
    texts = [emb.e_x, emb.e_m]
    text = layers.AttentionBlock(p, f"{stage}.text", cfg.heads)
    selfb = layers.AttentionBlock(p, f"{stage}.self", cfg.heads)
    for i in range(2):
        tok = streams[i]
        tok = layers.cross_attention(text, layers.layer_norm(p, f"{stage}.text_norm", tok), texts[i], residual=tok)
        normed = layers.layer_norm(p, f"{stage}.self_norm", tok)
        streams[i] = layers.self_attention(selfb, normed, residual=tok)
    if stage in cfg.jca_enabled_stages:
        jca = layers.AttentionBlock(p, f"{stage}.jca", cfg.heads)
        nz = layers.layer_norm(p, f"{stage}.jca_norm", streams[0])
        ny = layers.layer_norm(p, f"{stage}.jca_norm", streams[1])
        streams = list(layers.joint_cross_attention(
            jca, nz, ny, mask_to_image=cfg.mask_to_image, image_to_mask=cfg.image_to_mask,
            z_residual=streams[0], y_residual=streams[1]))
    return layers.from_tokens(streams[0], h, w), layers.from_tokens(streams[1], h, w)


def _both(fn, pair):
    return fn(pair[0]), fn(pair[1])


def denoise(params: DenoiserParams, z_t, y_t, t, emb: PromptEmbedding) -> tuple[Tensor, Tensor]:
    """Predict (image noise, mask noise) for latents (n, c, h, w) at timesteps t."""
    cfg = params.config
    p = params.tensors
    z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    y_t = y_t if isinstance(y_t, Tensor) else Tensor(y_t)
    if z_t.shape != y_t.shape:
        raise ShapeError(f"denoise: image latent {z_t.shape} and mask latent {y_t.shape} differ")
    if z_t.shape[1:] != cfg.latent_shape:
        raise ShapeError(f"denoise: latent shape {z_t.shape[1:]} != configured {cfg.latent_shape}")
    t = np.broadcast_to(np.asarray(t), (z_t.shape[0],))
    g = cfg.groups

    with _layer("time"):
        temb = time_embedding(params, t)
    with _layer("enc0"):
        h0 = _both(lambda x: layers.resblock(p, "enc0", layers.conv(p, "conv_in", x), temb, g), (z_t, y_t))
    with _layer("enc1"):
        h1 = _both(lambda x: layers.resblock(p, "enc1", layers.conv(p, "down0", x, stride=2), temb, g), h0)
    if "enc1" in cfg.attention_stages:
        with _layer("enc1.attn"):
            h1 = _attention_stage(params, "enc1", *h1, emb)
    with _layer("mid"):
        h2 = _both(lambda x: layers.resblock(p, "mid", layers.conv(p, "down1", x, stride=2), temb, g), h1)
    if "mid" in cfg.attention_stages:
        with _layer("mid.attn"):
            h2 = _attention_stage(params, "mid", *h2, emb)
    with _layer("dec1"):
        u1 = tuple(
            layers.resblock(p, "dec1", ops.concat([layers.conv(p, "up1", ops.upsample2x(x)), s], axis=1), temb, g)
            for x, s in zip(h2, h1)
        )
    if "dec1" in cfg.attention_stages:
        with _layer("dec1.attn"):
            u1 = _attention_stage(params, "dec1", *u1, emb)
    with _layer("dec0"):
        u0 = tuple(
            layers.resblock(p, "dec0", ops.concat([layers.conv(p, "up0", ops.upsample2x(x)), s], axis=1), temb, g)
            for x, s in zip(u1, h0)
        )
    with _layer("out"):
        out = _both(lambda x: layers.conv(p, "conv_out", ops.silu(layers.group_norm(p, "out_norm", x, g))), u0)
    return out
