"""Building blocks of the denoiser: convs, norms, residual blocks, attention.

Parameters live in a flat ``dict[str, Tensor]``; each block reads the
entries under its own name prefix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import ops
from ..numerics.tensor import ShapeError, Tensor

Params = dict


# -- parameter shapes -------------------------------------------------------------

def conv_shapes(name: str, cin: int, cout: int, k: int = 3) -> dict[str, tuple]:
    return {f"{name}.w": (cout, cin, k, k), f"{name}.b": (cout,)}


def norm_shapes(name: str, c: int) -> dict[str, tuple]:
    return {f"{name}.g": (c,), f"{name}.b": (c,)}


def linear_shapes(name: str, cin: int, cout: int, bias: bool = True) -> dict[str, tuple]:
    shapes = {f"{name}.w": (cin, cout)}
    if bias:
        shapes[f"{name}.b"] = (cout,)
    return shapes


def attention_shapes(name: str, d: int) -> dict[str, tuple]:
    """Square q/k/v/out projections; only the output projection has a bias."""
    shapes: dict[str, tuple] = {}
    for proj in ("q", "k", "v"):
        shapes.update(linear_shapes(f"{name}.{proj}", d, d, bias=False))
    shapes.update(linear_shapes(f"{name}.o", d, d))
    return shapes


def resblock_shapes(name: str, cin: int, cout: int, tdim: int) -> dict[str, tuple]:
    shapes = {}
    shapes.update(norm_shapes(f"{name}.n1", cin))
    shapes.update(conv_shapes(f"{name}.c1", cin, cout))
    shapes.update(linear_shapes(f"{name}.t", tdim, cout))
    shapes.update(norm_shapes(f"{name}.n2", cout))
    shapes.update(conv_shapes(f"{name}.c2", cout, cout))
    if cin != cout:
        shapes.update(conv_shapes(f"{name}.skip", cin, cout, k=1))
    return shapes


def init_param(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Fan-in scaled normal init for weights, ones for norm gains, zeros for biases."""
    if name.endswith(".g"):
        return np.ones(shape, dtype=np.float32)
    if name.endswith(".b"):
        return np.zeros(shape, dtype=np.float32)
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
    else:
        fan_in = shape[0]
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32)


# -- forward blocks ----------------------------------------------------------------

def conv(p: Params, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = p[f"{name}.w"]
    return ops.conv2d(x, w, p[f"{name}.b"], stride=stride, padding=w.shape[-1] // 2)


def group_norm(p: Params, name: str, x: Tensor, groups: int) -> Tensor:
    return ops.group_norm(x, groups, p[f"{name}.g"], p[f"{name}.b"])


def layer_norm(p: Params, name: str, tokens: Tensor) -> Tensor:
    """Normalise each token (..., d) over its features."""
    shape = tokens.shape
    flat = ops.reshape(tokens, (-1, shape[-1]))
    return ops.reshape(ops.group_norm(flat, 1, p[f"{name}.g"], p[f"{name}.b"]), shape)


def linear(p: Params, name: str, x: Tensor) -> Tensor:
    return ops.linear(x, p[f"{name}.w"], p.get(f"{name}.b"))


def resblock(p: Params, name: str, x: Tensor, temb: Tensor, groups: int) -> Tensor:
    h = conv(p, f"{name}.c1", ops.silu(group_norm(p, f"{name}.n1", x, groups)))
    t = linear(p, f"{name}.t", ops.silu(temb))
    h = ops.add(h, ops.reshape(t, (t.shape[0], t.shape[1], 1, 1)))
    h = conv(p, f"{name}.c2", ops.silu(group_norm(p, f"{name}.n2", h, groups)))
    skip = conv(p, f"{name}.skip", x) if f"{name}.skip.w" in p else x
    return ops.add(skip, h)


@dataclass(frozen=True)
class AttentionBlock:
    """Handle on one attention block's parameters inside a parameter dict."""

    params: Params
    name: str
    heads: int

    @property
    def d_model(self) -> int:
        return self.params[f"{self.name}.q.w"].shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, length, d = x.shape
    return ops.transpose(ops.reshape(x, (n, length, heads, d // heads)), (0, 2, 1, 3))


def attend(block: AttentionBlock, q_feats: Tensor, kv_feats: Tensor) -> tuple[Tensor, Tensor]:
    """Multi-head scaled dot-product attention without the residual.

    Returns the projected output (n, Lq, d) and the attention weights
    (n, heads, Lq, Lk).
    """
    d = block.d_model
    if q_feats.shape[-1] != d or kv_feats.shape[-1] != d:
        raise ShapeError(
            f"attention '{block.name}': feature dims {q_feats.shape} / {kv_feats.shape}, d_model {d}"
        )
    if q_feats.shape[0] != kv_feats.shape[0]:
        raise ShapeError(f"attention '{block.name}': batch sizes {q_feats.shape} / {kv_feats.shape}")
    p, h = block.params, block.heads
    n, lq, _ = q_feats.shape
    q = _split_heads(ops.matmul(q_feats, p[f"{block.name}.q.w"]), h)
    k = _split_heads(ops.matmul(kv_feats, p[f"{block.name}.k.w"]), h)
    v = _split_heads(ops.matmul(kv_feats, p[f"{block.name}.v.w"]), h)
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(block.head_dim))
    weights = ops.softmax(scores)
    out = ops.matmul(weights, v)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (n, lq, d))
    return linear(p, f"{block.name}.o", out), weights


def cross_attention(block: AttentionBlock, q_feats: Tensor, kv_feats: Tensor,
                    residual: Tensor | None = None) -> Tensor:
    """``residual + MHA(q_feats, kv_feats, kv_feats)``; the residual defaults to q_feats.

    Self-attention is the special case ``kv_feats is q_feats``.
    """
    out, _ = attend(block, q_feats, kv_feats)
    return ops.add(q_feats if residual is None else residual, out)


def self_attention(block: AttentionBlock, feats: Tensor, residual: Tensor | None = None) -> Tensor:
    return cross_attention(block, feats, feats, residual)


def joint_cross_attention(block: AttentionBlock, z_feats: Tensor, y_feats: Tensor, *,
                          mask_to_image: bool = True, image_to_mask: bool = True,
                          z_residual: Tensor | None = None,
                          y_residual: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Simultaneous two-way cross-attention between the image and mask streams.

    The image stream is updated by attention whose queries come from the mask
    features and whose keys/values come from its own features; the mask
    stream symmetrically.  Both updates read the pre-update inputs.  A
    disabled branch passes its stream through unchanged.
    """
    if z_feats.shape != y_feats.shape:
        raise ShapeError(f"joint cross-attention: stream shapes {z_feats.shape} and {y_feats.shape} differ")
    z_res = z_feats if z_residual is None else z_residual
    y_res = y_feats if y_residual is None else y_residual
    z_out, y_out = z_res, y_res
    if mask_to_image:
        z_out = ops.add(z_res, attend(block, y_feats, z_feats)[0])
    if image_to_mask:
        y_out = ops.add(y_res, attend(block, z_feats, y_feats)[0])
    return z_out, y_out


def to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return ops.transpose(ops.reshape(x, (n, c, h * w)), (0, 2, 1))


def from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    n, _, c = t.shape
    return ops.reshape(ops.transpose(t, (0, 2, 1)), (n, c, h, w))


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb.astype(np.float32)
