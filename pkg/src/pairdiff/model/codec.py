"""Latent codec between pixel space and diffusion space.

``identity`` rescales [0, 1] to [-1, 1].  ``patchify`` does the same and then
folds each 2x2 pixel block into channels (space-to-depth).  Masks go through
the same codec after being rasterised to grey levels, so both streams share
one latent shape.
"""

from __future__ import annotations

import numpy as np

CODECS = ("identity", "patchify")


class CodecError(ValueError):
    pass


def _check_mode(mode: str) -> None:
    if mode not in CODECS:
        raise CodecError(f"unknown codec {mode!r}; expected one of {CODECS}")


def latent_shape(mode: str, channels: int, size: int) -> tuple[int, int, int]:
    _check_mode(mode)
    if mode == "patchify":
        if size % 2:
            raise CodecError(f"patchify needs an even image size, got {size}")
        return 4 * channels, size // 2, size // 2
    return channels, size, size


def space_to_depth(x: np.ndarray) -> np.ndarray:
    *lead, c, h, w = x.shape
    k = len(lead)
    x = x.reshape(*lead, c, h // 2, 2, w // 2, 2)
    x = x.transpose(*range(k), k, k + 2, k + 4, k + 1, k + 3)
    return x.reshape(*lead, 4 * c, h // 2, w // 2)


def depth_to_space(x: np.ndarray) -> np.ndarray:
    *lead, c4, h2, w2 = x.shape
    k = len(lead)
    x = x.reshape(*lead, c4 // 4, 2, 2, h2, w2)
    x = x.transpose(*range(k), k, k + 3, k + 1, k + 4, k + 2)
    return x.reshape(*lead, c4 // 4, 2 * h2, 2 * w2)


def encode(image: np.ndarray, mode: str = "identity") -> np.ndarray:
    """Map an image (..., c, h, w) with values in [0, 1] to its latent."""
    _check_mode(mode)
    image = np.asarray(image, dtype=np.float32)
    if image.size and (image.min() < 0.0 or image.max() > 1.0 or not np.isfinite(image).all()):
        raise CodecError(f"image values must lie in [0, 1], got [{image.min()}, {image.max()}]")
    z = image * 2.0 - 1.0
    return space_to_depth(z) if mode == "patchify" else z


def decode(latent: np.ndarray, mode: str = "identity") -> np.ndarray:
    """Inverse of :func:`encode`; values are clamped back into [0, 1]."""
    _check_mode(mode)
    latent = np.asarray(latent, dtype=np.float32)
    if not np.isfinite(latent).all():
        raise CodecError("cannot decode a latent containing NaN or inf")
    z = depth_to_space(latent) if mode == "patchify" else latent
    return np.clip((z + 1.0) * 0.5, 0.0, 1.0)


def rasterize_mask(mask: np.ndarray, num_classes: int, channels: int = 1) -> np.ndarray:
    """Label map (..., h, w) -> grey image (..., channels, h, w), class k at k/(C-1)."""
    grey = np.asarray(mask, dtype=np.float32) / float(num_classes - 1)
    grey = grey[..., None, :, :]
    if channels > 1:
        grey = np.repeat(grey, channels, axis=-3)
    return grey


def mask_from_grey(grey: np.ndarray, num_classes: int) -> np.ndarray:
    """Grey image (..., c, h, w) -> label map by nearest class level (channel mean)."""
    g = np.asarray(grey, dtype=np.float32).mean(axis=-3)
    return np.clip(np.rint(g * (num_classes - 1)), 0, num_classes - 1).astype(np.int64)
