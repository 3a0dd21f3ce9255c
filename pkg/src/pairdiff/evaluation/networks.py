"""Small auxiliary networks: the proxy feature extractor and the downstream segmenter."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..corpus import PairedSample
from ..model import layers
from ..model.prompts import VOCABULARY
from ..numerics import ops
from ..numerics import rng as prng
from ..numerics.optim import OptimizerState, adamw_step
from ..numerics.tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

LABELS = VOCABULARY["target_label"]


class AccuracyFloorError(RuntimeError):
    pass


def _init(shapes: dict[str, tuple], seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    return {k: Tensor(layers.init_param(k, s, rng), requires_grad=True, name=k) for k, s in shapes.items()}


def _images(samples: list[PairedSample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32) * 2.0 - 1.0


def _fit(tensors: dict[str, Tensor], loss_fn, n: int, *, steps: int, batch_size: int, lr: float,
         seed: int, tag: str) -> list[float]:
    state = OptimizerState(lr=lr, weight_decay=0.0)
    arrays = {k: t.data for k, t in tensors.items()}
    losses = []
    for step in range(1, steps + 1):
        idx = prng.stream(seed, tag, step).choice(n, size=min(batch_size, n), replace=False)
        for t in tensors.values():
            t.grad = None
        loss = loss_fn(np.sort(idx))
        backward(loss)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
        adamw_step(arrays, grads, state)
        losses.append(loss.item())
    return losses


# -- proxy feature extractor -------------------------------------------------------------

@dataclass(frozen=True)
class FeatureExtractorConfig:
    width: int = 8
    feature_dim: int = 32
    steps: int = 800
    batch_size: int = 32
    lr: float = 3e-3
    seed: int = 0
    min_accuracy: float = 0.90


@dataclass
class FeatureExtractor:
    config: FeatureExtractorConfig
    tensors: dict[str, Tensor]
    accuracy: float = float("nan")

    @property
    def num_classes(self) -> int:
        return len(LABELS)

    def _trunk(self, x: Tensor) -> Tensor:
        p = self.tensors
        h = ops.silu(layers.conv(p, "c1", x))
        h = ops.silu(layers.conv(p, "c2", h, stride=2))
        h = ops.silu(layers.conv(p, "c3", h, stride=2))
        return ops.silu(layers.linear(p, "fc", ops.mean(h, axis=(2, 3))))

    def logits(self, x: Tensor) -> Tensor:
        return layers.linear(self.tensors, "head", self._trunk(x))

    def features(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Penultimate-layer features (n, feature_dim) of images in [0, 1]."""
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                x = np.asarray(images[i:i + batch_size], dtype=np.float32) * 2.0 - 1.0
                out.append(self._trunk(Tensor(x)).data)
        return np.concatenate(out).astype(np.float64)

    def probabilities(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                x = np.asarray(images[i:i + batch_size], dtype=np.float32) * 2.0 - 1.0
                out.append(ops.softmax(self.logits(Tensor(x))).data)
        p = np.concatenate(out).astype(np.float64)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.probabilities(images).argmax(axis=1)


def feature_extractor_shapes(cfg: FeatureExtractorConfig, channels: int = 1) -> dict[str, tuple]:
    w = cfg.width
    s = {}
    s.update(layers.conv_shapes("c1", channels, w))
    s.update(layers.conv_shapes("c2", w, 2 * w))
    s.update(layers.conv_shapes("c3", 2 * w, 2 * w))
    s.update(layers.linear_shapes("fc", 2 * w, cfg.feature_dim))
    s.update(layers.linear_shapes("head", cfg.feature_dim, len(LABELS)))
    return s


def label_ids(samples: list[PairedSample]) -> np.ndarray:
    return np.array([LABELS.index(s.prompt.target_label) for s in samples])


def train_feature_extractor(train: list[PairedSample], held_out: list[PairedSample],
                            cfg: FeatureExtractorConfig = FeatureExtractorConfig()) -> FeatureExtractor:
    """Fit the target-label classifier; raises if held-out accuracy is below the floor."""
    channels = train[0].image.shape[0]
    fx = FeatureExtractor(cfg, _init(feature_extractor_shapes(cfg, channels), cfg.seed))
    x, y = _images(train), label_ids(train)

    def loss_fn(idx):
        return ops.cross_entropy(fx.logits(Tensor(x[idx])), y[idx])

    _fit(fx.tensors, loss_fn, len(train), steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr,
         seed=cfg.seed, tag="feature-extractor")
    pred = fx.predict(np.stack([s.image for s in held_out]))
    fx.accuracy = float((pred == label_ids(held_out)).mean())
    log.info("feature extractor held-out accuracy %.3f", fx.accuracy)
    if fx.accuracy < cfg.min_accuracy:
        raise AccuracyFloorError(
            f"feature extractor reached {fx.accuracy:.3f} held-out accuracy, below the "
            f"{cfg.min_accuracy:.2f} floor; increase steps or width in the extractor config")
    return fx


# -- downstream segmenter --------------------------------------------------------------------

@dataclass(frozen=True)
class SegmenterConfig:
    width: int = 8
    steps: int = 200
    batch_size: int = 16
    lr: float = 3e-3
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SegmenterParams:
    config: SegmenterConfig
    num_classes: int
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


def segmenter_shapes(cfg: SegmenterConfig, channels: int, num_classes: int) -> dict[str, tuple]:
    w = cfg.width
    s = {}
    s.update(layers.conv_shapes("e0a", channels, w))
    s.update(layers.conv_shapes("e0b", w, w))
    s.update(layers.conv_shapes("down", w, 2 * w))
    s.update(layers.conv_shapes("e1", 2 * w, 2 * w))
    s.update(layers.conv_shapes("up", 2 * w, w))
    s.update(layers.conv_shapes("d0", 2 * w, w))
    s.update(layers.conv_shapes("out", w, num_classes, k=1))
    return s


def init_segmenter(cfg: SegmenterConfig, channels: int, num_classes: int) -> SegmenterParams:
    return SegmenterParams(cfg, num_classes, _init(segmenter_shapes(cfg, channels, num_classes), cfg.seed))


def segmenter_logits(sp: SegmenterParams, x: Tensor) -> Tensor:
    p = sp.tensors
    e0 = ops.silu(layers.conv(p, "e0b", ops.silu(layers.conv(p, "e0a", x))))
    e1 = ops.silu(layers.conv(p, "e1", ops.silu(layers.conv(p, "down", e0, stride=2))))
    u = ops.silu(layers.conv(p, "up", ops.upsample2x(e1)))
    d = ops.silu(layers.conv(p, "d0", ops.concat([u, e0], axis=1)))
    return layers.conv(p, "out", d)


def train_segmenter(samples: list[PairedSample], cfg: SegmenterConfig = SegmenterConfig(),
                    num_classes: int = 2) -> SegmenterParams:
    """Pixel-wise cross-entropy training on (image, mask) pairs, any provenance."""
    if not samples:
        raise ValueError("segmenter needs at least one training pair")
    sp = init_segmenter(cfg, samples[0].image.shape[0], num_classes)
    x = _images(samples)
    y = np.stack([s.mask for s in samples])

    def loss_fn(idx):
        return ops.cross_entropy(segmenter_logits(sp, Tensor(x[idx])), y[idx], axis=1)

    _fit(sp.tensors, loss_fn, len(samples), steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr,
         seed=cfg.seed, tag="segmenter")
    return sp


def segment(sp: SegmenterParams, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = np.asarray(images[i:i + batch_size], dtype=np.float32) * 2.0 - 1.0
            out.append(segmenter_logits(sp, Tensor(x)).data.argmax(axis=1))
    return np.concatenate(out).astype(np.int64)
