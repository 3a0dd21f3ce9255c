"""Procedural phantom corpus of (image, mask, prompt) triples.

Every image is a smooth textured background with one to three elliptical
blobs.  Class k occupies the intensity band ``[k/C + m, (k+1)/C - m]`` with
margin ``m = 0.1/C``, so thresholding at the band boundaries ``k/C``
recovers the mask exactly.  Blob count, shape and brightness follow the
prompt's target label and condition; background texture follows modality and
region.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .model.prompts import FIELDS, VOCABULARY, PromptSpec
from .numerics import rng as prng

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
PROVENANCES = ("real", "synthetic")

# target label -> (base blob count, axis-ratio range, brightness position in band)
LABEL_PROFILES = {
    "liver": (1, (0.55, 0.80), 0.25),
    "kidney": (2, (0.45, 0.65), 0.40),
    "spleen": (1, (0.30, 0.50), 0.55),
    "tumor": (1, (0.80, 1.00), 0.70),
    "polyp": (2, (0.70, 1.00), 0.85),
}
# condition -> (extra blobs, size scale, brightness shift in band units)
CONDITION_PROFILES = {
    "healthy": (0, 1.00, 0.00),
    "lesion": (1, 0.80, 0.04),
    "enlarged": (0, 1.35, 0.00),
    "cystic": (1, 0.70, -0.04),
}
# modality -> (noise smoothing sigma in px, noise amplitude in band units)
MODALITY_PROFILES = {
    "ct": (1.5, 0.10),
    "mri": (3.0, 0.18),
    "ultrasound": (0.7, 0.22),
    "endoscopy": (4.0, 0.12),
}
# region -> (gradient angle in degrees, gradient strength, base level in band units)
REGION_PROFILES = {
    "abdomen": (0.0, 0.25, 0.45),
    "chest": (90.0, 0.35, 0.35),
    "pelvis": (45.0, 0.20, 0.55),
    "head": (135.0, 0.30, 0.40),
}


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    size: int = 32
    channels: int = 1
    num_classes: int = 2
    min_fraction: float = 0.02
    max_fraction: float = 0.30

    def __post_init__(self):
        if self.size not in (32, 64) and self.size % 8:
            raise CorpusError(f"image size must be a multiple of 8, got {self.size}")
        if not 2 <= self.num_classes <= 4:
            raise CorpusError("num_classes must be between 2 and 4")
        if not 0 < self.min_fraction < self.max_fraction < 1:
            raise CorpusError("need 0 < min_fraction < max_fraction < 1")

    def band(self, k: int) -> tuple[float, float]:
        c = self.num_classes
        m = 0.1 / c
        return k / c + m, (k + 1) / c - m

    @property
    def thresholds(self) -> list[float]:
        return [k / self.num_classes for k in range(1, self.num_classes)]

    @property
    def palette(self) -> list[int]:
        """Display grey level (0-255) of each class."""
        return [round(255 * k / (self.num_classes - 1)) for k in range(self.num_classes)]

    def to_dict(self) -> dict:
        return {"size": self.size, "channels": self.channels, "num_classes": self.num_classes,
                "min_fraction": self.min_fraction, "max_fraction": self.max_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        return cls(**d)


@dataclass
class PairedSample:
    image: np.ndarray          # (c, h, w) float32 in [0, 1]
    mask: np.ndarray           # (h, w) int64 class ids
    prompt: PromptSpec
    provenance: str = "real"
    seed: int = 0

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise CorpusError(f"provenance must be one of {PROVENANCES}")
        if self.image.shape[-2:] != self.mask.shape:
            raise CorpusError(f"image {self.image.shape} and mask {self.mask.shape} differ spatially")


@dataclass
class ManifestEntry:
    image: str
    mask: str
    prompt: PromptSpec
    provenance: str
    seed: int


@dataclass
class DatasetManifest:
    corpus: CorpusConfig
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> dict:
        return {
            "format_version": MANIFEST_VERSION,
            "corpus": self.corpus.to_dict(),
            "vocabulary": {f: list(VOCABULARY[f]) for f in FIELDS},
            "palette": self.corpus.palette,
            "samples": [
                {"image": e.image, "mask": e.mask, "prompt": e.prompt.to_dict(),
                 "provenance": e.provenance, "seed": e.seed}
                for e in self.entries
            ],
        }


# -- rendering ---------------------------------------------------------------------

def _blob_params(p: PromptSpec) -> tuple[int, tuple[float, float], float, float]:
    base, ratio, bright = LABEL_PROFILES[p.target_label]
    extra, scale, shift = CONDITION_PROFILES[p.condition or "healthy"]
    return min(3, base + extra), ratio, scale, bright + shift


def _ellipse(size: int, cy, cx, a, b, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _background(p: PromptSpec, cfg: CorpusConfig, rng: np.random.Generator) -> np.ndarray:
    sigma, amp = MODALITY_PROFILES[p.modality or "ct"]
    angle, strength, base = REGION_PROFILES[p.region or "abdomen"]
    n = cfg.size
    noise = ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma, mode="wrap")
    noise /= noise.std() + 1e-12
    yy, xx = (np.mgrid[0:n, 0:n] + 0.5) / n - 0.5
    th = np.deg2rad(angle)
    grad = xx * np.cos(th) + yy * np.sin(th)
    rel = base + strength * grad + amp * 0.5 * noise
    lo, hi = cfg.band(0)
    return lo + (hi - lo) * np.clip(rel, 0.0, 1.0)


def generate_sample(p: PromptSpec, seed: int, cfg: CorpusConfig = CorpusConfig()) -> PairedSample:
    """Render one phantom; deterministic in (prompt, seed, config)."""
    if p.target_label is None:
        raise CorpusError("phantoms need a target_label; target-free generation is not supported")
    rng = prng.stream(seed, "phantom")
    n = cfg.size
    count, (r_lo, r_hi), scale, bright = _blob_params(p)
    total = n * n
    for _attempt in range(200):
        mask = np.zeros((n, n), dtype=np.int64)
        for j in range(count):
            a = rng.uniform(0.12, 0.26) * n * scale / np.sqrt(count)
            b = a * rng.uniform(r_lo, r_hi)
            theta = rng.uniform(0, np.pi)
            ext = a + 1.0
            cy = rng.uniform(ext, n - ext)
            cx = rng.uniform(ext, n - ext)
            blob = _ellipse(n, cy, cx, a, b, theta)
            cls = 1 + j % (cfg.num_classes - 1)
            mask[blob & (mask == 0)] = cls
        frac = (mask > 0).sum() / total
        if cfg.min_fraction <= frac <= cfg.max_fraction:
            break
    else:
        raise CorpusError(f"could not place blobs within the area range for seed {seed}")

    bg = _background(p, cfg, rng)
    texture = ndimage.gaussian_filter(rng.standard_normal((n, n)), 1.0)
    image = bg.copy()
    for k in range(1, cfg.num_classes):
        lo, hi = cfg.band(k)
        level = np.clip(bright + 0.04 * texture, 0.0, 1.0)
        image = np.where(mask == k, lo + (hi - lo) * level, image)
    image = np.repeat(image[None].astype(np.float32), cfg.channels, axis=0)
    return PairedSample(image, mask, p, "real", int(seed))


def sample_seed(master_seed: int, index: int) -> int:
    if index >= 2 ** 20:
        raise CorpusError("corpus index too large")
    return int(master_seed) * 2 ** 20 + int(index)


def random_prompt(master_seed: int, index: int) -> PromptSpec:
    rng = prng.stream(master_seed, "prompt", index)
    return PromptSpec(*(VOCABULARY[f][rng.integers(len(VOCABULARY[f]))] for f in FIELDS))


def generate_corpus(count: int, master_seed: int, cfg: CorpusConfig = CorpusConfig(),
                    prompts: list[PromptSpec] | None = None) -> list[PairedSample]:
    out = []
    for i in range(count):
        p = prompts[i % len(prompts)] if prompts else random_prompt(master_seed, i)
        out.append(generate_sample(p, sample_seed(master_seed, i), cfg))
    return out


# -- oracle ------------------------------------------------------------------------------

def oracle_segment(image: np.ndarray, cfg: CorpusConfig = CorpusConfig()) -> np.ndarray:
    """Label map from the band thresholds of the (channel-averaged) image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    return np.digitize(img, cfg.thresholds).astype(np.int64)


def connected_components(mask: np.ndarray, cls: int | None = None) -> tuple[np.ndarray, int]:
    """4-connected components of the pixels of class ``cls`` (any foreground if None)."""
    fg = mask > 0 if cls is None else mask == cls
    labels, count = ndimage.label(fg)
    return labels, int(count)


# -- import / export ---------------------------------------------------------------------

def _to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def _save_png(img: Image.Image, path: Path) -> None:
    img.save(path, format="PNG", optimize=False)


def export_dataset(samples: list[PairedSample], directory, cfg: CorpusConfig,
                   prefix: str = "") -> DatasetManifest:
    """Write images (8-bit greyscale PNG), masks (8-bit indexed PNG) and manifest.json."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    seen = set()
    manifest = DatasetManifest(cfg, root=root)
    palette = []
    for level in cfg.palette:
        palette += [level, level, level]
    for i, s in enumerate(samples):
        if s.image.shape != (cfg.channels, cfg.size, cfg.size):
            raise CorpusError(f"sample {i} has shape {s.image.shape}, corpus expects "
                              f"{(cfg.channels, cfg.size, cfg.size)}")
        key = (s.provenance, s.seed)
        if key in seen:
            raise CorpusError(f"duplicate sample seed {s.seed} ({s.provenance})")
        seen.add(key)
        name = f"{prefix}{i:05d}.png"
        img_rel, mask_rel = f"images/{name}", f"masks/{name}"
        u8 = _to_u8(s.image)
        img = Image.fromarray(u8[0] if cfg.channels == 1 else u8.transpose(1, 2, 0),
                              mode="L" if cfg.channels == 1 else "RGB")
        _save_png(img, root / img_rel)
        m = Image.fromarray(s.mask.astype(np.uint8), mode="P")
        m.putpalette(palette)
        _save_png(m, root / mask_rel)
        manifest.entries.append(ManifestEntry(img_rel, mask_rel, s.prompt, s.provenance, s.seed))
    write_manifest(manifest, root)
    return manifest


def write_manifest(manifest: DatasetManifest, root) -> Path:
    path = Path(root) / MANIFEST_NAME
    path.write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(directory) -> DatasetManifest:
    root = Path(directory)
    path = root / MANIFEST_NAME if root.is_dir() else root
    root = path.parent
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise CorpusError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CorpusError(f"corrupt manifest {path}: {exc}") from None
    version = doc.get("format_version")
    if version != MANIFEST_VERSION:
        raise CorpusError(f"manifest {path} has format_version {version}, expected {MANIFEST_VERSION}")
    try:
        cfg = CorpusConfig.from_dict(doc["corpus"])
        entries = [ManifestEntry(e["image"], e["mask"], PromptSpec.from_dict(e["prompt"]),
                                 e["provenance"], int(e["seed"])) for e in doc["samples"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusError(f"manifest {path} does not match the schema: {exc}") from None
    seeds = [(e.provenance, e.seed) for e in entries]
    if len(set(seeds)) != len(seeds):
        raise CorpusError(f"manifest {path} repeats a sample seed")
    return DatasetManifest(cfg, entries, root=root)


def _load_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise CorpusError(f"missing file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            return np.array(im)
    except OSError as exc:
        raise CorpusError(f"cannot decode {path}: {exc}") from None


def load_samples(manifest: DatasetManifest) -> list[PairedSample]:
    cfg = manifest.corpus
    root = manifest.root or Path(".")
    out = []
    for e in manifest.entries:
        img = _load_png(root / e.image)
        img = img[None] if img.ndim == 2 else img.transpose(2, 0, 1)
        if img.shape != (cfg.channels, cfg.size, cfg.size):
            raise CorpusError(f"{root / e.image}: shape {img.shape} contradicts corpus config "
                              f"{(cfg.channels, cfg.size, cfg.size)}")
        mask = _load_png(root / e.mask).astype(np.int64)
        if mask.shape != (cfg.size, cfg.size):
            raise CorpusError(f"{root / e.mask}: shape {mask.shape} contradicts corpus config")
        if mask.max(initial=0) >= cfg.num_classes:
            raise CorpusError(f"{root / e.mask}: class id {mask.max()} >= {cfg.num_classes}")
        out.append(PairedSample(img.astype(np.float32) / 255.0, mask, e.prompt, e.provenance, e.seed))
    return out


def import_dataset(directory) -> list[PairedSample]:
    return load_samples(read_manifest(directory))


def directory_digest(directory) -> str:
    """sha256 over every file (path + bytes) under a directory, in sorted order."""
    h = hashlib.sha256()
    root = Path(directory)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(os.fsencode(path.relative_to(root).as_posix()))
        h.update(path.read_bytes())
    return h.hexdigest()
