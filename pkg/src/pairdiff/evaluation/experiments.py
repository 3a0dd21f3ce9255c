"""Generation metrics, the augmentation experiment and the JCA ablation runner."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..corpus import CorpusConfig, PairedSample, generate_corpus
from ..diffusion import DEFAULT_GUIDANCE, DEFAULT_STEPS, sample_pairs
from ..model.denoiser import JCA_MODES, DenoiserParams
from ..model.prompts import FIELDS, VOCABULARY, PromptSpec
from ..numerics import rng as prng
from ..training import TrainConfig, load_checkpoint, save_checkpoint, train
from . import metrics
from .networks import (
    FeatureExtractor,
    FeatureExtractorConfig,
    SegmenterConfig,
    segment,
    train_feature_extractor,
    train_segmenter,
)
from .report import Report

log = logging.getLogger(__name__)

VARIANT_NAMES = {
    "full": "full",
    "none": "w/o JCA",
    "no_mask_to_image": "w/o mask-to-image",
    "no_image_to_mask": "w/o image-to-mask",
}
GROUPING_NOTE = "aggregates are unweighted means over target-label groups"


class OverlapError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 64
    steps: int = DEFAULT_STEPS
    guidance: float = DEFAULT_GUIDANCE
    sample_seed: int = 7
    prompt_seed: int = 99
    # master seeds for the held-out real splits; disjoint from any training corpus seed
    fx_train_seed: int = 101
    fx_test_seed: int = 102
    real_train_seed: int = 201
    real_test_seed: int = 202
    fx_train_size: int = 1500
    fx_test_size: int = 500
    real_train_size: int = 256
    real_test_size: int = 256
    real_fraction: float = 0.25
    fx: FeatureExtractorConfig = field(default_factory=FeatureExtractorConfig)
    seg: SegmenterConfig = field(default_factory=SegmenterConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        d = dict(d)
        if "fx" in d:
            d["fx"] = FeatureExtractorConfig(**d["fx"])
        if "seg" in d:
            d["seg"] = SegmenterConfig(**d["seg"])
        return cls(**d)


# -- generation ------------------------------------------------------------------------

def balanced_prompts(n: int, seed: int) -> list[PromptSpec]:
    """Target labels cycle evenly; the remaining fields are drawn per index."""
    labels = VOCABULARY["target_label"]
    out = []
    for i in range(n):
        r = prng.stream(seed, "eval-prompt", i)
        rest = [VOCABULARY[f][r.integers(len(VOCABULARY[f]))] for f in FIELDS[1:]]
        out.append(PromptSpec(labels[i % len(labels)], *rest))
    return out


def generate_eval_pairs(params: DenoiserParams, cfg: EvalConfig, n: int | None = None) -> list[PairedSample]:
    n = cfg.n_samples if n is None else n
    prompts = balanced_prompts(n, cfg.prompt_seed)
    seeds = [cfg.sample_seed * 2 ** 20 + i for i in range(n)]
    return sample_pairs(params, prompts, seeds, steps=cfg.steps, guidance=cfg.guidance)


def grouped_mean(values, samples: list[PairedSample]) -> float:
    groups: dict[str, list[float]] = {}
    for v, s in zip(values, samples):
        groups.setdefault(s.prompt.target_label, []).append(float(v))
    return float(np.mean([np.mean(g) for g in groups.values()]))


def mean_alignment(pairs: list[PairedSample], corpus: CorpusConfig = CorpusConfig()) -> float:
    return grouped_mean([metrics.alignment_score(p, corpus) for p in pairs], pairs)


def fit_feature_extractor(cfg: EvalConfig, corpus: CorpusConfig = CorpusConfig()) -> FeatureExtractor:
    tr = generate_corpus(cfg.fx_train_size, cfg.fx_train_seed, corpus)
    te = generate_corpus(cfg.fx_test_size, cfg.fx_test_seed, corpus)
    return train_feature_extractor(tr, te, cfg.fx)


def generation_metrics(pairs: list[PairedSample], real: list[PairedSample], fx: FeatureExtractor,
                       corpus: CorpusConfig = CorpusConfig()) -> dict[str, float]:
    """Proxy-FID against ``real``, proxy-IS and mean alignment of generated pairs."""
    gen_images = np.stack([p.image for p in pairs])
    real_images = np.stack([p.image for p in real])
    fid = metrics.proxy_fid(metrics.feature_stats(fx.features(real_images)),
                            metrics.feature_stats(fx.features(gen_images)))
    return {
        "proxy_fid": fid,
        "proxy_is": metrics.proxy_is(fx.probabilities(gen_images)),
        "alignment": mean_alignment(pairs, corpus),
    }


# -- augmentation experiment ------------------------------------------------------------

def check_disjoint(train: list[PairedSample], test: list[PairedSample]) -> None:
    """Training and test pairs must not share a seed or identical pixels."""
    seen_seeds = {(s.provenance, s.seed) for s in train}
    seen_bytes = {s.image.tobytes() for s in train}
    for s in test:
        if (s.provenance, s.seed) in seen_seeds or s.image.tobytes() in seen_bytes:
            raise OverlapError(f"test sample with seed {s.seed} also appears in the training split")


def subsample(samples: list[PairedSample], fraction: float, seed: int) -> list[PairedSample]:
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    k = max(1, int(round(fraction * len(samples))))
    idx = np.sort(prng.stream(seed, "subsample").permutation(len(samples))[:k])
    return [samples[i] for i in idx]


def _seg_scores(pred: np.ndarray, test: list[PairedSample], num_classes: int) -> dict[str, float]:
    out = {}
    for k in range(1, num_classes):
        out[f"dsc_c{k}"] = float(np.mean([metrics.dsc(p, s.mask, k) for p, s in zip(pred, test)]))
        out[f"iou_c{k}"] = float(np.mean([metrics.iou(p, s.mask, k) for p, s in zip(pred, test)]))
    out["dsc"] = float(np.mean([out[f"dsc_c{k}"] for k in range(1, num_classes)]))
    out["iou"] = float(np.mean([out[f"iou_c{k}"] for k in range(1, num_classes)]))
    return out


def run_augmentation_experiment(real_train: list[PairedSample], real_test: list[PairedSample],
                                synth: list[PairedSample], cfg: EvalConfig = EvalConfig(),
                                corpus: CorpusConfig = CorpusConfig()) -> Report:
    """Train the segmenter on real pairs alone and on real plus synthetic pairs.

    The real split is first subsampled to ``cfg.real_fraction``; the
    synthetic set is truncated to the same size.  Both arms share seeds and
    budget and are scored on ``real_test`` only.
    """
    check_disjoint(real_train, real_test)
    check_disjoint(synth, real_test)
    real = subsample(real_train, cfg.real_fraction, cfg.real_train_seed)
    if len(synth) < len(real):
        raise ValueError(f"need {len(real)} synthetic pairs to match the real split, got {len(synth)}")
    synth = synth[:len(real)]
    c = corpus.num_classes
    cols = ["arm", "n_real", "n_synthetic"]
    cols += [f"{m}_c{k}" for k in range(1, c) for m in ("dsc", "iou")] + ["dsc", "iou"]
    report = Report("Segmentation on held-out real pairs", cols,
                    notes=[f"real split subsampled to {cfg.real_fraction:g}; synthetic pairs in equal number"])
    test_images = np.stack([s.image for s in real_test])
    for arm, data in (("real-only", real), ("real+synthetic", real + synth)):
        sp = train_segmenter(data, cfg.seg, c)
        scores = _seg_scores(segment(sp, test_images), real_test, c)
        report.add(arm=arm, n_real=len(real), n_synthetic=len(data) - len(real), **scores)
    return report


# -- reference runs and ablation ----------------------------------------------------------

def checkpoint_path(cfg: TrainConfig, cache_dir) -> Path:
    return Path(cache_dir) / f"ref_{cfg.config_hash()[:16]}_{cfg.steps}.ckpt"


def trained_run(cfg: TrainConfig, cache_dir=None) -> tuple[DenoiserParams, list[float]]:
    """Train on the configured corpus, or load the cached result of an identical run.

    Returns the parameters and the per-step loss curve; the curve is cached
    next to the checkpoint as JSON.
    """
    path = checkpoint_path(cfg, cache_dir) if cache_dir else None
    curve = path.with_suffix(".losses.json") if path is not None else None
    if path is not None and path.exists() and curve.exists():
        params, saved, _ = load_checkpoint(path)
        if saved.config_hash() == cfg.config_hash() and params.trained_steps == cfg.steps:
            return params, json.loads(curve.read_text())
    samples = generate_corpus(cfg.corpus_size, cfg.seed, cfg.corpus)
    result = train(cfg, samples)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.params, cfg, path, result.state)
        curve.write_text(json.dumps(result.losses))
    return result.params, result.losses


def trained_model(cfg: TrainConfig, cache_dir=None) -> DenoiserParams:
    return trained_run(cfg, cache_dir)[0]


def run_ablation(train_cfg: TrainConfig, cfg: EvalConfig = EvalConfig(), *, cache_dir=None,
                 variants=JCA_MODES, fx: FeatureExtractor | None = None,
                 samples_out: dict | None = None) -> Report:
    """Train one model per JCA variant under a shared budget and score each.

    A variant that fails is reported with its error and NaN metrics.  If
    ``samples_out`` is a dict it receives each variant's generated pairs.
    """
    corpus = train_cfg.corpus
    fx = fx or fit_feature_extractor(cfg, corpus)
    real_eval = generate_corpus(cfg.n_samples, cfg.real_test_seed, corpus)
    real_train = generate_corpus(cfg.real_train_size, cfg.real_train_seed, corpus)
    real_test = generate_corpus(cfg.real_test_size, cfg.real_test_seed + 1, corpus)
    cols = ["variant", "afid", "ais", "alignment", "adsc", "aiou", "status"]
    report = Report("JCA ablation", cols, notes=[GROUPING_NOTE,
                    f"shared budget: {train_cfg.steps} steps, batch {train_cfg.batch_size}, seed {train_cfg.seed}"])
    for mode in variants:
        name = VARIANT_NAMES[mode]
        try:
            vcfg = dataclasses.replace(train_cfg, model=dataclasses.replace(train_cfg.model, jca=mode))
            params = trained_model(vcfg, cache_dir)
            pairs = generate_eval_pairs(params, cfg)
            if samples_out is not None:
                samples_out[name] = pairs
            gm = generation_metrics(pairs, real_eval, fx, corpus)
            aug = run_augmentation_experiment(real_train, real_test, pairs, cfg, corpus)
            arm = aug.row("arm", "real+synthetic")
            report.add(variant=name, afid=gm["proxy_fid"], ais=gm["proxy_is"], alignment=gm["alignment"],
                       adsc=arm["dsc"], aiou=arm["iou"], status="ok")
        except Exception as exc:  # noqa: BLE001 - a failed arm becomes a report row
            log.exception("ablation arm %s failed", name)
            nan = float("nan")
            report.add(variant=name, afid=nan, ais=nan, alignment=nan, adsc=nan, aiou=nan,
                       status=f"failed: {type(exc).__name__}: {exc}")
    return report
