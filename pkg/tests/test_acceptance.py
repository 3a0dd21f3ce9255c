"""Acceptance suite.

Each criterion prints one ``PASS``/``FAIL`` line.  Criteria 7 to 9 train the
reference models (about 15 minutes each on one core); their checkpoints are
cached under ``$PAIRDIFF_CACHE`` (default ``<repo>/.cache``) keyed by the
training config hash, so later runs only sample and score.

    pytest tests/test_acceptance.py -v -s
"""

from __future__ import annotations

import dataclasses
import os
import time
from pathlib import Path

import numpy as np
import pytest

from op_cases import OP_CASES
from pairdiff.corpus import directory_digest, export_dataset, generate_corpus
from pairdiff.diffusion import (
    NoisePair,
    build_schedule,
    forward_diffuse,
    sample_latents,
    sample_pair,
)
from pairdiff.evaluation import experiments as ex
from pairdiff.evaluation.metrics import FeatureStats, dsc, iou, proxy_fid, proxy_is
from pairdiff.model.denoiser import DenoiserConfig, PromptEmbedding, denoise, embed_batch, init_denoiser
from pairdiff.model.prompts import PromptSpec, all_prompts
from pairdiff.numerics.gradcheck import check_gradients
from pairdiff.numerics.tensor import no_grad
from pairdiff.training import TrainConfig, load_checkpoint, preset, save_checkpoint, train

CACHE = Path(os.environ.get("PAIRDIFF_CACHE", Path(__file__).resolve().parents[1] / ".cache"))

# tolerances and thresholds
FD_H, FD_RTOL, FD_SEEDS = 1e-3, 1e-3, 20
MC_DRAWS, MC_SIGMAS, MC_VAR_RTOL = 10_000, 3.0, 0.05
SWAP_INPUTS = 100
FID_RTOL, IS_ATOL = 1e-4, 1e-9
LOSS_DROP = 0.5
ALIGN_MIN = 0.60
AUG_FLOOR = 0.01

TOY = DenoiserConfig(image_size=8, width=8, heads=2, groups=2)
RESULTS: list[str] = []


def verdict(n: int, name: str, ok: bool, detail: str, t0: float) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {name}: {detail} ({time.perf_counter() - t0:.1f}s)"
    RESULTS.append(line)
    print("\n" + line)
    assert ok, line


def _toy(jca="full", seed=0):
    return init_denoiser(dataclasses.replace(TOY, jca=jca), seed=seed)


# -- 1 --------------------------------------------------------------------------------------

def test_c01_autodiff_finite_differences():
    t0 = time.perf_counter()
    worst, failing = 0.0, []
    for op in sorted(OP_CASES):
        for seed in range(FD_SEEDS):
            fn, arrays = OP_CASES[op](seed)
            err = max(check_gradients(fn, arrays, h=FD_H))
            worst = max(worst, err)
            if not err < FD_RTOL:
                failing.append((op, seed, err))
    verdict(1, "autodiff vs central differences", not failing,
            f"{len(OP_CASES)} ops x {FD_SEEDS} seeds, worst rel err {worst:.2e}, failing {failing[:3]}", t0)


# -- 2 --------------------------------------------------------------------------------------

def test_c02_forward_marginals():
    t0 = time.perf_counter()
    s = build_schedule(1000)
    rows, ok = [], True
    for t in (1, 500, 1000):
        rng = np.random.default_rng(1000 + t)
        z0, y0 = np.full((MC_DRAWS, 1), 0.8), np.full((MC_DRAWS, 1), -0.6)
        noise = NoisePair(rng.standard_normal((MC_DRAWS, 1)), rng.standard_normal((MC_DRAWS, 1)))
        lat = forward_diffuse(z0, y0, t, noise, s)
        ab = s.alpha_bar(t)
        for stream, x, x0 in (("z", lat.z, 0.8), ("y", lat.y, -0.6)):
            z_score = abs(x.mean() - np.sqrt(ab) * x0) / np.sqrt((1 - ab) / MC_DRAWS)
            var_err = abs(x.var(ddof=1) / (1 - ab) - 1)
            ok &= z_score < MC_SIGMAS and var_err < MC_VAR_RTOL
            rows.append(f"{stream}@t={t} {z_score:.2f}sd var_err={var_err:.3f}")
    verdict(2, "forward-diffusion marginals", ok, "; ".join(rows), t0)


# -- 3 --------------------------------------------------------------------------------------

def test_c03_role_swap_bit_exact():
    t0 = time.perf_counter()
    params = _toy(seed=5)
    params.tensors["null.e_x"].data[:] += 0.25
    prompts = all_prompts()
    rng = np.random.default_rng(3)
    mismatches = 0
    for i in range(SWAP_INPUTS):
        z, y = (rng.standard_normal((1, *TOY.latent_shape)).astype(np.float32) for _ in range(2))
        t = int(rng.integers(1, 1001))
        emb = embed_batch(params, [prompts[int(rng.integers(len(prompts)))]])
        with no_grad():
            a, b = denoise(params, z, y, t, emb)
            b2, a2 = denoise(params, y, z, t, PromptEmbedding(emb.e_m, emb.e_x))
        mismatches += not (np.array_equal(a.data, a2.data) and np.array_equal(b.data, b2.data))
    verdict(3, "role-swap symmetry", mismatches == 0, f"{mismatches}/{SWAP_INPUTS} inputs differ", t0)


# -- 4 --------------------------------------------------------------------------------------

def test_c04_jca_ablation_structure():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    z, y = (rng.standard_normal((2, *TOY.latent_shape)).astype(np.float32) for _ in range(2))
    dz, dy = (rng.standard_normal(z.shape).astype(np.float32) for _ in range(2))
    prompt = [PromptSpec("liver", "ct", "abdomen", "lesion")] * 2

    def run(params, z, y):
        with no_grad():
            ex_, em_ = denoise(params, z, y, 250, embed_batch(params, prompt))
        return ex_.data, em_.data

    none = _toy("none", 1)
    x0, _ = run(none, z, y)
    x1, _ = run(none, z, y + dy)
    none_diff = float(np.abs(x0 - x1).max())

    one = _toy("no_image_to_mask", 2)
    ex0, em0 = run(one, z, y)
    _, em1 = run(one, z + dz, y)
    ex2, _ = run(one, z, y + dy)
    m_diff, x_diff = float(np.abs(em0 - em1).max()), float(np.abs(ex0 - ex2).max())
    ok = none_diff == 0.0 and m_diff == 0.0 and x_diff > 0.0
    verdict(4, "JCA ablation invariances", ok,
            f"w/o JCA d(eps_x)/dy={none_diff:g}; w/o image-to-mask d(eps_m)/dz={m_diff:g}, d(eps_x)/dy={x_diff:.3g}", t0)


# -- 5 --------------------------------------------------------------------------------------

def _eig_fid(r: FeatureStats, g: FeatureStats) -> float:
    # independent route: sqrt via eigenvalues of sigma_r @ sigma_g (real, non-negative for PSD pairs)
    lam = np.linalg.eigvals(r.sigma @ g.sigma)
    root_trace = np.sqrt(np.clip(lam.real, 0, None)).sum()
    d = r.mu - g.mu
    return float(d @ d + np.trace(r.sigma) + np.trace(g.sigma) - 2 * root_trace)


def _loop_is(p) -> float:
    import math
    n, k = len(p), len(p[0])
    marg = [sum(p[i][j] for i in range(n)) / n for j in range(k)]
    total = 0.0
    for i in range(n):
        for j in range(k):
            if p[i][j] > 0:
                total += p[i][j] * (math.log(p[i][j]) - math.log(marg[j]))
    return math.exp(total / n)


def test_c05_metric_oracles():
    t0 = time.perf_counter()
    notes, ok = [], True
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        stats = []
        for _ in range(2):
            f = rng.standard_normal((60, 8)) @ rng.standard_normal((8, 8)) + rng.standard_normal(8)
            stats.append(FeatureStats(f.mean(0), np.cov(f, rowvar=False), 60))
        ref = _eig_fid(*stats)
        worst = max(worst, abs(proxy_fid(*stats) - ref) / abs(ref))
    ok &= worst < FID_RTOL
    notes.append(f"fid worst rel {worst:.1e}")

    worst = 0.0
    for seed in range(20):
        p = np.random.default_rng(seed).dirichlet(np.full(6, 0.7), size=50)
        worst = max(worst, abs(proxy_is(p) - _loop_is(p.tolist())))
    ok &= worst < IS_ATOL
    notes.append(f"is worst abs {worst:.1e}")

    exact = True
    for seed in range(50):
        rng = np.random.default_rng(seed)
        a, b = rng.integers(0, 3, (6, 7)), rng.integers(0, 3, (6, 7))
        for cls in (1, 2):
            A, B = set(zip(*np.nonzero(a == cls))), set(zip(*np.nonzero(b == cls)))
            if A or B:
                exact &= dsc(a, b, cls) == 2 * len(A & B) / (len(A) + len(B))
                exact &= iou(a, b, cls) == len(A & B) / len(A | B)
    m = np.zeros((4, 4), int)
    m[0] = 1
    other, half = np.zeros_like(m), np.zeros_like(m)
    other[3] = 1
    half[:2, :2] = 1
    exact &= (dsc(m, m), iou(m, m), dsc(m, other), iou(m, other)) == (1.0, 1.0, 0.0, 0.0)
    exact &= dsc(m, half) == 0.5 and iou(m, half) == 1 / 3
    ok &= bool(exact)
    notes.append(f"dsc/iou exact {bool(exact)}")
    verdict(5, "metric oracles", ok, ", ".join(notes), t0)


# -- 6 --------------------------------------------------------------------------------------

def test_c06_cfg_degeneracy():
    t0 = time.perf_counter()
    params = _toy(seed=6)
    params.trained_steps = 1
    params.meta["schedule"] = {"T": 1000, "kind": "linear"}
    params.tensors["null.e_x"].data *= 2.0
    prompts = [PromptSpec("spleen", "mri"), PromptSpec("polyp")]
    za, ya = sample_latents(params, prompts, [11, 12], steps=50, guidance=1.0)
    zb, yb = sample_latents(params, prompts, [11, 12], steps=50, guidance=None)
    ok = np.array_equal(za, zb) and np.array_equal(ya, yb)
    verdict(6, "guidance 1 equals conditional-only sampler", ok,
            f"max |dz|={np.abs(za - zb).max():g}, max |dy|={np.abs(ya - yb).max():g}", t0)


# -- 7 to 9: reference runs ----------------------------------------------------------------------

REFERENCE = preset("desk")
EVAL = ex.EvalConfig()


@pytest.fixture(scope="module")
def reference():
    params, losses = ex.trained_run(REFERENCE, CACHE)
    pairs = ex.generate_eval_pairs(params, EVAL)
    return params, losses, pairs


@pytest.fixture(scope="module")
def extractor():
    return ex.fit_feature_extractor(EVAL, REFERENCE.corpus)


def test_c07_reference_training_run(reference):
    t0 = time.perf_counter()
    params, losses, pairs = reference
    start, end = float(np.mean(losses[:10])), float(np.mean(losses[-10:]))
    align = ex.mean_alignment(pairs, REFERENCE.corpus)
    p = PromptSpec("kidney", "ct", "abdomen", "lesion")
    a, b = sample_pair(params, p, seed=1), sample_pair(params, p, seed=2)
    l1 = float(np.abs(a.image - b.image).mean() + np.abs(a.mask - b.mask).mean())
    ok_a, ok_b, ok_c = end < LOSS_DROP * start, align >= ALIGN_MIN, l1 > 0
    verdict(7, "reference run", ok_a and ok_b and ok_c,
            f"(a) loss MA10 {start:.3f} -> {end:.3f} [{'ok' if ok_a else 'no'}]; "
            f"(b) alignment {align:.3f} vs {ALIGN_MIN} [{'ok' if ok_b else 'no'}]; "
            f"(c) seed L1 {l1:.3f} [{'ok' if ok_c else 'no'}]", t0)


def test_c08_jca_ablation_ordering(extractor):
    t0 = time.perf_counter()
    report = ex.run_ablation(REFERENCE, EVAL, cache_dir=CACHE, fx=extractor)
    print("\n" + report.to_markdown())
    full, ablated = report.row("variant", "full"), report.row("variant", "w/o JCA")
    ok = full["alignment"] > ablated["alignment"] and full["afid"] <= ablated["afid"]
    verdict(8, "JCA ablation ordering", ok,
            f"alignment full {full['alignment']:.3f} vs w/o JCA {ablated['alignment']:.3f}; "
            f"aFID full {full['afid']:.3f} vs w/o JCA {ablated['afid']:.3f}", t0)


def test_c09_augmentation_non_degradation(reference):
    t0 = time.perf_counter()
    _, _, pairs = reference
    corpus = REFERENCE.corpus
    real_train = generate_corpus(EVAL.real_train_size, EVAL.real_train_seed, corpus)
    real_test = generate_corpus(EVAL.real_test_size, EVAL.real_test_seed + 1, corpus)
    report = ex.run_augmentation_experiment(real_train, real_test, pairs, EVAL, corpus)
    print("\n" + report.to_markdown())
    real = report.row("arm", "real-only")["dsc"]
    mixed = report.row("arm", "real+synthetic")["dsc"]
    verdict(9, "augmentation non-degradation", mixed >= real - AUG_FLOOR,
            f"real-only {real:.4f}, real+synthetic {mixed:.4f} at {EVAL.real_fraction:g} real", t0)


# -- 10 -------------------------------------------------------------------------------------

def test_c10_determinism_and_persistence(tmp_path):
    t0 = time.perf_counter()
    notes, ok = [], True
    cfg = TrainConfig(steps=4, batch_size=4, corpus_size=16, checkpoint_every=4,
                      model=dataclasses.replace(TOY, codec="patchify"),
                      corpus=dataclasses.replace(REFERENCE.corpus, size=8))
    for name in ("a", "b"):
        export_dataset(generate_corpus(20, 3, cfg.corpus), tmp_path / name / "data", cfg.corpus)
    same = directory_digest(tmp_path / "a" / "data") == directory_digest(tmp_path / "b" / "data")
    ok &= same
    notes.append(f"corpus {same}")

    samples = generate_corpus(16, 3, cfg.corpus)
    runs = [train(cfg, samples, out_dir=tmp_path / n / "ck") for n in ("a", "b")]
    same = runs[0].checkpoints[-1].read_bytes() == runs[1].checkpoints[-1].read_bytes()
    ok &= same
    notes.append(f"checkpoint {same}")

    params, loaded_cfg, state = load_checkpoint(runs[0].checkpoints[-1])
    save_checkpoint(params, loaded_cfg, tmp_path / "again.ckpt", state)
    same = (tmp_path / "again.ckpt").read_bytes() == runs[0].checkpoints[-1].read_bytes()
    ok &= same and loaded_cfg == cfg
    notes.append(f"round trip {same}")

    p = PromptSpec("liver", "ct")
    s = [sample_pair(x, p, steps=10, seed=4) for x in (runs[0].params, runs[1].params, params)]
    same = all(np.array_equal(s[0].image, o.image) and np.array_equal(s[0].mask, o.mask) for o in s[1:])
    ok &= same
    notes.append(f"samples {same}")
    verdict(10, "determinism and persistence", ok, ", ".join(notes), t0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
