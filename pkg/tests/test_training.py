import dataclasses
import json

import numpy as np
import pytest

from pairdiff.corpus import CorpusConfig, generate_corpus
from pairdiff.diffusion import NoisePair, sample_pair
from pairdiff.model.checkpoint import CheckpointError
from pairdiff.model.denoiser import DenoiserConfig
from pairdiff.model.prompts import PromptSpec
from pairdiff.numerics import rng as prng
from pairdiff.numerics.tensor import ShapeError, Tensor
from pairdiff.training import (
    TrainConfig,
    TrainingError,
    draw_step,
    load_checkpoint,
    loss_joint,
    new_model,
    preset,
    save_checkpoint,
    train,
)

SMALL = TrainConfig(
    steps=6, batch_size=4, lr=1e-3, corpus_size=16, checkpoint_every=3, log_every=2,
    model=DenoiserConfig(image_size=16, width=8, heads=2, groups=2, codec="patchify"),
    corpus=CorpusConfig(size=16),
)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(16, 0, SMALL.corpus)


def test_loss_fixed_points():
    t = NoisePair(np.zeros((2, 3)), np.ones((2, 3)))
    assert loss_joint(t, NoisePair(np.zeros((2, 3)), np.ones((2, 3)))).item() == 0.0
    shifted = NoisePair(t.eps_x + 0.5, t.eps_m + 0.5)
    assert loss_joint(t, shifted).item() == pytest.approx(1.0, abs=1e-7)


def test_loss_matches_scalar_loop_oracle():
    r = np.random.default_rng(0)
    tx, tm, px, pm = (r.standard_normal((2, 3, 4, 4)) for _ in range(4))
    value = loss_joint(NoisePair(tx, tm), NoisePair(Tensor(px, dtype=np.float64), Tensor(pm, dtype=np.float64))).item()
    total = 0.0
    for a, b in ((px, tx), (pm, tm)):
        s = 0.0
        for u, v in zip(a.ravel(), b.ravel()):
            s += abs(float(u) - float(v))
        total += s / a.size
    assert value == pytest.approx(total, abs=1e-6)


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        loss_joint(NoisePair(np.zeros(3), np.zeros(3)), NoisePair(np.zeros(3), np.zeros(4)))


def test_loss_is_permutation_invariant_over_batch():
    r = np.random.default_rng(1)
    tx, tm, px, pm = (r.standard_normal((5, 8)).astype(np.float32) for _ in range(4))
    perm = r.permutation(5)
    a = loss_joint(NoisePair(tx, tm), NoisePair(px, pm)).item()
    b = loss_joint(NoisePair(tx[perm], tm[perm]), NoisePair(px[perm], pm[perm])).item()
    assert a == pytest.approx(b, rel=1e-6)


def test_dropout_frequency_and_shared_timestep():
    n_steps, batch = 10_000, 1
    drops = 0
    for step in range(n_steps):
        d = draw_step(prng.stream(0, "train", step), batch, (1, 2, 2), 1000, 0.1)
        drops += int(d.drop.sum())
        assert d.t.shape == (batch,)
        assert not np.array_equal(d.noise.eps_x, d.noise.eps_m)
    assert abs(drops / n_steps - 0.1) < 0.01


def test_training_is_deterministic(corpus):
    a = train(SMALL, corpus).losses
    b = train(SMALL, corpus).losses
    assert a == b


def test_no_dropout_never_touches_null_embedding(corpus):
    cfg = dataclasses.replace(SMALL, p_drop=0.0, steps=3, weight_decay=0.0)
    params, _ = new_model(cfg)
    before = params.tensors["null.e_x"].data.copy()
    res = train(cfg, corpus, params=params)
    np.testing.assert_array_equal(res.params.tensors["null.e_x"].data, before)


def test_nan_loss_reports_seeds(corpus):
    params, state = new_model(SMALL)
    params.tensors["conv_out.b"].data[:] = np.nan
    with pytest.raises(TrainingError, match="seeds"):
        train(dataclasses.replace(SMALL, steps=1), corpus, params=params, state=state)


def test_checkpoint_round_trip_is_byte_identical(tmp_path, corpus):
    res = train(SMALL, corpus, out_dir=tmp_path / "ck", log_path=tmp_path / "log.jsonl")
    assert [p.name for p in res.checkpoints] == ["ckpt_000003.ckpt", "ckpt_000006.ckpt"]
    params, cfg, state = load_checkpoint(res.checkpoints[-1])
    assert cfg == SMALL and state.step == 6 and params.trained_steps == 6
    save_checkpoint(params, cfg, tmp_path / "again.ckpt", state)
    assert res.checkpoints[-1].read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    p = PromptSpec("liver", "ct")
    a = sample_pair(res.params, p, steps=5, seed=2)
    b = sample_pair(params, p, steps=5, seed=2)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)
    records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [2, 4, 6]
    assert all({"step", "loss", "lr", "wall_time"} <= set(r) for r in records)


def test_resume_matches_uninterrupted_run(tmp_path, corpus):
    full = train(SMALL, corpus)
    half = train(dataclasses.replace(SMALL, steps=3), corpus, out_dir=tmp_path)
    params, _, state = load_checkpoint(half.checkpoints[-1])
    resumed = train(SMALL, corpus, params=params, state=state)
    assert half.losses + resumed.losses == full.losses
    for k, t in full.params.tensors.items():
        np.testing.assert_array_equal(resumed.params.tensors[k].data, t.data)


def test_truncated_checkpoint_is_rejected(tmp_path, corpus):
    params, _ = new_model(SMALL)
    path = save_checkpoint(params, SMALL, tmp_path / "m.ckpt")
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(blob[:40])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_version_and_hash_mismatch(tmp_path):
    params, _ = new_model(SMALL)
    path = save_checkpoint(params, SMALL, tmp_path / "m.ckpt")
    blob = path.read_bytes()
    path.write_bytes(blob.replace(b'"model_version":1', b'"model_version":7', 1))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    path.write_bytes(blob.replace(b'"p_drop":0.1', b'"p_drop":0.2', 1))
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(path)


def test_config_hash_ignores_budget_only():
    assert SMALL.config_hash() == dataclasses.replace(SMALL, steps=99, checkpoint_every=7).config_hash()
    assert SMALL.config_hash() != dataclasses.replace(SMALL, lr=2e-3).config_hash()


def test_presets_and_validation():
    assert preset("long").lr == 1e-5 and preset("long").batch_size == 20
    assert preset("smoke").steps == 200
    with pytest.raises(ValueError):
        TrainConfig(p_drop=1.5)
    with pytest.raises(ValueError):
        TrainConfig(loss="huber")
    with pytest.raises(ValueError):
        preset("nope")


def test_overfit_fixed_batch_halves_the_loss():
    cfg = dataclasses.replace(preset("desk"), steps=200)
    batch = generate_corpus(8, 1, cfg.corpus)
    losses = train(dataclasses.replace(cfg, batch_size=8), batch).losses
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])
