import json

import numpy as np
import pytest

from pairdiff.corpus import (
    CorpusConfig,
    CorpusError,
    connected_components,
    directory_digest,
    export_dataset,
    generate_corpus,
    generate_sample,
    import_dataset,
    oracle_segment,
)
from pairdiff.model.prompts import VOCABULARY, PromptSpec, all_prompts


def test_generation_is_deterministic():
    p = PromptSpec("tumor", "ct", "head", "cystic")
    a, b = generate_sample(p, 17), generate_sample(p, 17)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)


def test_every_vocabulary_prompt_renders_a_nonempty_mask():
    for i, p in enumerate(all_prompts()):
        s = generate_sample(p, i)
        assert s.mask.any()
        assert s.mask.shape == (32, 32) and s.image.shape == (1, 32, 32)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_oracle_recovers_mask_exactly():
    for s in generate_corpus(200, 3):
        np.testing.assert_array_equal(oracle_segment(s.image), s.mask)


def test_oracle_multiclass():
    cfg = CorpusConfig(num_classes=3)
    for s in generate_corpus(50, 4, cfg):
        np.testing.assert_array_equal(oracle_segment(s.image, cfg), s.mask)


def test_blob_fraction_range_over_1000_seeds():
    cfg = CorpusConfig()
    fractions = np.array([(s.mask > 0).mean() for s in generate_corpus(1000, 5, cfg)])
    assert fractions.min() >= cfg.min_fraction and fractions.max() <= cfg.max_fraction


def test_null_label_rejected():
    with pytest.raises(CorpusError):
        generate_sample(PromptSpec(None, "ct"), 0)


def test_background_image_gives_empty_mask():
    assert not oracle_segment(np.full((1, 32, 32), 0.2)).any()


def test_two_disjoint_blobs_are_two_components():
    m = np.zeros((16, 16), dtype=np.int64)
    m[2:5, 2:6] = 1
    m[9:14, 8:12] = 1
    img = np.where(m > 0, 0.8, 0.2)[None]
    _, count = connected_components(oracle_segment(img))
    assert count == 2


def _condition_blob_counts(cond, n=500):
    counts = []
    for i in range(n):
        s = generate_sample(PromptSpec("liver", "ct", "abdomen", cond), i)
        counts.append(connected_components(s.mask)[1])
    return np.bincount(counts, minlength=5) / n


@pytest.mark.parametrize("field", ["target_label", "modality", "region", "condition"])
def test_each_prompt_field_changes_the_rendering(field):
    base = dict(target_label="liver", modality="ct", region="abdomen", condition="healthy")
    a_tok, b_tok = VOCABULARY[field][0], VOCABULARY[field][1]
    stats = []
    for tok in (a_tok, b_tok):
        p = PromptSpec(**{**base, field: tok})
        imgs = np.stack([generate_sample(p, i).image[0] for i in range(500)])
        fg = np.stack([generate_sample(p, i).mask > 0 for i in range(500)])
        stats.append(np.array([imgs[fg].mean(), imgs[~fg].mean(), imgs[~fg].std(), fg.mean()]))
    assert np.abs(stats[0] - stats[1]).max() > 0


def test_condition_changes_blob_count_distribution():
    d = np.abs(_condition_blob_counts("healthy") - _condition_blob_counts("lesion")).sum()
    assert d > 0


def test_export_import_round_trip(tmp_path):
    cfg = CorpusConfig()
    samples = generate_corpus(12, 6, cfg)
    manifest = export_dataset(samples, tmp_path / "d", cfg)
    assert len(manifest) == 12
    back = import_dataset(tmp_path / "d")
    for a, b in zip(samples, back):
        np.testing.assert_allclose(a.image, b.image, atol=1 / 255 + 1e-7)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert a.prompt == b.prompt and a.seed == b.seed


def test_export_is_byte_reproducible(tmp_path):
    for name in ("a", "b"):
        export_dataset(generate_corpus(8, 7), tmp_path / name, CorpusConfig())
    assert directory_digest(tmp_path / "a") == directory_digest(tmp_path / "b")


def test_import_rejects_shape_contradiction(tmp_path):
    export_dataset(generate_corpus(2, 8), tmp_path, CorpusConfig())
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["corpus"]["size"] = 64
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(CorpusError, match="contradicts"):
        import_dataset(tmp_path)


def test_import_rejects_version_and_missing_files(tmp_path):
    export_dataset(generate_corpus(2, 9), tmp_path, CorpusConfig())
    (tmp_path / "masks" / "00001.png").unlink()
    with pytest.raises(CorpusError, match="00001.png"):
        import_dataset(tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["format_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(CorpusError, match="format_version"):
        import_dataset(tmp_path)


def test_duplicate_seeds_rejected(tmp_path):
    s = generate_corpus(1, 10)
    with pytest.raises(CorpusError, match="duplicate"):
        export_dataset(s + s, tmp_path, CorpusConfig())
