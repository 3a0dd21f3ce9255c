import json
import shutil
import subprocess
import sys

import pytest
import yaml

from pairdiff.cli import main
from pairdiff.corpus import directory_digest, read_manifest

TINY = ["--set", "corpus.size=16", "--set", "model.width=8", "--set", "model.heads=2",
        "--set", "model.groups=2", "--set", "train.batch_size=4"]


def _config(tmp_path, **train):
    cfg = {"preset": "smoke", "seed": 3,
           "corpus": {"size": 16, "count": 12},
           "model": {"width": 8, "heads": 2, "groups": 2},
           "train": {"batch_size": 4, "checkpoint_every": 2, "log_every": 1, **train},
           "eval": {"n_samples": 10, "steps": 5, "real_train_size": 20, "real_test_size": 10,
                    "real_fraction": 0.5, "fx_train_size": 60, "fx_test_size": 20,
                    "fx": {"steps": 5, "min_accuracy": 0.0}, "seg": {"steps": 3}}}
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _config(tmp, steps=4)
    assert main(["gen-corpus", "--config", str(cfg), "--out", str(tmp / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(tmp / "data"), "--out", str(tmp / "run")]) == 0
    return tmp, cfg


def test_gen_corpus_count_and_reproducibility(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["gen-corpus", "--out", str(tmp_path / name), "--seed", "5", "--count", "100"]) == 0
    assert len(read_manifest(tmp_path / "a")) == 100
    assert directory_digest(tmp_path / "a") == directory_digest(tmp_path / "b")
    out = capsys.readouterr().out
    assert "wrote 100 pairs" in out and "class pixel fractions" in out


def test_bad_vocabulary_token_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(yaml.safe_dump({"corpus": {"prompts": ["label=liver", "label=heart"]}}))
    assert main(["gen-corpus", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "corpus.prompts[1]" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(yaml.safe_dump({"train": {"learning_rate": 0.1}}))
    assert main(["gen-corpus", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "train.learning_rate" in capsys.readouterr().err


def test_missing_corpus_exits_1(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "r")] + TINY) == 1


def test_train_writes_checkpoints_log_and_metadata(trained, capsys):
    tmp, _ = trained
    run = tmp / "run"
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == ["ckpt_000002.ckpt", "ckpt_000004.ckpt"]
    records = [json.loads(line) for line in (run / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [1, 2, 3, 4]
    assert all({"step", "loss", "lr", "wall_time"} <= set(r) for r in records)
    meta = json.loads((run / "run.json").read_text())
    assert meta["sampler"] == "ddpm-ancestral" and len(meta["input_hash"]) == 64
    assert yaml.safe_load((run / "resolved_config.yaml").read_text())["seed"] == 3


def test_resume_continues_step_counter(trained, tmp_path, capsys):
    tmp, _ = trained
    cfg = _config(tmp_path, steps=6)
    shutil.copytree(tmp / "run", tmp_path / "run")
    assert main(["train", "--config", str(cfg), "--data", str(tmp / "data"),
                 "--out", str(tmp_path / "run"), "--resume"]) == 0
    records = [json.loads(line) for line in (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [1, 2, 3, 4, 5, 6]
    assert "ckpt_000006.ckpt" in capsys.readouterr().out


def test_resume_with_changed_config_exits_2(trained, tmp_path):
    tmp, _ = trained
    shutil.copytree(tmp / "run", tmp_path / "run")
    cfg = _config(tmp_path, steps=6, lr=0.005)
    assert main(["train", "--config", str(cfg), "--data", str(tmp / "data"),
                 "--out", str(tmp_path / "run"), "--resume"]) == 2


def test_sample_writes_pairs_and_defaults(trained, tmp_path):
    tmp, _ = trained
    ckpt = tmp / "run" / "checkpoints" / "ckpt_000004.ckpt"
    args = ["sample", "--checkpoint", str(ckpt), "--prompt", "label=liver,modality=ct", "--n", "4", "--steps", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    m = read_manifest(tmp_path / "a")
    assert len(m) == 4 and {e.provenance for e in m.entries} == {"synthetic"}
    assert len(list((tmp_path / "a" / "images").iterdir())) == 4
    assert len(list((tmp_path / "a" / "masks").iterdir())) == 4
    assert (tmp_path / "a" / "grid.png").exists()
    da, db = (directory_digest(tmp_path / n / "images") + directory_digest(tmp_path / n / "masks") for n in "ab")
    assert da == db


def test_sample_metadata_records_sampler_defaults(trained, tmp_path):
    tmp, _ = trained
    ckpt = tmp / "run" / "checkpoints" / "ckpt_000004.ckpt"
    assert main(["sample", "--checkpoint", str(ckpt), "--prompt", "label=kidney", "--n", "1",
                 "--out", str(tmp_path / "s")]) == 0
    meta = json.loads((tmp_path / "s" / "run.json").read_text())
    assert meta["steps"] == 50 and meta["guidance"] == 7.5


def test_bad_prompt_exits_2_with_grammar(trained, tmp_path, capsys):
    tmp, _ = trained
    ckpt = tmp / "run" / "checkpoints" / "ckpt_000004.ckpt"
    assert main(["sample", "--checkpoint", str(ckpt), "--prompt", "label=liver;ct", "--out", str(tmp_path)]) == 2
    assert "label=<" in capsys.readouterr().err


def test_eval_metrics_and_augment_reports(trained, tmp_path):
    tmp, cfg = trained
    ckpt = tmp / "run" / "checkpoints" / "ckpt_000004.ckpt"
    assert main(["eval", "--config", str(cfg), "--mode", "metrics", "--checkpoint", str(ckpt),
                 "--real", str(tmp / "data"), "--out", str(tmp_path / "m")]) == 0
    header = (tmp_path / "m" / "metrics.csv").read_text().splitlines()[0].split(",")
    assert {"proxy_fid", "proxy_is", "alignment"} <= set(header)
    assert (tmp_path / "m" / "samples.png").exists()
    assert main(["eval", "--config", str(cfg), "--mode", "augment", "--checkpoint", str(ckpt),
                 "--real", str(tmp / "data"), "--out", str(tmp_path / "a")]) == 0
    rows = (tmp_path / "a" / "augment.csv").read_text().splitlines()
    assert rows[0].startswith("arm,") and "dsc" in rows[0] and "iou" in rows[0]
    assert [r.split(",")[0] for r in rows[1:]] == ["real-only", "real+synthetic"]


def test_eval_ablate_report_has_four_variants(tmp_path):
    cfg = _config(tmp_path, steps=2)
    assert main(["eval", "--config", str(cfg), "--mode", "ablate", "--out", str(tmp_path / "ab")]) == 0
    rows = (tmp_path / "ab" / "ablation.csv").read_text().splitlines()
    assert len(rows) == 5
    assert rows[0].split(",")[:6] == ["variant", "afid", "ais", "alignment", "adsc", "aiou"]
    assert [r.split(",")[0] for r in rows[1:]] == ["full", "w/o JCA", "w/o mask-to-image", "w/o image-to-mask"]
    assert all(r.endswith(",ok") for r in rows[1:])
    assert len(list((tmp_path / "ab").glob("samples_*.png"))) == 4


def test_smoke_preset_trains_and_checkpoints(tmp_path, capsys):
    assert main(["gen-corpus", "--count", "64", "--out", str(tmp_path / "data")]) == 0
    assert main(["train", "--set", "preset=smoke", "--data", str(tmp_path / "data"),
                 "--out", str(tmp_path / "run")]) == 0
    ckpts = list((tmp_path / "run" / "checkpoints").glob("*.ckpt"))
    assert ckpts
    assert "ckpt_000200.ckpt" in capsys.readouterr().out


def test_eval_mode_input_mismatch_exits_2(tmp_path):
    assert main(["eval", "--mode", "metrics", "--out", str(tmp_path)]) == 2
    assert main(["eval", "--mode", "ablate", "--checkpoint", "x.ckpt", "--out", str(tmp_path)]) == 2


def test_usage_errors_exit_2():
    proc = subprocess.run([sys.executable, "-m", "pairdiff.cli", "sample"], capture_output=True)
    assert proc.returncode == 2


def test_output_root_environment_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("PAIRDIFF_OUT", str(tmp_path / "root"))
    assert main(["gen-corpus", "--count", "3"]) == 0
    assert len(read_manifest(tmp_path / "root" / "corpus")) == 3
