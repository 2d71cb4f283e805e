import csv
import json

import pytest

from advcap.cli import config_hash, main, resolve_config
from advcap.errors import ConfigError

TINY_INI = """
[data]
n_train = 40
n_val = 10
n_test = 6
feature_dim = 8

[model]
embed_dim = 8
hidden_dim = 12
noise_dim = 3
max_len = 8
d_word_embed_dim = 6
d_sentence_embed_dim = 6
d_kernel_inner_dim = 3
d_num_kernels = 4

[train]
pretrain_g_epochs = 1
batch_size = 32
pretrain_d_steps = 5
gan_g_steps = 2
gan_batch_size = 4
probe_size = 4
monitor_every = 5
acc_gate = 0.51
gate_max_steps = 100
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """make-data, pretrain, train-gan, generate and stats, run twice into separate roots."""
    roots = []
    for name in ("a", "b"):
        root = tmp_path_factory.mktemp(name)
        ini = root / "tiny.ini"
        ini.write_text(TINY_INI)
        c = ["--config", str(ini)]
        assert main(["make-data", *c, "--seed", "4", "--out", str(root / "data")]) == 0
        assert main(["pretrain", *c, "--data", str(root / "data"), "--out", str(root / "pre")]) == 0
        assert main(["train-gan", *c, "--data", str(root / "data"), "--checkpoints", str(root / "pre"),
                     "--out", str(root / "gan")]) == 0
        for mode in ("sample", "beam"):
            assert main(["generate", *c, "--data", str(root / "data"), "--checkpoint",
                         str(root / "gan" / "generator.ckpt"), "--mode", mode, "--p", "5",
                         "--out", str(root / f"{mode}.jsonl")]) == 0
        assert main(["stats", *c, "--data", str(root / "data"), "--generated", str(root / "sample.jsonl"),
                     "--human", "test", "--out", str(root / "stats")]) == 0
        roots.append(root)
    return roots


def _files(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def test_pipeline_outputs_byte_identical(pipeline):
    a, b = pipeline
    assert _files(a) == _files(b)
    for rel in _files(a):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_make_data_layout(pipeline):
    data = pipeline[0] / "data"
    for name in ("manifest.json", "train.jsonl", "val.jsonl", "test.jsonl", "vocab.txt", "make-data.config.json"):
        assert (data / name).exists()
    echoed = json.loads((data / "make-data.config.json").read_text())
    assert echoed["config_hash"] == config_hash(echoed["config"])


def test_train_log_is_valid_jsonl(pipeline):
    lines = (pipeline[0] / "gan" / "gan_log.jsonl").read_text().splitlines()
    recs = [json.loads(line) for line in lines]
    assert sum(r["kind"] == "g" for r in recs) == 2
    assert sum(r["kind"] == "d" for r in recs) == 10
    assert [r["update"] for r in recs] == sorted(r["update"] for r in recs)


def test_generate_rows_and_ranks(pipeline):
    root = pipeline[0]
    rows = [json.loads(line) for line in (root / "sample.jsonl").read_text().splitlines()]
    by_image = {}
    for r in rows:
        by_image.setdefault(r["image_id"], []).append(r)
    assert len(by_image) == 6 and all(len(v) == 5 for v in by_image.values())
    for group in by_image.values():
        assert [r["rank"] for r in group] == [1, 2, 3, 4, 5]
        best = max(group, key=lambda r: r["log_prob"])
        assert group[0]["log_prob"] == best["log_prob"]
    side = json.loads((root / "sample.manifest.json").read_text())
    assert side["tokenizer_version"] and side["p"] == 5 and side["mode"] == "sample"


def test_stats_outputs(pipeline):
    stats = pipeline[0] / "stats"
    rows = list(csv.DictReader((stats / "diversity.csv").open()))
    variants = {(r["corpus"], r["variant"]) for r in rows}
    assert ("sample", "1 of 5") in variants and ("sample", "5 of 5") in variants
    plot = json.loads((stats / "plot_data.json").read_text())
    curve = plot["sample"]["5 of 5"]["vocab_curve"]
    assert int(curve["1"]) == int(next(r for r in rows if r["corpus"] == "sample" and r["variant"] == "5 of 5")["vocab_size"])
    assert "bins" in plot["sample"]["count_ratios"]["1"]
    assert (stats / "count_ratios.csv").exists() and (stats / "repeated_captions.csv").exists()


def test_stats_human_matches_manifest(pipeline):
    root = pipeline[0]
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    recorded = manifest["reference_stats"]["test"]["5 of 5"]
    row = next(r for r in csv.DictReader((root / "stats" / "diversity.csv").open())
               if r["corpus"] == "human-test" and r["variant"] == "5 of 5")
    for key in ("div1", "div2", "mbleu4", "pct_novel"):
        assert float(row[key]) == pytest.approx(recorded[key], abs=1e-6)
    assert int(row["vocab_size"]) == recorded["vocab_size"]


def test_generated_subset_of_training_is_not_novel(pipeline, tmp_path):
    root = pipeline[0]
    train = [json.loads(line) for line in (root / "data" / "train.jsonl").read_text().splitlines()]
    gen = tmp_path / "copy.jsonl"
    gen.write_text("".join(json.dumps({"image_id": t["image_id"], "rank": 1, "caption": t["references"][0]}) + "\n"
                           for t in train[:5]))
    assert main(["stats", "--data", str(root / "data"), "--generated", str(gen), "--out", str(tmp_path / "s")]) == 0
    row = next(csv.DictReader((tmp_path / "s" / "diversity.csv").open()))
    assert float(row["pct_novel"]) == 0.0


def test_tokenizer_mismatch_is_integrity_error(pipeline, tmp_path, capsys):
    root = pipeline[0]
    gen = tmp_path / "old.jsonl"
    gen.write_text((root / "sample.jsonl").read_text())
    side = json.loads((root / "sample.manifest.json").read_text())
    side["tokenizer_version"] = "0"
    (tmp_path / "old.manifest.json").write_text(json.dumps(side))
    assert main(["stats", "--data", str(root / "data"), "--generated", str(gen), "--out", str(tmp_path / "s")]) == 3
    assert "tokeniz" in capsys.readouterr().err


def test_missing_checkpoint_requires_pretrain(pipeline, tmp_path, capsys):
    root = pipeline[0]
    code = main(["train-gan", "--data", str(root / "data"), "--checkpoints", str(tmp_path), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "pretrain required" in capsys.readouterr().err


def test_vocabulary_mismatch_exit_code(pipeline, tmp_path, capsys):
    root = pipeline[0]
    other = tmp_path / "other"
    assert main(["make-data", "--set", "data.n_train=15", "--set", "data.n_val=3", "--set", "data.n_test=3",
                 "--set", "data.synonym_zipf=3.0", "--seed", "9", "--out", str(other)]) == 0
    code = main(["generate", "--data", str(other), "--checkpoint", str(root / "gan" / "generator.ckpt"),
                 "--out", str(tmp_path / "g.jsonl")])
    if code != 0:
        assert code == 3 and "hash" in capsys.readouterr().err


def test_invalid_grammar_names_production(tmp_path, capsys):
    grammar = tmp_path / "g.json"
    grammar.write_text(json.dumps({"templates": ["{det} {object} {mood}"]}))
    code = main(["make-data", "--set", f"data.grammar={grammar}", "--out", str(tmp_path / "d")])
    assert code == 2
    assert "mood" in capsys.readouterr().err


def test_missing_dataset_exit_code(tmp_path, capsys):
    assert main(["pretrain", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_config_resolution(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nn_d = 3\nfeature_matching = no\n")
    cfg = resolve_config(ini, ["train.lr_g=0.5"])
    assert cfg["train"]["n_d"] == 3 and cfg["train"]["feature_matching"] is False
    assert cfg["train"]["lr_g"] == 0.5
    with pytest.raises(ConfigError, match="unknown key"):
        resolve_config(None, ["train.nope=1"])
    with pytest.raises(ConfigError, match="section"):
        resolve_config(None, ["bogus.n_d=1"])
    with pytest.raises(ConfigError):
        resolve_config(None, ["train.n_d=three"])
    assert config_hash(resolve_config()) == config_hash(resolve_config())


def test_bad_override_exit_code(tmp_path, capsys):
    assert main(["make-data", "--set", "data.k=zero", "--out", str(tmp_path)]) == 2
