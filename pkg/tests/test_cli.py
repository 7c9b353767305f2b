import csv
import json
import shutil

import numpy as np
import pytest

from depvox import __version__
from depvox.cli import main
from depvox.featstore import FeatureCache
from depvox.corpus import load_manifest

SYNTH = {"n_speakers": 10, "recordings_per_speaker": 1, "recording_dur": 40.0}
GE2E = {"ge2e": {"hidden": 16, "layers": 2, "steps": 10, "n_speakers": 4, "n_utterances": 3}, "eval_every": 5}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run_pipeline(root):
    """synth -> ge2e-train -> embed -> features -> train -> eval -> sweep under ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    c = str(root / "corpus")
    cache = str(root / "cache")
    codes = [
        main(["synth", "--config", write_json(root / "s.json", SYNTH), "--seed", "1", "--out", c]),
        main(["ge2e-train", "--config", write_json(root / "g.json", {"corpus": c, **GE2E}), "--out",
              str(root / "ge2e")]),
        main(["embed", "--config", write_json(root / "e.json", {"corpus": c, "checkpoint": str(root / "ge2e" / "ge2e.ckpt")}),
              "--out", cache]),
        main(["features", "--config", str(root / "e.json"), "--features", "is09", "--out", cache]),
    ]
    tcfg = write_json(root / "t.json", {"corpus": c, "cache": cache, "train": {"epochs": 3}, "contexts": [2, 4],
                                        "seeds": [0, 1]})
    codes.append(main(["train", "--config", tcfg, "--arch", "lstm_d", "--features", "spk_emb", "--context", "4",
                       "--out", str(root / "train")]))
    ecfg = write_json(root / "ev.json", {"corpus": c, "cache": cache, "checkpoint": str(root / "train" / "model.ckpt")})
    codes.append(main(["eval", "--config", ecfg, "--out", str(root / "eval")]))
    codes.append(main(["sweep", "--config", tcfg, "--arch", "ce_dl", "--features", "is09", "--out",
                       str(root / "sweep")]))
    return codes


ARTIFACTS = ["corpus/manifest.jsonl", "corpus/ground_truth.csv", "ge2e/ge2e.ckpt", "ge2e/history.csv",
             "cache/index.csv", "train/model.ckpt", "train/curves.csv", "eval/metrics.csv", "eval/decisions.csv",
             "sweep/sweep.csv"]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    return base, run_pipeline(base / "a"), run_pipeline(base / "b")


def test_all_commands_exit_zero(runs):
    _, a, b = runs
    assert a == [0] * 7 and b == [0] * 7


def test_rerun_is_byte_identical(runs):
    base, _, _ = runs
    for rel in ARTIFACTS:
        assert (base / "a" / rel).read_bytes() == (base / "b" / rel).read_bytes(), rel
    for f in sorted((base / "a" / "cache" / "spk_emb").glob("*.bin")):
        assert f.read_bytes() == (base / "b" / "cache" / "spk_emb" / f.name).read_bytes()


def test_run_records(runs):
    base, _, _ = runs
    rec = json.loads((base / "a" / "train" / "run-train.json").read_text())
    assert rec["version"] == f"depvox {__version__}"
    assert rec["seeds"] == {"root": 0}
    # flags win over the config file
    assert rec["config"]["context"] == 4 and rec["config"]["arch"] == "lstm_d"
    assert rec["config"]["train"] == {"epochs": 3}
    for d in ("corpus", "ge2e", "cache", "eval", "sweep"):
        assert list((base / "a" / d).glob("run-*.json")), d


def test_embeddings_unit_norm(runs):
    base, _, _ = runs
    m = load_manifest(base / "a" / "corpus" / "manifest.jsonl")
    t = FeatureCache(base / "a" / "cache").load_table("spk_emb", m)
    for v in t.vectors.values():
        assert v.shape[1] == 256
        assert np.all(np.abs(np.linalg.norm(v, axis=1) - 1) < 1e-6)


def test_is09_vectors_are_384(runs):
    base, _, _ = runs
    with (base / "a" / "cache" / "index.csv").open() as fh:
        dims = {r["kind"]: int(r["dim"]) for r in csv.DictReader(fh)}
    assert dims == {"is09": 384, "spk_emb": 256}


def test_eval_and_sweep_schema(runs):
    base, _, _ = runs
    header = (base / "a" / "eval" / "metrics.csv").read_text().splitlines()[0].split(",")
    assert {"f1_d", "f1_h", "acc"} <= set(header)
    rows = list(csv.DictReader((base / "a" / "sweep" / "sweep.csv").open()))
    assert [r["context"] for r in rows] == ["2", "4"]
    assert all(r["features"] == "spk_emb+is09" and r["arch"] == "ce_dl" for r in rows)


def test_features_cache_hit(runs, caplog):
    base, _, _ = runs
    import logging
    caplog.set_level(logging.INFO)
    assert main(["features", "--config", str(base / "a" / "e.json"), "--features", "is09", "--out",
                 str(base / "a" / "cache")]) == 0
    assert "0 computed" in caplog.text


def test_sweep_context_too_long(runs, capsys):
    base, _, _ = runs
    # test recordings are 40 s -> 8 segments
    code = main(["sweep", "--config", str(base / "a" / "t.json"), "--context", "24", "--out", str(base / "x")])
    assert code == 1
    assert "exceed the shortest test recording" in capsys.readouterr().err


def test_corrupt_cache_record_named(runs, tmp_path, capsys):
    base, _, _ = runs
    cache = tmp_path / "cache"
    shutil.copytree(base / "a" / "cache", cache)
    victim = sorted((cache / "spk_emb").glob("*.bin"))[0]
    buf = bytearray(victim.read_bytes())
    buf[12] ^= 0xFF
    victim.write_bytes(bytes(buf))
    cfg = write_json(tmp_path / "t.json", {"corpus": str(base / "a" / "corpus"), "cache": str(cache),
                                           "train": {"epochs": 1}})
    assert main(["train", "--config", cfg, "--context", "4", "--out", str(tmp_path / "tr")]) == 1
    assert victim.name in capsys.readouterr().err


def test_missing_checkpoint(tmp_path, capsys):
    cfg = write_json(tmp_path / "e.json", {"corpus": str(tmp_path), "checkpoint": str(tmp_path / "nope.ckpt")})
    assert main(["embed", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "checkpoint not found" in capsys.readouterr().err


def test_invalid_effect_size(tmp_path, capsys):
    cfg = write_json(tmp_path / "s.json", {"class_effect_size": -1.0})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "c")]) == 1
    assert "class_effect_size" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = write_json(tmp_path / "s.json", {"n_speakerz": 3})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "c")]) == 1
    assert "n_speakerz" in capsys.readouterr().err


def test_bad_json(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["synth", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "c")]) == 1


def test_unknown_arch_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["train", "--arch", "gru_d", "--out", str(tmp_path)])
    assert e.value.code == 2


def test_default_synth_is_twenty_speakers(tmp_path):
    assert main(["synth", "--config", write_json(tmp_path / "s.json", {"recording_dur": 2.0,
                                                                        "recordings_per_speaker": 1}),
                 "--out", str(tmp_path / "c")]) == 0
    assert len(load_manifest(tmp_path / "c" / "manifest.jsonl").speakers()) == 20
