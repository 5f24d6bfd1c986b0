import csv
import json

import pytest

from jointctc.cli import EXIT_CONFIG, EXIT_OK, main, parse_config, ConfigError

CONFIG = {
    "task": {"task": "reverse", "src_vocab": 5, "min_len": 2, "max_len": 4, "n_train": 40,
             "n_valid": 8, "n_test": 6},
    "model": {"d_model": 8, "n_heads": 2, "d_ff": 16, "n_src_layers": 1, "n_adjust_layers": 0,
              "n_tgt_layers": 1, "n_dec_layers": 1, "upsample_rate": 2},
    "train": {"max_steps": 4, "batch_size": 8, "warmup_steps": 2, "eval_every": 2},
    "decode": [{"mode": "joint-osync", "beam_size": 2}, {"mode": "joint-isync", "beam_size": 2}],
    "sweep": {"length_penalty": [0.0, 0.5], "modes": ["attn-only"]},
    "seed": 1,
}


def _write(tmp_path, cfg=None, name="exp.json"):
    cfg = dict(cfg or CONFIG)
    cfg.setdefault("output_dir", str(tmp_path / "runs"))
    p = tmp_path / name
    p.write_text(json.dumps(cfg, indent=2))
    return p


def test_unknown_key_reports_line(tmp_path, capsys):
    bad = json.loads(json.dumps(CONFIG))
    bad["train"]["learning_rate"] = 1.0
    p = _write(tmp_path, bad)
    assert main(["train", "--config", str(p)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    lineno = next(i for i, l in enumerate(p.read_text().splitlines(), 1) if "learning_rate" in l)
    assert f"exp.json:{lineno}:" in err and "learning_rate" in err


def test_syntax_error_reports_position(tmp_path, capsys):
    p = tmp_path / "broken.json"
    p.write_text('{\n  "seed": 1,\n  "task": {,}\n}\n')
    assert main(["gen-data", "--config", str(p)]) == EXIT_CONFIG
    assert "broken.json:3:" in capsys.readouterr().err


def test_bad_values_are_config_errors():
    with pytest.raises(ConfigError):
        parse_config(json.dumps({"decode": [{"mode": "nope"}]}))
    with pytest.raises(ConfigError):
        parse_config(json.dumps({"sweep": {"beam": []}}))
    with pytest.raises(ConfigError):
        parse_config("[1, 2]")


def test_missing_config_file(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.json")]) == EXIT_CONFIG


def test_oracle_check_exits_zero(capsys):
    assert main(["oracle-check", "--cases", "5"]) == EXIT_OK
    assert "FAIL" not in capsys.readouterr().out


def test_pipeline_and_noop_rerun(tmp_path, capsys):
    p = _write(tmp_path)
    assert main(["decode", "--config", str(p)]) == EXIT_OK
    d = tmp_path / "runs"
    stages = sorted(x.name.split("-")[0] for x in d.iterdir())
    assert stages == ["data", "decode", "train"]
    dec = next(d.glob("decode-*"))
    before = {f.name: f.stat().st_mtime_ns for f in dec.iterdir()}
    assert main(["decode", "--config", str(p)]) == EXIT_OK
    assert {f.name: f.stat().st_mtime_ns for f in dec.iterdir()} == before
    rows = list(csv.DictReader(open(dec / "summary.csv")))
    assert [r["mode"] for r in rows] == ["joint-osync", "joint-isync"]
    assert all(r["n"] == "6" for r in rows)

    # a different seed gets its own stage directories
    assert main(["gen-data", "--config", str(p), "--seed", "2"]) == EXIT_OK
    assert len(list(d.glob("data-*"))) == 2

    capsys.readouterr()
    data = next(x for x in d.glob("data-*") if (x / "test.tsv").exists()
                and json.loads((x / "config.json").read_text())["task"]["seed"] == 1)
    ckpt = next(d.glob("train-*")) / "best.ckpt"
    assert main(["evaluate", "--results", str(dec / "results.jsonl"), "--refs",
                 str(data / "test.tsv"), "--checkpoint", str(ckpt), "--out", str(tmp_path / "ev")]) == EXIT_OK
    lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert {l["mode"] for l in lines} == {"joint-osync", "joint-isync"}
    assert all("m_layer0" in l and 0 <= l["accuracy"] <= 1 for l in lines)


def test_sweep_writes_penalty_series(tmp_path):
    p = _write(tmp_path)
    assert main(["sweep", "--config", str(p)]) == EXIT_OK
    sw = next((tmp_path / "runs").glob("sweep-*"))
    rows = list(csv.DictReader(open(sw / "penalty_series.csv")))
    assert [float(r["length_penalty"]) for r in rows] == [0.0, 0.5]


def test_empty_test_split_gives_empty_summary(tmp_path):
    cfg = json.loads(json.dumps(CONFIG))
    cfg["task"]["n_test"] = 0
    p = _write(tmp_path, cfg)
    assert main(["decode", "--config", str(p)]) == EXIT_OK
    dec = next((tmp_path / "runs").glob("decode-*"))
    assert len((dec / "summary.csv").read_text().splitlines()) == 1
