import json

import pytest

from gruntlab.cli import main, read_config_file


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--players", "10", "--clips", "6", "--seed", "5",
                 "--out", str(root / "corpus")]) == 0
    return root


def test_synth_is_byte_identical(corpus, tmp_path):
    assert main(["synth", "--players", "10", "--clips", "6", "--seed", "5", "--out", str(tmp_path)]) == 0
    first = sorted((corpus / "corpus").iterdir())
    assert len(first) == 61
    for f in first:
        assert f.read_bytes() == (tmp_path / f.name).read_bytes()


def test_synth_odd_clip_count_is_error(tmp_path, capsys):
    assert main(["synth", "--clips", "31", "--out", str(tmp_path)]) != 0
    assert "even" in capsys.readouterr().err


def test_validate(corpus, capsys):
    assert main(["validate", "--manifest", str(corpus / "corpus" / "manifest.csv")]) == 0
    assert "OK" in capsys.readouterr().out


def test_extract_is_idempotent(corpus, capsys):
    args = ["extract", "--clips", str(corpus / "corpus"), "--cache", str(corpus / "cache"),
            "--feature", "mfcc"]
    assert main(args) == 0
    assert "60 computed" in capsys.readouterr().out
    before = (corpus / "cache" / "mfcc.grnt").read_bytes()
    assert main(args) == 0
    assert "0 computed" in capsys.readouterr().out
    assert (corpus / "cache" / "mfcc.grnt").read_bytes() == before


def test_invalid_combination_fails_before_compute(corpus, tmp_path, capsys):
    out = tmp_path / "o"
    code = main(["crossval", "--clips", str(corpus / "corpus"), "--cache", str(tmp_path / "cache"),
                 "--model", "crnn", "--feature", "compare_functionals", "--out", str(out)])
    assert code == 2 and "config error" in capsys.readouterr().err
    assert not (tmp_path / "cache").exists() and not out.exists()


def test_crossval_and_report(corpus, tmp_path, capsys):
    base = ["crossval", "--clips", str(corpus / "corpus"), "--cache", str(corpus / "cache"),
            "--feature", "mfcc"]
    assert main(base + ["--task", "sex", "--aggregation", "mean", "--c-grid", "1e-3,1e-1",
                        "--iterations", "50", "--out", str(tmp_path / "a")]) == 0
    assert main(base + ["--task", "score", "--subset", "men", "--model", "crnn", "--hp", "IV",
                        "--epochs", "1", "--out", str(tmp_path / "b")]) == 0
    doc = json.loads((tmp_path / "b" / "report.json").read_text())
    r = doc["reports"][0]
    assert (r["task"], r["subset"], r["hp"]) == ("score", "men", "IV")
    assert (tmp_path / "a" / "report.txt").read_text().startswith("== task: sex ==")
    capsys.readouterr()
    assert main(["report", str(tmp_path / "a" / "report.json"), str(tmp_path / "b" / "report.json"),
                 "--out", str(tmp_path / "m")]) == 0
    out = capsys.readouterr().out
    assert "== task: sex ==" in out and "== task: score ==" in out
    merged = json.loads((tmp_path / "m" / "merged.json").read_text())["reports"]
    originals = (json.loads((tmp_path / "a" / "report.json").read_text())["reports"] + doc["reports"])
    key = lambda x: json.dumps(x, sort_keys=True)
    assert sorted(map(key, merged)) == sorted(map(key, originals))


def test_report_schema_mismatch(tmp_path):
    (tmp_path / "r.json").write_text(json.dumps({"schema_version": "nope", "reports": []}))
    assert main(["report", str(tmp_path / "r.json")]) == 2


def test_config_precedence(corpus, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# sweep\ntask=score\nfeature=mfcc\naggregation=middle\nc_grid=1e-2\niterations=20\n")
    common = ["crossval", "--clips", str(corpus / "corpus"), "--cache", str(corpus / "cache")]
    assert main(["--config", str(cfg)] + common + ["--out", str(tmp_path / "f")]) == 0
    r = json.loads((tmp_path / "f" / "report.json").read_text())["reports"][0]
    assert r["task"] == "score" and r["feature"]["aggregation"] == "middle" and r["model"]["C"] == 0.01
    assert main(["--config", str(cfg)] + common + ["--task", "sex", "--out", str(tmp_path / "g")]) == 0
    r = json.loads((tmp_path / "g" / "report.json").read_text())["reports"][0]
    assert r["task"] == "sex" and r["feature"]["aggregation"] == "middle"
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_flag=1\n")
    assert main(["--config", str(bad)] + common + ["--out", str(tmp_path / "h")]) == 2
    assert read_config_file(cfg)["c_grid"] == "1e-2"


def test_train_predict_and_gradcheck(corpus, tmp_path, capsys):
    ck = tmp_path / "svm.gmdl"
    common = ["--clips", str(corpus / "corpus"), "--cache", str(corpus / "cache")]
    assert main(["train"] + common + ["--task", "sex", "--feature", "mfcc", "--aggregation", "mean",
                                      "--iterations", "50", "--checkpoint", str(ck)]) == 0
    capsys.readouterr()
    assert main(["predict"] + common + ["--checkpoint", str(ck)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "clip,prediction" and len(lines) == 61
    assert main(["gradcheck", "--trials", "2"]) == 0
    assert capsys.readouterr().out.count("PASS") == 2
