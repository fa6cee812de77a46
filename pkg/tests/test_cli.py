import csv
import json

import pytest

from koopman_certify.cli import main


def write_config(path, **blocks):
    path.write_text(json.dumps(blocks, indent=2))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


@pytest.fixture
def duffing_cfg(tmp_path):
    return write_config(
        tmp_path / "cfg.json",
        scenario={"constraints": [{"expr": "x1 - 10", "label": "far"}], "T": 1.0},
        data={"m": 100, "seed": 0},
        certification={"epsilon": 0.1},
    )


def test_fit_writes_manifest_and_generators(tmp_path, duffing_cfg):
    out = tmp_path / "fit"
    assert main(["fit", "--config", duffing_cfg, "--out", str(out)]) == 0
    man = json.loads((out / "surrogate.json").read_text())
    assert man["N"] == 21 and [g["file"] for g in man["generators"]] == ["generator_L0.csv", "generator_e1.csv"]
    for name in ("generator_L0.csv", "generator_e1.csv"):
        text = (out / name).read_text()
        assert "# N=21" in text and f"# config_hash={man['config_hash']}" in text


def test_predict_grid_and_columns(tmp_path):
    cfg = write_config(tmp_path / "c.json", scenario={"T": 3.0}, data={"m": 100})
    out = tmp_path / "p"
    assert main(["predict", "--config", cfg, "--out", str(out)]) == 0
    rows = read_csv(out / "prediction.csv")
    assert len(rows) == 3001
    assert list(rows[0]) == ["t", "h_true", "h_bilinear", "h_edmdc", "rel_err_bilinear", "rel_err_edmdc"]
    assert float(rows[-1]["t"]) == 3.0
    assert main(["predict", "--config", cfg, "--out", str(out), "--no-edmdc"]) == 0
    assert list(read_csv(out / "prediction.csv")[0]) == ["t", "h_true", "h_bilinear", "rel_err_bilinear"]


def test_predict_from_saved_surrogate_matches_in_memory(tmp_path, duffing_cfg):
    fit_dir, a, b = tmp_path / "f", tmp_path / "a", tmp_path / "b"
    assert main(["fit", "--config", duffing_cfg, "--out", str(fit_dir)]) == 0
    assert main(["predict", "--config", duffing_cfg, "--out", str(a), "--no-edmdc"]) == 0
    assert main(["predict", "--config", duffing_cfg, "--out", str(b), "--no-edmdc",
                 "--surrogate", str(fit_dir / "surrogate.json")]) == 0
    ra, rb = read_csv(a / "prediction.csv"), read_csv(b / "prediction.csv")
    assert [r["h_bilinear"] for r in ra] == [r["h_bilinear"] for r in rb]


def test_missing_surrogate_exit_2(tmp_path, duffing_cfg):
    assert main(["predict", "--config", duffing_cfg, "--out", str(tmp_path),
                 "--surrogate", str(tmp_path / "nope.json")]) == 2


def test_certify_exit_codes(tmp_path, duffing_cfg):
    out = tmp_path / "ok"
    assert main(["certify", "--config", duffing_cfg, "--out", str(out)]) == 0
    cert = json.loads((out / "certificate.json").read_text())
    assert [c["verdict"] for c in cert["constraints"]] == ["certified"]
    assert cert["constraints"][0]["representation"] == "projected"
    cfg = json.loads(open(duffing_cfg).read())
    cfg["dictionary"] = {"include_constraints": True}
    comp = write_config(tmp_path / "comp.json", **cfg)
    assert main(["certify", "--config", comp, "--out", str(tmp_path / "comp")]) == 0
    cert = json.loads((tmp_path / "comp" / "certificate.json").read_text())
    assert cert["constraints"][0]["representation"] == "exact" and cert["provenance"]["N"] == 22
    bad = write_config(tmp_path / "bad.json", scenario={"constraints": [{"expr": "-x1 + 10"}], "T": 1.0},
                       certification={"epsilon": 20})
    out2 = tmp_path / "rej"
    assert main(["certify", "--config", bad, "--out", str(out2)]) == 1
    cert = json.loads((out2 / "certificate.json").read_text())
    assert cert["constraints"][0]["verdict"] == "rejected"
    assert cert["constraints"][0]["first_failure_time"] == 0.0
    zero = write_config(tmp_path / "z.json", scenario={"constraints": [{"expr": "x1"}]},
                        certification={"epsilon": 0})
    assert main(["certify", "--config", zero, "--out", str(tmp_path / "z")]) == 2


def test_config_errors_exit_2(tmp_path, capsys):
    broken = tmp_path / "broken.json"
    broken.write_text('{"data": {"m": 100,}}')
    assert main(["fit", "--config", str(broken), "--out", str(tmp_path)]) == 2
    assert "line 1, column" in capsys.readouterr().err
    m0 = write_config(tmp_path / "m0.json", data={"m": 0})
    assert main(["fit", "--config", m0, "--out", str(tmp_path)]) == 2
    assert "m must be ≥ 1" in capsys.readouterr().err
    unknown = write_config(tmp_path / "u.json", data={"m": 10, "mm": 1})
    assert main(["fit", "--config", unknown, "--out", str(tmp_path)]) == 2
    assert "mm" in capsys.readouterr().err
    assert main(["fit", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["frobnicate"]) == 2


def test_threads_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("KOOPMAN_CERTIFY_THREADS", "zero")
    cfg = write_config(tmp_path / "c.json", data={"m": 50})
    assert main(["fit", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    monkeypatch.setenv("KOOPMAN_CERTIFY_THREADS", "2")
    assert main(["fit", "--config", cfg, "--out", str(tmp_path / "o")]) == 0


def test_generator_sweep_rows_threads_and_resume(tmp_path):
    cfg = write_config(tmp_path / "s.json", dictionary={"degree": 2}, data={"trials": 3, "seed": 7},
                       sweep={"kind": "generator", "m_values": [50, 100], "epsilons": [1.0]})
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["sweep", "--config", cfg, "--out", str(a), "--threads", "1"]) == 0
    assert main(["sweep", "--config", cfg, "--out", str(b), "--threads", "3"]) == 0
    text = (a / "sweep.csv").read_text()
    assert text == (b / "sweep.csv").read_text()
    assert len(read_csv(a / "sweep.csv")) == 6
    cache = (a / "cells.jsonl").read_text().splitlines()
    assert len(cache) == 6
    # drop half the cells, then resume: the result must be unchanged
    (a / "cells.jsonl").write_text("\n".join(cache[:3]) + "\n")
    assert main(["sweep", "--config", cfg, "--out", str(a), "--resume"]) == 0
    assert (a / "sweep.csv").read_text() == text


def test_duffing_bench_summary(tmp_path):
    cfg = write_config(tmp_path / "d.json", scenario={"T": 0.5}, data={"m": 100, "seeds": [0, 1]},
                       output={"formats": ["csv", "json", "svg"]})
    out = tmp_path / "d"
    assert main(["duffing-bench", "--config", cfg, "--out", str(out)]) == 0
    summary = json.loads((out / "duffing_summary.json").read_text())
    assert "median_cross_0.001" in summary["bilinear"] and summary["edmdc"] is not None
    assert (out / "duffing.svg").read_text().lstrip().startswith("<svg")
    assert len(read_csv(out / "duffing.csv")) == 2
