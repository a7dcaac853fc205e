import csv
import json

import pytest

from mfcrand import cli
from mfcrand.config import ConfigError, bundled_config_path, load_config


def _cfg(tmp_path, data):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(data))
    return str(p)


def _bundled():
    return json.loads(bundled_config_path().read_text())


def test_missing_key_exits_2_with_path(tmp_path, capsys):
    data = _bundled()
    del data["instance"]["steps"]
    code = cli.main(["bsde", "--config", _cfg(tmp_path, data), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "instance.steps" in capsys.readouterr().err


def test_bad_type_reports_key_path(tmp_path):
    data = _bundled()
    data["mc"]["N"] = "many"
    with pytest.raises(ConfigError) as exc:
        load_config(_cfg(tmp_path, data))
    assert exc.value.path == "mc.N"


def test_unknown_intensity_family(tmp_path):
    data = _bundled()
    data["mc"]["nu"] = [{"name": "nonsense"}]
    assert cli.main(["equivalence", "--config", _cfg(tmp_path, data), "--out", str(tmp_path / "o")]) == 2


def test_budget_error_exits_2(tmp_path):
    data = _bundled()
    data["instance"]["steps"] = 6
    data["random_instances"]["count"] = 0
    assert cli.main(["bsde", "--config", _cfg(tmp_path, data), "--out", str(tmp_path / "o")]) == 2


def test_bsde_levels_monotone_csv(tmp_path):
    data = _bundled()
    data["solver"]["levels"] = [1, 2, 4, 8]
    out = tmp_path / "bsde"
    assert cli.main(["bsde", "--config", _cfg(tmp_path, data), "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "results.csv").open()))
    by_level = {}
    for r in rows:
        by_level.setdefault(r["n"], {})[(r["step"], r["node"])] = float(r["Y"])
    levels = ["1", "2", "4", "8", "inf"]
    assert list(by_level) == levels
    for lo, hi in zip(levels, levels[1:]):
        assert all(by_level[hi][key] >= by_level[lo][key] - 1e-12 for key in by_level[lo])
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["passed"] and manifest["summary"]["monotone"]
    assert "time" not in json.dumps(manifest).lower().replace("times", "")


def test_seed_override_and_json_format(tmp_path):
    out = tmp_path / "dpp"
    code = cli.main(["dpp", "--config", str(bundled_config_path()), "--seed", "5", "--format", "json",
                     "--out", str(out)])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 5 and manifest["results_file"] == "results.json"
    res = json.loads((out / "results.json").read_text())
    assert "residual" in res["columns"] and res["rows"]


def test_float_format_has_17_digits():
    assert cli._fmt(0.1) == "0.10000000000000001"
    assert cli._fmt(float("inf")) == "inf"
