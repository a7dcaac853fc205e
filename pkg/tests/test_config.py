import json

import pytest

from mfcrand.config import ConfigError, bundled_config_path, load_config, make_intensity, schema
from mfcrand.instances import SHAPES, micro_instances, random_instance


def test_bundled_config_loads_with_defaults():
    cfg = load_config(bundled_config_path())
    assert cfg.tol["equivalence"] == 1e-8 and cfg.tol["dpp"] == 1e-6
    assert len(cfg.instances()) == 1 + cfg.section("random_instances")["count"]
    main, alt = cfg.lambda_families(cfg.instance())
    assert main.masses[0].shape == alt.masses[0].shape


def test_schema_is_draft7_object():
    s = schema()
    assert s["type"] == "object" and "instance" in s["required"]


def test_unreadable_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_g_probs_length_checked(tmp_path):
    data = json.loads(bundled_config_path().read_text())
    data["instance"]["g_probs"] = [1.0]
    p = tmp_path / "c.json"
    p.write_text(json.dumps(data))
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert exc.value.path == "instance.g_probs"


def test_intensity_missing_parameter_path():
    with pytest.raises(ConfigError) as exc:
        make_intensity({"name": "constant"}, "girsanov.nu.0")
    assert exc.value.path == "girsanov.nu.0.c"


def test_micro_instances_cover_admissible_shapes():
    insts = micro_instances(6, 10)
    shapes = {(i.tree.M, i.actions.size) for i in insts}
    assert shapes == set(SHAPES)
    a, b = random_instance(3), random_instance(3)
    assert a.params == b.params
