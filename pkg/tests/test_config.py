import copy
import json

import pytest

from lcv.config import ConfigError, builtin_config_path, config_hash, load_scenario, scenario_from_dict

BUNDLED = ["two_material", "three_material", "four_material", "pulse"]


@pytest.fixture
def doc():
    return json.loads(builtin_config_path("three_material").read_text())


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_configs_load(name):
    sc = load_scenario(builtin_config_path(name))
    assert sc.system.m == 50
    assert len(sc.config_hash) == 16


def test_defaults_match_experiment_protocol(doc):
    sc = scenario_from_dict(doc)
    assert sc.steps == 3600
    assert sc.mpc.resolved_horizon(sc.system) == 10
    assert sc.mpc.accounting == "prose"


def test_hash_is_canonical(doc):
    shuffled = json.loads(json.dumps(doc, sort_keys=True))
    assert config_hash(doc) == config_hash(shuffled)
    changed = copy.deepcopy(doc)
    changed["system"]["steps"] = 10
    assert config_hash(changed) != config_hash(doc)


@pytest.mark.parametrize("mutate, key", [
    (lambda d: d["stations"][0].pop("span"), "stations[0].span"),
    (lambda d: d["stations"][1].update(span=[5]), "stations[1].span"),
    (lambda d: d["stations"][0].update(span=[9, 3]), "stations[0].span"),
    (lambda d: d["system"].pop("m"), "system.m"),
    (lambda d: d["system"].update(m="fifty"), "system.m"),
    (lambda d: d["materials"][2].update(price=-1), "materials[2].price"),
    (lambda d: d["mpc"].update(step_size=1), "mpc.step_size"),
    (lambda d: d.pop("camera"), "camera"),
    (lambda d: d["camera"].update({"lambda": 60}), "camera.lambda"),
    (lambda d: d["infeed"]["materials"].pop(), "infeed.materials"),
    (lambda d: d["infeed"]["materials"][0].update(regime_mean_duration=0), "infeed.materials[0]"),
])
def test_validation_names_key(doc, mutate, key):
    mutate(doc)
    with pytest.raises(ConfigError) as err:
        scenario_from_dict(doc)
    assert err.value.key == key
    assert key in str(err.value)


def test_schedule_segments(doc):
    doc["infeed"]["schedule"] = [
        {"from": 0, "to": 4, "rates": [1.0, 0.0, 0.0]},
        {"from": 2, "to": 3, "rates": [0.5, 2.0, 0.0]},
    ]
    sched = scenario_from_dict(doc).infeed.schedule
    assert sched.tolist() == [[1, 0, 0], [1, 0, 0], [1.5, 2, 0], [1, 0, 0]]
    doc["infeed"]["schedule"] = [{"from": 0, "to": 4, "rates": [1.0]}]
    with pytest.raises(ConfigError) as err:
        scenario_from_dict(doc)
    assert err.value.key == "infeed.schedule[0].rates"


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError):
        load_scenario(path)
