from pathlib import Path

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from pamarctl.config import ConfigError, apply_overrides, dump_config, load_config, parse_config

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"
ALL = sorted(FIXTURES.glob("*.yaml"))


def base():
    return yaml.safe_load((FIXTURES / "hydropower_tiny.yaml").read_text())


@pytest.mark.parametrize("path", ALL, ids=lambda p: p.stem)
def test_fixture_round_trip(path):
    cfg = load_config(path)
    again = parse_config(yaml.safe_load(dump_config(cfg)))
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 500), st.floats(1e-3, 1.0), st.floats(0.0, 1e5), st.integers(1, 30),
       st.integers(0, 2**64 - 1), st.sampled_from(["expectation", "cvar"]),
       st.floats(0.01, 1.0))
def test_round_trip_property(scenarios, lr, wrap, rounds, seed, kind, beta):
    data = base()
    data["seed"] = seed
    data["solver"].update(scenarios=scenarios, learning_rate=lr, wrap_weight=wrap,
                          picard_rounds=rounds)
    data["problem"]["hydropower"]["risk"] = {"kind": kind, "beta": beta}
    cfg = parse_config(data)
    assert parse_config(yaml.safe_load(dump_config(cfg))) == cfg


@given(st.integers(2, 12), st.integers(3, 48))
def test_rejects_period_that_does_not_divide(t1, T):
    if T <= t1 or T % t1 == 0:
        return
    data = base()
    data["calendar"]["periods"] = [t1, T]
    data["pamar"]["mu"] = 1.0
    data["basis"]["harmonics"] = [0, 0]
    with pytest.raises(ConfigError, match="divide"):
        parse_config(data)


def test_unknown_keys_are_reported_with_their_path():
    data = base()
    data["solver"]["learnig_rate"] = 0.1
    with pytest.raises(ConfigError, match=r"solver\.learnig_rate"):
        parse_config(data)


def test_cross_checks():
    data = base()
    data["basis"]["harmonics"] = [3]
    with pytest.raises(ConfigError, match="alias"):
        parse_config(data)
    data = base()
    data["basis"]["harmonics"] = [1, 1]
    with pytest.raises(ConfigError):
        parse_config(data)
    data = base()
    data["problem"]["kind"] = "vpp"
    with pytest.raises(ConfigError, match="exactly the matching"):
        parse_config(data)
    data = base()
    data["pamar"]["mu"] = [1.0, 2.0, 3.0]
    with pytest.raises(ConfigError, match="inconsistent"):
        parse_config(data)
    data = base()
    data["problem"]["hydropower"]["storage_upper"] = -1.0
    with pytest.raises(ConfigError):
        parse_config(data)


def test_non_numeric_and_non_finite_values():
    data = base()
    data["pamar"]["mu"] = ["a", 1.0]
    with pytest.raises(ConfigError):
        parse_config(data)
    data = base()
    data["pamar"]["sigma"] = float("nan")
    with pytest.raises(ConfigError):
        parse_config(data)


def test_parse_errors_carry_a_position(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("seed: 1\ncalendar: [\n")
    with pytest.raises(ConfigError, match="line"):
        load_config(p)
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.yaml")
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(p)


def test_overrides():
    data = base()
    out = apply_overrides(data, ["solver.scenarios=7", "seed=5", "pamar.mu=[1, 2, 3, 4]"])
    assert out["solver"]["scenarios"] == 7 and out["seed"] == 5
    assert out["pamar"]["mu"] == [1, 2, 3, 4]
    assert data["solver"]["scenarios"] == 1  # input untouched
    with pytest.raises(ConfigError):
        apply_overrides(data, ["solver.scenarios"])
    with pytest.raises(ConfigError):
        apply_overrides(data, ["seed.x=1"])
    cfg = load_config(FIXTURES / "hydropower_tiny.yaml", ["solver.max_iter=9"])
    assert cfg.solver.max_iter == 9


def test_seed_range():
    data = base()
    data["seed"] = 2**64
    with pytest.raises(ConfigError):
        parse_config(data)
    data["seed"] = -1
    with pytest.raises(ConfigError):
        parse_config(data)
