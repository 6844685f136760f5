import json
from pathlib import Path

import pytest

from core.netsched import arrivals as arr
from core.netsched.analysis import traffic_intensity
from core.netsched.config import (
    ExperimentConfig,
    build_arrivals,
    from_mapping,
    load_config_file,
    parse_number_list,
    rescale_arrivals,
    with_arrivals,
    worker_count,
)
from core.netsched.errors import ConfigError, InvalidHorizon, InvalidPolicy
from core.netsched.scheduling import MaxWeight, MaxWeightAlpha, Priority


# --- ExperimentConfig ---
def test_defaults(parallel2, light_pair):
    cfg = ExperimentConfig(parallel2, light_pair)
    assert cfg.policy == MaxWeight()
    assert cfg.effective_warmup == 10 ** 4
    assert cfg.seeds == [0]
    assert cfg.rates == [0.3, 0.3]


def test_seeds_are_consecutive(parallel2, light_pair):
    cfg = ExperimentConfig(parallel2, light_pair, replications=3, base_seed=7)
    assert cfg.seeds == [7, 8, 9]
    assert cfg.run_kwargs(8)["seed"] == 8


@pytest.mark.parametrize("kwargs,exc", [
    ({"replications": 0}, ConfigError),
    ({"base_seed": -1}, ConfigError),
    ({"horizon": 100, "warmup": 100}, InvalidHorizon),
    ({"horizon": 0}, InvalidHorizon),
    ({"collect": "always"}, ConfigError),
    ({"policy": MaxWeightAlpha((0.5,))}, InvalidPolicy),
    ({"policy": Priority((0, 0))}, InvalidPolicy),
])
def test_invalid_config(parallel2, light_pair, kwargs, exc):
    with pytest.raises(exc):
        ExperimentConfig(parallel2, light_pair, **kwargs)


def test_arrival_count_mismatch(parallel2):
    with pytest.raises(ConfigError):
        ExperimentConfig(parallel2, (arr.bernoulli(0.2),))


def test_with_arrivals(parallel2, light_pair):
    cfg = with_arrivals(ExperimentConfig(parallel2, light_pair), [arr.bernoulli(0.1)] * 2)
    assert cfg.rates == [0.1, 0.1]


# --- worker count ---
def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("MWSCHED_THREADS", "3")
    assert worker_count() == 3


def test_worker_count_default():
    assert worker_count() >= 1


@pytest.mark.parametrize("raw", ["0", "-2", "many"])
def test_worker_count_invalid(monkeypatch, caplog, raw):
    monkeypatch.setenv("MWSCHED_THREADS", raw)
    with pytest.raises(ConfigError):
        worker_count()
    assert "MWSCHED_THREADS" in caplog.text


# --- number lists ---
def test_parse_number_list():
    assert parse_number_list("0.3, 0.6,0.3") == [0.3, 0.6, 0.3]
    assert parse_number_list("1e4,1e5", int) == [10_000, 100_000]


def test_parse_number_list_invalid():
    with pytest.raises(ConfigError):
        parse_number_list("0.3,x")


# --- arrivals ---
def test_build_arrivals_keeps_size_distribution(fig3):
    spec, defaults = fig3
    out = build_arrivals(defaults, 3, rates=[0.2, 0.6, 0.3])
    assert isinstance(out[0].size, arr.Zeta)
    assert arr.rate(out[0]) == pytest.approx(0.2)
    assert out[1] == arr.bernoulli(0.6)


def test_build_arrivals_heavy(light_pair):
    out = build_arrivals(light_pair, 2, heavy=[1], beta=2.5)
    assert out[0] == light_pair[0]
    assert out[1].size == arr.Zeta(2.5)
    assert arr.rate(out[1]) == pytest.approx(0.3)


@pytest.mark.parametrize("kwargs", [{"rates": [0.1]}, {"heavy": [2]}])
def test_build_arrivals_invalid(light_pair, kwargs):
    with pytest.raises(ConfigError):
        build_arrivals(light_pair, 2, **kwargs)


def test_rescale_arrivals(fig3):
    spec, defaults = fig3
    out = rescale_arrivals(defaults, spec, 0.9)
    assert traffic_intensity([arr.rate(a) for a in out], spec) == pytest.approx(0.9, abs=1e-9)
    assert isinstance(out[0].size, arr.Zeta)


# --- mappings / files ---
def test_from_mapping_preset_and_rates():
    cfg = from_mapping({"preset": "fig3", "rates": [0.3, 0.35, 0.3], "horizon": "1e5", "seed": 4})
    assert cfg.network.name == "fig3"
    assert cfg.horizon == 100_000
    assert cfg.base_seed == 4
    assert cfg.rates == pytest.approx([0.3, 0.35, 0.3])


def test_from_mapping_overrides_win():
    data = {"preset": "parallel(2)", "replications": 2, "seed": 1}
    cfg = from_mapping(data, {"replications": 5, "seed": None})
    assert cfg.replications == 5
    assert cfg.base_seed == 1


def test_from_mapping_preset_override_drops_inline_network():
    data = {"network": {"num_flows": 1, "schedules": [[0]]}, "arrivals": [{"file_prob": 0.5}]}
    cfg = from_mapping(data, {"preset": "fig1"})
    assert cfg.network.num_flows == 2


def test_from_mapping_inline_network_and_arrivals():
    data = {
        "network": {"num_flows": 2, "schedules": [[0], [1]]},
        "arrivals": [{"file_prob": 0.2}, {"file_prob": 0.1, "size": {"kind": "geometric", "success_prob": 0.5}}],
    }
    cfg = from_mapping(data)
    assert cfg.rates == pytest.approx([0.2, 0.2])


def test_from_mapping_policy_string_and_alphas():
    cfg = from_mapping({"preset": "fig1", "policy": "mwalpha", "alphas": [0.4, 1.0]})
    assert cfg.policy == MaxWeightAlpha((0.4, 1.0))
    cfg = from_mapping({"preset": "fig1", "policy": {"kind": "priority"}, "order": [1, 0]})
    assert cfg.policy == Priority((1, 0))


def test_from_mapping_alphas_need_alpha_policy(caplog):
    with pytest.raises(InvalidPolicy):
        from_mapping({"preset": "fig1", "policy": "max_weight", "alphas": [0.4, 1.0]})
    assert "does not take alphas" in caplog.text


def test_from_mapping_rho():
    cfg = from_mapping({"preset": "parallel(4)", "rho": 0.5})
    assert sum(cfg.rates) == pytest.approx(0.5)


def test_from_mapping_requires_network():
    with pytest.raises(ConfigError):
        from_mapping({"horizon": 1000})


def test_from_mapping_arrival_count_mismatch():
    with pytest.raises(ConfigError):
        from_mapping({"preset": "fig1", "arrivals": [{"file_prob": 0.5}]})


def test_from_mapping_malformed_value():
    with pytest.raises(ConfigError):
        from_mapping({"preset": "fig1", "replications": "two"})


def test_load_config_file(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({"preset": "fig1", "output_dir": str(tmp_path / "o")}), encoding="utf-8")
    cfg = from_mapping(load_config_file(path))
    assert cfg.output_dir == Path(tmp_path / "o")


@pytest.mark.parametrize("content", ["{not json", "[1, 2]"])
def test_load_config_file_invalid(tmp_path, content):
    path = tmp_path / "bad.json"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config_file(path)


def test_load_config_file_missing(tmp_path):
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "missing.json")
