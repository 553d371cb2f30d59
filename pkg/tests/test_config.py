import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlmcmc.errors import ConfigurationError
from rlmcmc.field import ActionId
from rlmcmc.harness.config import ExperimentConfig
from rlmcmc.harness.experiments import EXPERIMENTS, build_experiment


@pytest.mark.parametrize("name", EXPERIMENTS)
def test_round_trip(name, tmp_path):
    cfg = build_experiment(name)
    assert ExperimentConfig.loads(cfg.dumps()) == cfg
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg


@settings(max_examples=30)
@given(
    st.sampled_from(["mcmc", "rlmcmc", "erlmcmc"]),
    st.integers(0, 10**6),
    st.floats(1e-4, 1.0),
    st.lists(st.integers(1, 6), min_size=1, max_size=3).map(sorted),
    st.floats(0.0, 1.0),
)
def test_round_trip_of_variants(method, seed, rel, counts, p_rl):
    cfg = build_experiment("exp1").replace(
        method=method, seed=seed, posterior={"sigma_f_rel": rel, "basis_counts": counts}, rl={"p_rl": p_rl}
    )
    assert ExperimentConfig.from_dict(json.loads(cfg.dumps())) == cfg


def test_unknown_keys_rejected():
    d = build_experiment("exp1").to_dict()
    d["rl"]["learning_rate"] = 0.1
    with pytest.raises(ConfigurationError, match="learning_rate"):
        ExperimentConfig.from_dict(d)
    d = build_experiment("exp1").to_dict()
    d["colour"] = "blue"
    with pytest.raises(ConfigurationError, match="colour"):
        ExperimentConfig.from_dict(d)


@pytest.mark.parametrize(
    "change",
    [
        {"method": "gibbs"},
        {"mode": "batch"},
        {"timing": "cpu"},
        {"actions": ["shift-sideways"]},
        {"actions": []},
        {"grid": {"fine_n": 40, "coarse_n": 7}},
        {"posterior": {"basis_counts": [4, 2]}},
        {"posterior": {"basis_counts": []}},
        {"sources": [[0.1, 0.2, 0.1, 0.2]]},
        {"target": {"rects": [[0.1, 0.2, 0.3]]}},
        {"max_steps": -1},
        {"seed": "zero"},
        {"seed": 1.5},
        {"stop_at_threshold": 1},
    ],
)
def test_invalid_configs(change):
    with pytest.raises(ConfigurationError):
        build_experiment("exp1").replace(**change)


def test_target_needs_exactly_one_geometry():
    with pytest.raises(ConfigurationError):
        build_experiment("exp1").replace(target={"segments": [[0.1, 0.1, 0.5, 0.5, 0.02]]})


def test_explicit_init_matches_agents():
    with pytest.raises(ConfigurationError):
        build_experiment("exp1").replace(init={"kind": "explicit", "channels": [[0.1, 0.1, 0.1, 0.1]]})


def test_experiment_definitions():
    e1 = build_experiment("exp1")
    assert e1.sources[0] == [0.1, 0.2, 0.1, 0.2, 20.0]
    assert [b[4] for b in e1.sources] == [20.0, -5.0, 20.0, -5.0]
    assert e1.target.contrast == 1000.0
    assert e1.n_agents == 2
    e2 = build_experiment("exp2_onechannel")
    assert len(e2.action_ids) == 2
    assert e2.action_ids == (ActionId.SHIFT_LEFT, ActionId.SHIFT_RIGHT)
    assert e2.mode == "pure_rl"
    assert [b[4] for b in e2.sources] == [-5.0, -5.0, 20.0, -5.0]
    e3 = build_experiment("exp3_diagonal")
    assert e3.sources == e1.sources and len(e3.target.segments) == 2
    assert (e1.grid.fine_n, e1.grid.coarse_n) == (40, 8)


def test_unknown_experiment():
    with pytest.raises(ConfigurationError):
        build_experiment("exp4")


def test_int_accepted_for_float_fields():
    cfg = build_experiment("exp1").replace(rl={"lr_actor": 1})
    assert cfg.rl.lr_actor == 1.0 and isinstance(cfg.rl.lr_actor, float)
