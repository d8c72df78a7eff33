import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from gsem.simulate import CSV_HEADER, SyntheticScenario, rankdata, run_simulation, spearman

SMALL = dict(n_good=4, n_bad=4, n_episodes=30, vocab_size=20)


def test_rankdata_ties():
    assert rankdata([10, 20, 10, 30]) == [1.5, 3.0, 1.5, 4.0]


@settings(max_examples=100)
@given(st.lists(st.integers(0, 5), min_size=2, max_size=30), st.integers(0, 2**32 - 1))
def test_spearman_matches_scipy(xs, seed):
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, 4, len(xs)).tolist()
    assert rankdata(xs) == stats.rankdata(xs).tolist()
    ref = stats.spearmanr(xs, ys).statistic if len(set(xs)) > 1 and len(set(ys)) > 1 else math.nan
    got = spearman(xs, ys)
    assert (math.isnan(got) and math.isnan(ref)) or abs(got - ref) <= 1e-12


def test_spearman_errors():
    with pytest.raises(ValueError):
        spearman([1.0], [2.0])
    with pytest.raises(ValueError):
        spearman([1.0, 2.0], [1.0])


def test_zero_episodes_keeps_initial_quality():
    res = run_simulation(SyntheticScenario(**dict(SMALL, n_episodes=0)))
    assert {i: n.quality for i, n in res.graph.nodes.items()} == res.initial_quality
    assert len(res.rows) == 1 and res.rows[0][0] == 0
    assert res.graph.episode_counter == 0


def test_run_is_reproducible():
    a = run_simulation(SyntheticScenario(**SMALL)).to_csv()
    b = run_simulation(SyntheticScenario(**SMALL)).to_csv()
    assert a == b
    lines = a.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == SMALL["n_episodes"] + 2
    assert run_simulation(SyntheticScenario(**dict(SMALL, rng_seed=1))).to_csv() != a


def test_qualities_stay_bounded():
    res = run_simulation(SyntheticScenario(**dict(SMALL, initial_quality="erv")))
    assert all(0.0 <= n.quality <= 1.0 for n in res.graph.nodes.values())
    assert res.graph.episode_counter == SMALL["n_episodes"]


@pytest.mark.parametrize("override, needle", [
    ({"p_correct_base": 1.5}, "p_correct_base"),
    ({"n_good": 1, "n_bad": 0}, "at least 2"),
    ({"n_episodes": -1}, "n_episodes"),
    ({"initial_quality": "random"}, "initial_quality"),
])
def test_invalid_scenarios(override, needle):
    with pytest.raises(ValueError, match=needle):
        run_simulation(SyntheticScenario(**override))


def test_unknown_scenario_key():
    with pytest.raises(ValueError, match="unknown scenario keys: colour"):
        SyntheticScenario.from_dict({"colour": "red"})
    assert SyntheticScenario.from_dict({"task_types": ["a"]}).task_types == ("a",)
