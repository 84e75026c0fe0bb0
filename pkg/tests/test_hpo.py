import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrqa.hpo import (
    DEFAULT_SPACE,
    ParamSpec,
    PopulationMember,
    SearchSpace,
    SurrogateTrainable,
    explore,
    pbt_search,
    pbt_step,
    sample_space,
    surrogate_factory,
)


def test_param_spec_validation():
    with pytest.raises(ValueError):
        ParamSpec("lr", "log_uniform", 0.0, 1.0)
    with pytest.raises(ValueError):
        ParamSpec("x", "uniform", 2.0, 1.0)
    with pytest.raises(ValueError):
        ParamSpec("c", "categorical")
    with pytest.raises(ValueError):
        ParamSpec("c", "gaussian", 0, 1)


def test_space_dict_round_trip():
    assert SearchSpace.from_dict(DEFAULT_SPACE.to_dict()) == DEFAULT_SPACE
    assert DEFAULT_SPACE.names() == ["learning_rate", "dropout", "warmup_fraction", "batch_size"]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_samples_and_explored_values_stay_in_bounds(seed):
    rng = np.random.default_rng(seed)
    hp = sample_space(DEFAULT_SPACE, rng)
    for _ in range(5):
        hp = explore(hp, DEFAULT_SPACE, rng)
        assert 1e-5 <= hp["learning_rate"] <= 1e-4
        assert 0 <= hp["dropout"] <= 0.3 and 0 <= hp["warmup_fraction"] <= 0.2
        assert hp["batch_size"] in (4, 8, 16)


def test_explore_perturbs_by_factor_or_neighbour():
    space = SearchSpace((ParamSpec("lr", "log_uniform", 1e-6, 1.0), ParamSpec("b", "categorical", choices=(4, 8, 16))))
    rng = np.random.default_rng(0)
    for _ in range(50):
        out = explore({"lr": 1e-3, "b": 8}, space, rng, resample_prob=0.0)
        assert out["lr"] in (pytest.approx(8e-4), pytest.approx(1.25e-3))
        assert out["b"] in (4, 16)


def scored(scores):
    return [PopulationMember(i, {"learning_rate": 1e-5 * (i + 1)}, snapshot={"w": i}, score=s)
            for i, s in enumerate(scores)]


def test_pbt_step_replaces_bottom_quantile():
    pop = scored([0.1, 0.9, 0.5, 0.3, 0.8, 0.2, 0.7, 0.4])
    pbt_step(pop, DEFAULT_SPACE, np.random.default_rng(0))
    # floor(0.25 * 8) = 2 weakest (members 0 and 5) copy from the 2 strongest (1 and 4)
    for m in pop:
        if m.member_id in (0, 5):
            assert m.snapshot["w"] in (1, 4)
            assert m.lineage[0][1].startswith("exploited-from(") and m.lineage[1][1] == "explored"
        else:
            assert m.snapshot["w"] == m.member_id and m.lineage == [(0, "kept")]


def test_pbt_step_guards():
    with pytest.raises(ValueError):
        pbt_step(scored([0.5]), DEFAULT_SPACE, np.random.default_rng(0))
    pop = scored([0.5, 0.2])
    pop[1].score = None
    with pytest.raises(ValueError):
        pbt_step(pop, DEFAULT_SPACE, np.random.default_rng(0))


def test_pbt_step_small_population_uses_one_slot():
    pop = scored([0.2, 0.6, 0.4])
    pbt_step(pop, DEFAULT_SPACE, np.random.default_rng(1))
    assert pop[0].snapshot == {"w": 1}


def test_surrogate_peak():
    t = SurrogateTrainable({"learning_rate": 3e-5})
    assert t.evaluate() == 1.0
    t.set_hyperparameters({"learning_rate": 3e-4})
    assert t.evaluate() == pytest.approx(1 - math.log(10) ** 2 / 10)


@pytest.mark.parametrize("seed", range(5))
def test_surrogate_search_converges(seed):
    res = pbt_search(surrogate_factory(), DEFAULT_SPACE, population_size=8, generations=10, seed=seed)
    ratio = res.best_hyperparameters["learning_rate"] / 3e-5
    assert 1 / 1.5 <= ratio <= 1.5
    assert all(a <= b for a, b in zip(res.best_so_far, res.best_so_far[1:]))
    assert len(res.history) == 80
    assert res.best_score == max(r["score"] for r in res.history)


def test_search_is_reproducible_and_parallel_safe():
    a = pbt_search(surrogate_factory(), DEFAULT_SPACE, population_size=6, generations=4, seed=3)
    b = pbt_search(surrogate_factory(), DEFAULT_SPACE, population_size=6, generations=4, seed=3, jobs=3)
    assert a.history == b.history and a.to_json() == b.to_json()


def test_population_of_one_is_a_plain_run():
    res = pbt_search(surrogate_factory(), DEFAULT_SPACE, population_size=1, generations=3, seed=0)
    assert [r["hyperparameters"] for r in res.history] == [res.history[0]["hyperparameters"]] * 3
    assert res.lineages[0] == [(0, "kept"), (1, "kept"), (2, "kept")]


def test_initial_members_are_honoured_and_outputs_serialize():
    start = {"learning_rate": 3e-5, "dropout": 0.1, "warmup_fraction": 0.1, "batch_size": 4}
    res = pbt_search(surrogate_factory(), DEFAULT_SPACE, population_size=4, generations=2, seed=0, initial=[start])
    assert res.history[0]["hyperparameters"] == start and res.history[0]["score"] == 1.0
    assert res.history_csv().splitlines()[0] == "generation,member,score,tiebreak,batch_size,dropout,learning_rate,warmup_fraction"
    assert json.loads(res.to_json())["best_score"] == 1.0


def test_failing_member_is_named():
    class Broken(SurrogateTrainable):
        def train(self, steps):
            raise RuntimeError("boom")

    with pytest.raises(RuntimeError, match="member 0 failed: boom"):
        pbt_search(lambda hp, seed: Broken(hp), DEFAULT_SPACE, population_size=2, generations=1)


# ---------------------------------------------------------------- documented examples


def test_degenerate_bounds_sample_the_bound():
    spec = ParamSpec("x", "uniform", 0.25, 0.25)
    assert {spec.sample(np.random.default_rng(s)) for s in range(5)} == {0.25}
    assert ParamSpec("lr", "log_uniform", 3e-5, 3e-5).sample(np.random.default_rng(0)) == pytest.approx(3e-5)


def test_log_uniform_median_is_geometric_midpoint():
    spec = DEFAULT_SPACE.params[0]
    rng = np.random.default_rng(0)
    values = [spec.sample(rng) for _ in range(10_000)]
    assert 2.8e-5 <= float(np.median(values)) <= 3.6e-5


def test_same_seed_same_sample():
    assert sample_space(DEFAULT_SPACE, np.random.default_rng(9)) == sample_space(DEFAULT_SPACE, np.random.default_rng(9))


def test_population_of_four_exploits_only_the_weakest():
    pop = scored([0.9, 0.8, 0.2, 0.1])
    before = [dict(m.hyperparameters) for m in pop]
    pbt_step(pop, DEFAULT_SPACE, np.random.default_rng(5))
    assert [m.hyperparameters for m in pop[:3]] == before[:3]
    assert pop[3].lineage[0] == (0, "exploited-from(0)")
    assert [m.lineage for m in pop[:3]] == [[(0, "kept")]] * 3


def test_exploit_copies_snapshot_bitwise_and_independently():
    weights = np.random.default_rng(1).standard_normal(6)
    pop = [PopulationMember(0, {"learning_rate": 2e-5}, {"w": weights.copy()}, 0.9),
           PopulationMember(1, {"learning_rate": 5e-5}, {"w": np.zeros(6)}, 0.1)]
    pbt_step(pop, DEFAULT_SPACE, np.random.default_rng(0))
    assert pop[1].snapshot["w"].tobytes() == weights.tobytes()
    pop[1].snapshot["w"][0] += 1
    assert pop[0].snapshot["w"].tobytes() == weights.tobytes()
