import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maa_planner.maa_clustering import (ClusterMode, check_incremental, cluster_stage, ends_with,
                                        f_extend, initial_clustering, is_suffix_free,
                                        sliding_window_cluster, suffix_beliefs)
from maa_planner.maa_model import initial_occupancy, propagate
from maa_planner.maa_verify import check_incremental_walk, random_clusterings
from tests.conftest import random_model


def first_stage(model, local_actions, window=2, **kwargs):
    "Clustering at stage 1 after both agents play `local_actions`."
    prev = initial_clustering(model.n_agents, window)
    action = model.joint_action(local_actions)
    _, candidates = propagate(model, initial_occupancy(model), lambda key: action,
                              prev.candidate)
    following, merged = cluster_stage(model, candidates, prev, window, **kwargs)
    return prev, following, merged


def test_sliding_window_cluster():
    assert sliding_window_cluster([0, 1, 1], 2) == (1, 1)
    assert sliding_window_cluster([0, 1, 1], 5) == (0, 1, 1)
    assert sliding_window_cluster([], 3) == ()
    with pytest.raises(ValueError):
        sliding_window_cluster([0], 0)


def test_ends_with():
    assert ends_with((0, 1), (1,))
    assert ends_with((0, 1), ())
    assert not ends_with((1,), (0, 1))


def test_is_suffix_free():
    assert is_suffix_free([(0,), (1,)])
    assert is_suffix_free([()])
    assert not is_suffix_free([(1,), (0, 1)])


def test_initial_clustering():
    clustering = initial_clustering(2, 3)
    assert clustering.clusters == (((),), ((),))
    assert clustering.reachable(1) == ((),)
    assert clustering.window_length == 0
    assert clustering.probability(0, ()) == 1.0


def test_f_extend():
    extended = f_extend(initial_clustering(2, 2), (2, 3))
    assert extended[0] == {(0,): (((), 0),), (1,): (((), 1),)}
    assert list(extended[1]) == [(0,), (1,), (2,)]


def test_listen_keeps_observations_apart(dectiger):
    _, following, merged = first_stage(dectiger, (0, 0))
    assert following.clusters == (((0,), (1,)), ((0,), (1,)))
    assert following.probability(0, (0,)) == pytest.approx(0.5)
    assert len(merged) == 4
    merged.check()


def test_listen_beliefs_differ(dectiger):
    prev = initial_clustering(2, 2)
    listen = dectiger.joint_action((0, 0))
    _, candidates = propagate(dectiger, initial_occupancy(dectiger), lambda key: listen,
                              prev.candidate)
    beliefs = suffix_beliefs(candidates, 0, [(0,), (1,)], 2, dectiger.n_states)
    # one observation so far, whatever the window
    assert beliefs.window_length == 1
    assert beliefs.mass(()) == pytest.approx(1.0)
    heard_left = beliefs.distribution((0,))
    # agent 1 heard left too and the tiger is on the left
    assert heard_left[((0,),)][0] == pytest.approx(0.7225)
    assert not np.allclose(beliefs.belief((0,)), beliefs.belief((1,)))


def test_opening_merges_everything(dectiger):
    prev, following, merged = first_stage(dectiger, (1, 1))
    assert following.clusters == (((),), ((),))
    assert list(merged.entries) == [((), ())]
    np.testing.assert_allclose(merged.entries[((), ())], [0.5, 0.5])
    assert check_incremental(prev, following, dectiger.observation_counts) == []


def test_opening_without_merging(dectiger):
    _, following, _ = first_stage(dectiger, (1, 1), mode=ClusterMode.NONE)
    assert following.clusters == (((0,), (1,)), ((0,), (1,)))


def test_possible_mode_keeps_reachable_windows(dectiger):
    _, following, _ = first_stage(dectiger, (1, 1), mode=ClusterMode.POSSIBLE)
    assert following.clusters == (((0,), (1,)), ((0,), (1,)))


def test_pmax_merges_unlikely_windows(dectiger):
    prev, following, merged = first_stage(dectiger, (0, 0))
    listen = dectiger.joint_action((0, 0))
    _, candidates = propagate(dectiger, merged, lambda key: listen, following.candidate)
    exact, _ = cluster_stage(dectiger, candidates, following, 2)
    assert sorted(exact.clusters[0]) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    lossy, _ = cluster_stage(dectiger, candidates, following, 2, p_max=0.6)
    assert lossy.clusters == (((0,), (1,)), ((0,), (1,)))
    assert check_incremental(following, lossy, dectiger.observation_counts) == []


def test_identity_pair_unreachable_windows(identity_pair):
    _, following, merged = first_stage(identity_pair, (0, 0))
    # both agents see the same thing, so each agent's window still tells the state
    assert following.clusters == (((0,), (1,)), ((0,), (1,)))
    assert set(merged.entries) == {((0,), (0,)), ((1,), (1,))}


def test_stage_mismatch(dectiger):
    prev = initial_clustering(2, 2)
    with pytest.raises(ValueError, match="does not follow"):
        cluster_stage(dectiger, initial_occupancy(dectiger), prev, 2)
    with pytest.raises(ValueError, match="window size"):
        cluster_stage(dectiger, initial_occupancy(dectiger), None, 0)


def test_check_incremental_flags_gaps():
    prev = initial_clustering(1, 2)
    broken = type(prev)(1, 2, (((0,),),), ({(0,): 1.0},))
    problems = check_incremental(prev, broken, (2,))
    assert len(problems) == 1
    assert "+ 1 lands in 0 clusters" in problems[0]


def test_shuffled_candidates_give_same_clusters(dectiger):
    for prev, following, shuffled in random_clusterings(dectiger, 4, 2, seed=5):
        assert check_incremental(prev, following, dectiger.observation_counts) == []
        for agent in range(2):
            assert set(following.clusters[agent]) == set(shuffled.clusters[agent])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(0, 100))
def test_clusterings_are_incremental(model_seed, window, walk_seed):
    model = random_model(model_seed)
    ok, detail = check_incremental_walk(model, 4, window, walk_seed)
    assert ok, detail


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(0, 100),
       st.sampled_from(list(ClusterMode)))
def test_merged_occupancy_keeps_mass(model_seed, window, walk_seed, mode):
    model = random_model(model_seed)
    for prev, following, _ in random_clusterings(model, 3, window, walk_seed, mode=mode):
        for agent in range(model.n_agents):
            assert is_suffix_free(following.clusters[agent])
            total = sum(following.probability(agent, c) for c in following.clusters[agent])
            assert total == pytest.approx(1.0)
            assert following.max_clusters() <= 2 ** min(following.stage, window)


def test_rng_only_reorders(dectiger):
    prev = initial_clustering(2, 2)
    listen = dectiger.joint_action((0, 0))
    _, candidates = propagate(dectiger, initial_occupancy(dectiger), lambda key: listen,
                              prev.candidate)
    plain, _ = cluster_stage(dectiger, candidates, prev, 2)
    shuffled, _ = cluster_stage(dectiger, candidates, prev, 2, rng=np.random.default_rng(7))
    assert plain.clusters == shuffled.clusters


def test_suffix_beliefs_window_is_capped(dectiger):
    prev, following, merged = first_stage(dectiger, (0, 0), window=1)
    listen = dectiger.joint_action((0, 0))
    _, candidates = propagate(dectiger, merged, lambda key: listen, following.candidate)
    windows = list(f_extend(following, dectiger.observation_counts)[0])
    assert suffix_beliefs(candidates, 0, windows, 1, dectiger.n_states).window_length == 1
    with pytest.raises(ValueError, match="not a candidate"):
        suffix_beliefs(candidates, 0, windows[:1], 1, dectiger.n_states)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_raising_pmax_never_adds_clusters(model_seed, first, second):
    model = random_model(model_seed)
    _, following, merged = first_stage(model, (0, 1), window=3)
    action = model.joint_action((1, 0))
    _, candidates = propagate(model, merged, lambda key: action, following.candidate)
    exact, _ = cluster_stage(model, candidates, following, 3)
    low, _ = cluster_stage(model, candidates, following, 3, p_max=min(first, second))
    high, _ = cluster_stage(model, candidates, following, 3, p_max=max(first, second))
    for agent in range(model.n_agents):
        assert len(high.clusters[agent]) <= len(low.clusters[agent])
        assert len(low.clusters[agent]) <= len(exact.clusters[agent])
