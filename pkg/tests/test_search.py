import pytest

from maa_planner.maa_clustering import ClusterMode
from maa_planner.maa_heuristics import HeuristicKind, HeuristicSpec, RevealVariant
from maa_planner.maa_model import evaluate_policy
from maa_planner.maa_search import (BOUND_TOLERANCE, EnumerationGuardError, SearchLimitError,
                                    SolverConfig, SolverMode, brute_force_optimum, pf_maa_star,
                                    policy_count, solve, tr_maa_star)
from maa_planner.maa_tree import ExpansionBudgetError, ProgressMeasure


def upper(r: int = 2, variant: RevealVariant = RevealVariant.AT_R1, **kwargs) -> SolverConfig:
    return SolverConfig(SolverMode.UPPER, heuristic=HeuristicSpec(HeuristicKind.TR, r, variant),
                        **kwargs)


def test_config_validation():
    with pytest.raises(ValueError, match="p_max"):
        SolverConfig(SolverMode.UPPER, p_max=0.1)
    with pytest.raises(ValueError, match="window"):
        SolverConfig(window=0)
    with pytest.raises(ValueError, match="expansion budget"):
        SolverConfig(limit=0)
    with pytest.raises(ValueError, match="p_max"):
        SolverConfig(p_max=1.5)
    assert SolverConfig(window=2).window_for(6) == 2
    assert SolverConfig().window_for(6) == 6
    assert SolverConfig(heuristic=HeuristicSpec(r=4)).r == 4


def test_policy_count(dectiger):
    assert policy_count(dectiger, 2, 2) == 27 ** 2
    assert policy_count(dectiger, 3, 1) == (3 ** 5) ** 2


def test_brute_force(dectiger, identity_pair):
    assert brute_force_optimum(dectiger, 1) == pytest.approx(-2.0)
    assert brute_force_optimum(dectiger, 2) == pytest.approx(-4.0)
    assert brute_force_optimum(identity_pair, 3) == pytest.approx(2.5)
    assert brute_force_optimum(identity_pair, 3, 1, mode=ClusterMode.LOSSLESS) == pytest.approx(2.5)
    with pytest.raises(EnumerationGuardError):
        brute_force_optimum(dectiger, 2, guard=100)


@pytest.mark.parametrize("h, expected", [(1, -2.0), (2, -4.0)])
def test_policy_search_dectiger(dectiger, h, expected):
    result = pf_maa_star(dectiger, h, SolverConfig(window=2))
    assert result.value == pytest.approx(expected)
    assert result.upper_bound is None
    assert not result.hit_limit
    value, _ = evaluate_policy(dectiger, result.best_policy)
    assert value == pytest.approx(result.value)


@pytest.mark.parametrize("h", [1, 2, 3, 4])
def test_policy_search_identity_pair(identity_pair, h):
    result = solve(identity_pair, h, SolverConfig(window=1))
    assert result.value == pytest.approx(0.5 + (h - 1))
    assert result.best_policy.window == 1
    assert result.max_clusters <= 2


def test_policy_search_dectiger_h3(dectiger):
    # two observations cover every history of horizon 3
    config = SolverConfig(window=2, heuristic=HeuristicSpec(HeuristicKind.MDP, 2))
    result = pf_maa_star(dectiger, 3, config)
    assert result.value == pytest.approx(5.1908, abs=1e-3)
    assert result.expansions <= 3 * config.limit


def test_policy_search_dectiger_h4(dectiger):
    config = SolverConfig(window=2, heuristic=HeuristicSpec(HeuristicKind.MDP, 2))
    result = pf_maa_star(dectiger, 4, config)
    value, _ = evaluate_policy(dectiger, result.best_policy)
    assert value == pytest.approx(result.value)
    # at least: listen twice, open on two matching observations, listen
    assert result.value >= 3.1908 - 1e-3
    assert result.value <= 4.8028 + 1e-3
    assert result.expansions <= 4 * config.limit
    assert not result.hit_limit


def test_policy_search_progress_measures(dectiger):
    for measure in ProgressMeasure:
        result = pf_maa_star(dectiger, 3, SolverConfig(window=2, limit=20, progress=measure))
        assert result.value <= 5.1908 + 1e-3
        assert result.expansions <= 3 * 20


def test_policy_search_lossy_pmax(dectiger):
    result = pf_maa_star(dectiger, 3, SolverConfig(window=2, p_max=0.6))
    value, _ = evaluate_policy(dectiger, result.best_policy)
    assert value == pytest.approx(result.value)


def test_policy_search_time_limit(dectiger):
    result = pf_maa_star(dectiger, 4, SolverConfig(window=2, time_limit=1e-9))
    assert result.timed_out
    assert result.hit_limit
    assert result.best_policy is not None
    value, _ = evaluate_policy(dectiger, result.best_policy)
    assert value == pytest.approx(result.value)


def test_policy_search_budget_too_small(dectiger):
    with pytest.raises(ExpansionBudgetError):
        pf_maa_star(dectiger, 3, SolverConfig(window=2, limit=2))


def test_mode_mismatch(dectiger):
    with pytest.raises(ValueError, match="mode 'policy'"):
        pf_maa_star(dectiger, 2, upper())
    with pytest.raises(ValueError, match="mode 'upper'"):
        tr_maa_star(dectiger, 2, SolverConfig())
    with pytest.raises(ValueError, match="cannot represent"):
        tr_maa_star(dectiger, 4, upper(window=2))


@pytest.mark.parametrize("variant", list(RevealVariant))
def test_upper_bound_dectiger(dectiger, variant):
    result = tr_maa_star(dectiger, 2, upper(1, variant))
    assert result.upper_bound == pytest.approx(-4.0)
    assert result.value == pytest.approx(-4.0)
    trace = result.bound_trace
    assert trace[-1] == pytest.approx(-4.0)
    assert all(b <= a + BOUND_TOLERANCE for a, b in zip(trace, trace[1:]))


def test_upper_bound_dectiger_h3(dectiger):
    result = tr_maa_star(dectiger, 3, upper(2))
    assert result.upper_bound == pytest.approx(5.1908, abs=1e-3)
    assert result.value == pytest.approx(result.upper_bound)
    assert result.bound_trace[0] >= result.upper_bound


def test_upper_bound_identity_pair(identity_pair):
    result = solve(identity_pair, 3, upper(2))
    assert result.upper_bound == pytest.approx(2.5)
    assert not result.degraded


def test_upper_bound_with_lower_bound(dectiger):
    result = tr_maa_star(dectiger, 2, upper(1, provided_lower_bound=-4.0))
    assert result.upper_bound == pytest.approx(-4.0)
    assert result.pruned > 0


def test_upper_bound_above_optimum_prunes_everything(dectiger):
    result = tr_maa_star(dectiger, 2, upper(1, provided_lower_bound=1000.0))
    assert result.upper_bound == 1000.0
    assert result.best_policy is None


def test_upper_bound_time_limit(dectiger):
    result = tr_maa_star(dectiger, 4, upper(2, time_limit=1e-9))
    assert result.timed_out
    assert result.upper_bound >= 4.8028
    assert result.upper_bound <= 80.0 + BOUND_TOLERANCE


def test_uncertified_heuristic_still_runs(dectiger):
    config = SolverConfig(SolverMode.UPPER, heuristic=HeuristicSpec(HeuristicKind.MDP, 1))
    result = tr_maa_star(dectiger, 2, config)
    assert result.upper_bound == pytest.approx(-4.0)


def test_search_limit_error_carries_counts():
    err = SearchLimitError("stopped", expansions=5, open_nodes=2, bound=1.5)
    assert (err.expansions, err.open_nodes, err.bound) == (5, 2, 1.5)
