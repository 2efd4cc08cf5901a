import numpy as np
import pytest

from maa_planner.maa_clustering import ClusterMode
from maa_planner.maa_model import evaluate_policy
from maa_planner.maa_tree import (ExpansionBudgetError, MemoryBudgetExceeded, MemoryGuard,
                                  OpenQueue, ProgressMeasure, SearchNode, SmallStepTree,
                                  TerminalRewardTable, extends, merge_heuristics, prog_formula)


def test_prog_formula():
    assert prog_formula(1, 0, 0, 0.0, 1000, 2, 2) == 1000
    assert prog_formula(0, 1, 1, 0.5, 1000, 2, 2) == pytest.approx(500 + 1 + 0.5 * 498)
    with pytest.raises(ExpansionBudgetError):
        prog_formula(0, 0, 0, 0.0, 10, 2, 6)


def test_merge_heuristics():
    stored = ((0, 5.0),)
    assert merge_heuristics(stored, 0, 3.0) == ((0, 3.0),)
    assert merge_heuristics(stored, 0, 8.0) == ((0, 5.0),)
    assert merge_heuristics(stored, 1, 7.0) == ((0, 5.0), (1, 7.0))
    assert merge_heuristics(((1, 7.0),), 0, 9.0) == ((0, 9.0), (1, 7.0))
    node = SearchNode(None, ((0, 5.0), (1, 7.0)))
    assert node.priority == 5.0
    assert node.depth == 1


def test_open_queue_order():
    queue = OpenQueue()
    low = SearchNode("low", ((0, 1.0),))
    first = SearchNode("first", ((0, 4.0),))
    second = SearchNode("second", ((0, 4.0),))
    for node in (low, first, second):
        queue.push(node)
    assert len(queue) == 3
    assert queue.peek() is second
    assert [queue.pop().policy for _ in range(3)] == ["second", "first", "low"]
    assert queue.peek() is None


def test_memory_guard(dectiger):
    root = SmallStepTree(dectiger, 2, 2).root()
    assert not MemoryGuard(None).exceeded(10**9, root)
    assert not MemoryGuard(2**30).exceeded(1, root)
    with pytest.raises(MemoryBudgetExceeded):
        MemoryGuard(1).check(1, root)


def test_root(dectiger):
    tree = SmallStepTree(dectiger, 3, 2)
    root = tree.root()
    assert (root.stage, root.agent, root.index) == (0, 0, 0)
    assert not root.is_complete
    assert tree.next_cluster(root) == (0, 0, ())
    assert len(tree.children(root)) == 3
    assert root.size() == 0


def test_stage_boundary(dectiger):
    tree = SmallStepTree(dectiger, 3, 2)
    policy = tree.extend(tree.extend(tree.root(), 0), 0)
    assert (policy.stage, policy.agent, policy.index) == (1, 0, 0)
    assert policy.clusterings[1].reachable(0) == ((0,), (1,))
    assert policy.accumulated_reward == pytest.approx(-2.0)
    assert extends(policy, tree.root())
    with pytest.raises(ValueError, match="no action 3"):
        tree.extend(policy, 3)


def test_fixed_actions(dectiger):
    tree = SmallStepTree(dectiger, 2, 2, fixed=(None, 2))
    root = tree.root()
    policy = tree.extend(root, 1)
    # agent 1 was forced, so one choice closes stage 0
    assert policy.stage == 1
    assert list(policy.assignments()) == [(0, 0, (), 1), (0, 1, (), 2)]


def test_last_stage_closes_in_one_step(dectiger):
    tree = SmallStepTree(dectiger, 1, 1)
    policy = tree.extend(tree.root(), 0)
    assert tree.can_close(policy)
    [closed] = tree.children(policy)
    assert closed.is_complete
    assert closed.value == pytest.approx(-2.0)


def test_best_completion(dectiger, identity_pair):
    tree = SmallStepTree(dectiger, 2, 2)
    best = tree.best_completion(tree.root())
    assert best.value == pytest.approx(-4.0)
    value, _ = evaluate_policy(dectiger, tree.to_cluster_policy(best))
    assert value == pytest.approx(best.value)
    tree = SmallStepTree(identity_pair, 2, 1)
    assert tree.best_completion(tree.root()).value == pytest.approx(1.5)


def test_optimistic_value(dectiger):
    tree = SmallStepTree(dectiger, 2, 2)
    root = tree.root()
    assert tree.optimistic_value(root) == pytest.approx(18.0)
    for child in tree.children(root):
        assert tree.optimistic_value(child) <= tree.optimistic_value(root) + 1e-9


def test_terminal_reward_is_added(dectiger):
    terminal = TerminalRewardTable(np.array([10.0, 10.0]), 1, ("test", 1))
    tree = SmallStepTree(dectiger, 1, 1, terminal=terminal)
    best = tree.best_completion(tree.root())
    assert best.value == pytest.approx(8.0)


def test_greedy_complete(dectiger):
    tree = SmallStepTree(dectiger, 3, 3)
    policy = tree.greedy_complete(tree.root())
    assert policy.is_complete
    value, _ = evaluate_policy(dectiger, tree.to_cluster_policy(policy))
    assert value == pytest.approx(policy.value)
    assert policy.value <= 5.1908 + 1e-3


def test_budget_too_small(dectiger):
    tree = SmallStepTree(dectiger, 3, 2, budget=2)
    policy = tree.extend(tree.root(), 0)
    with pytest.raises(ExpansionBudgetError, match="budget 2"):
        tree.extend(policy, 0)


def test_progress(dectiger):
    tree = SmallStepTree(dectiger, 3, 2)
    root = tree.root()
    assert tree.prog(root, 1000) == 0.0
    policy = tree.extend(root, 0)
    assert tree.prog(policy, 1000) == pytest.approx(500.0)
    assert tree.prog(policy, 1000, ProgressMeasure.UNIFORM) == pytest.approx(500.0)
    short = SmallStepTree(dectiger, 2, 2)
    complete = short.best_completion(short.root())
    assert short.prog(complete, 1000) == 2000.0


def test_cluster_policy_follows_observations(identity_pair):
    tree = SmallStepTree(identity_pair, 2, 1, mode=ClusterMode.NONE)
    best = tree.best_completion(tree.root())
    policy = tree.to_cluster_policy(best)
    assert set(policy.clusters[1][0]) == {(0,), (1,)}
    assert policy.actions[1][0] == {(0,): 0, (1,): 1}
    assert tree.max_clusters(best) == 2


@pytest.mark.parametrize("window", [1, 2, 3])
def test_children_make_progress(dectiger, window):
    tree = SmallStepTree(dectiger, 3, window)
    frontier = [tree.root()]
    seen = 0
    while frontier and seen < 300:
        policy = frontier.pop()
        seen += 1
        progress = tree.prog(policy, 1000)
        for child in tree.children(policy):
            assert tree.prog(child, 1000) >= progress + 1 - 1e-9
            if not child.is_complete:
                frontier.append(child)
