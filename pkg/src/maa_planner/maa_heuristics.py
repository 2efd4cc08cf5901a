"""
Upper bounds on the value of partial policies

Every bound reveals the joint cluster at the frontier stage and solves the
rest as a smaller problem. Long tails are cut after `r` stages and closed
with a terminal reward: r_max per stage, the fully observable MDP value, or
the value of a problem in which the state is revealed every `r` stages.
"""
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np

from maa_planner.maa_clustering import ClusterMode
from maa_planner.maa_model import DecPomdp, OccupancyTable, Suffix, mdp_action_values, mdp_value
from maa_planner.maa_tree import (MemoryBudgetExceeded, MemoryGuard, OpenQueue, PartialPolicy,
                                  SearchNode, SmallStepTree, TerminalRewardTable)

log = logging.getLogger(__name__)

DEFAULT_ABORT_CAP = 200
_BELIEF_DIGITS = 12


class HeuristicKind(Enum):
    "Terminal reward closing the reduced horizon"
    MAXR = "maxr"
    MDP = "mdp"
    TR = "tr"


class RevealVariant(Enum):
    "When the state is revealed in a terminal-reward bound"
    AT_R = "at_r"
    AT_R1 = "at_r1"


@dataclass(frozen=True)
class HeuristicSpec:
    """Heuristic family, reduction horizon r and sub-search abort cap M.

    abort_cap None lets every sub-search run to completion.
    """
    kind: HeuristicKind = HeuristicKind.MDP
    r: int = 2
    variant: RevealVariant = RevealVariant.AT_R1
    abort_cap: int | None = DEFAULT_ABORT_CAP

    def __post_init__(self):
        if self.r < 1:
            raise ValueError(f"reduction horizon must be at least 1, got {self.r}")
        if self.abort_cap is not None and self.abort_cap < 1:
            raise ValueError(f"abort cap must be at least 1, got {self.abort_cap}")

    def __str__(self):
        if self.kind is HeuristicKind.TR:
            return f"tr(r={self.r}, {self.variant.value})"
        return f"{self.kind.value}(r={self.r})"

    @property
    def certifies(self) -> bool:
        "Bounds from this heuristic are reported as upper bounds."
        return self.kind is HeuristicKind.TR


def maxr_terminal(model: DecPomdp, tail_h: int) -> TerminalRewardTable:
    if tail_h < 0:
        raise ValueError(f"tail horizon must be non-negative, got {tail_h}")
    return TerminalRewardTable(np.full(model.n_states, tail_h * model.r_max), tail_h,
                               ("maxr", tail_h))


def mdp_terminal(model: DecPomdp, tail_h: int) -> TerminalRewardTable:
    if tail_h < 0:
        raise ValueError(f"tail horizon must be non-negative, got {tail_h}")
    return TerminalRewardTable(mdp_value(model, tail_h)[tail_h], tail_h, ("mdp", tail_h))


class RevealStateTable(TerminalRewardTable):
    """State revealed at the start of the tail.

    Values are filled on demand by bounded searches from each state.
    """

    def __init__(self, evaluator: "HeuristicEvaluator", tail: int) -> None:
        self._bound = evaluator.mdp[tail]
        super().__init__(self._bound, tail,
                         ("tr", RevealVariant.AT_R.value, evaluator.spec.r, tail))
        self._evaluator = evaluator
        self._known = np.zeros(len(self._bound), dtype=bool)

    def state_values(self, mask: np.ndarray | None = None) -> np.ndarray:
        todo = ~self._known if mask is None else mask & ~self._known
        for state in np.flatnonzero(todo):
            found = self._evaluator.point_value(int(state), None, self.tail, RevealVariant.AT_R)
            self._values[state] = min(self._bound[state], found)
            self._known[state] = True
        return self._values

    def state_bound(self) -> np.ndarray:
        return self._bound


class RevealActionTable(TerminalRewardTable):
    """State revealed one stage into the tail, after a joint action that
    cannot depend on it.

    q(s, a) bounds the tail from state s when joint action a comes first;
    a joint cluster with occupancy m is worth max_a sum_s m(s) q(s, a).
    """
    per_state = False

    def __init__(self, evaluator: "HeuristicEvaluator", tail: int) -> None:
        model = evaluator.model
        super().__init__(evaluator.mdp[tail], tail,
                         ("tr", RevealVariant.AT_R1.value, evaluator.spec.r, tail))
        self._evaluator = evaluator
        self._upper = mdp_action_values(model, evaluator.mdp[tail - 1])
        self._q = self._upper.copy()
        self._known = np.zeros(self._q.shape, dtype=bool)

    def _fill(self, states: np.ndarray, action: int):
        for state in states:
            if not self._known[state, action]:
                found = self._evaluator.point_value(int(state), action, self.tail,
                                                    RevealVariant.AT_R1)
                self._q[state, action] = min(self._upper[state, action], found)
                self._known[state, action] = True

    def best(self, mass: np.ndarray) -> float:
        "max_a sum_s mass(s) q(s, a), evaluating actions in order of their MDP bound."
        support = np.flatnonzero(mass > 0)
        optimistic = mass @ self._upper
        best = -math.inf
        for action in np.argsort(-optimistic, kind="stable"):
            if optimistic[action] <= best:
                break
            self._fill(support, int(action))
            best = max(best, float(mass @ self._q[:, action]))
        return best

    def q_values(self) -> np.ndarray:
        "The full table, every entry evaluated."
        everything = np.arange(self._q.shape[0])
        for action in range(self._q.shape[1]):
            self._fill(everything, action)
        return self._q.copy()

    def value(self, occupancy: OccupancyTable) -> float:
        return sum((self.best(mass) for _, mass in occupancy.items()), 0.0)


class RevealClusterTable(TerminalRewardTable):
    """Joint clusters revealed after the last stage, each closed by the
    heuristic's own bound on the remaining `tail` stages."""
    per_state = False

    def __init__(self, evaluator: "HeuristicEvaluator", tail: int) -> None:
        r = evaluator.spec.r
        if tail <= r:
            bound = evaluator.mdp[tail]
        else:
            bound = evaluator.terminal(tail - r).state_bound()
            for _ in range(r):
                bound = mdp_action_values(evaluator.model, bound).max(axis=1)
        super().__init__(bound, tail, ("cluster", evaluator.spec.kind.value, r, tail))
        self._evaluator = evaluator

    def value(self, occupancy: OccupancyTable) -> float:
        total = 0.0
        for _, mass in occupancy.items():
            p = float(mass.sum())
            if p > 0:
                total += p * self._evaluator.tail_value(mass / p, None, self.tail)
        return total


def _best_first(tree: SmallStepTree, start: PartialPolicy, abort_cap: int | None,
                guard: MemoryGuard | None = None) -> float:
    "Best completion value of `start` in `tree`, or the priority of the `abort_cap`-th pop."
    queue = OpenQueue()
    queue.push(SearchNode(start, ((0, tree.optimistic_value(start)),)))
    pops = 0
    while queue:
        node = queue.pop()
        pops += 1
        if node.policy.is_complete:
            return node.policy.value
        if abort_cap is not None and pops >= abort_cap:
            return node.priority
        if guard is not None:
            guard.check(len(queue) + 1, node.policy)
        for child in tree.children(node.policy):
            queue.push(SearchNode(child, ((0, tree.optimistic_value(child)),)))
    raise RuntimeError("sub-search ran out of nodes")


def solve_heuristic(model: DecPomdp, belief: np.ndarray, fixed: Sequence[int | None] | None,
                    horizon: int, terminal: TerminalRewardTable,
                    abort_cap: int | None = DEFAULT_ABORT_CAP, *,
                    guard: MemoryGuard | None = None) -> float:
    """Upper bound on a small problem from `belief`, stage-0 actions of some
    agents forced by `fixed` and `terminal` after `horizon` stages.

    Exact when the search ends by itself; after `abort_cap` pops it returns
    the priority of the last popped node.
    """
    if horizon == 0:
        return terminal.value(OccupancyTable(0, {((),) * model.n_agents: belief}))
    mode = ClusterMode.LOSSLESS if terminal.per_state else ClusterMode.POSSIBLE
    tree = SmallStepTree(model, horizon, horizon, mode=mode, terminal=terminal, fixed=fixed,
                         belief=belief)
    root = tree.root()
    if horizon == 1:
        return tree.best_completion(root).value
    return _best_first(tree, root, abort_cap, guard)


class HeuristicEvaluator:
    """Heuristic values for the nodes of one search, with the caches that
    outlive single nodes: sub-search results and terminal tables."""

    def __init__(self, model: DecPomdp, horizon: int, spec: HeuristicSpec, *,
                 memory_limit: int | None = None) -> None:
        self.model = model
        self.horizon = horizon
        self.spec = spec
        self.mdp = mdp_value(model, horizon)
        self.guard = MemoryGuard(memory_limit)
        self.degraded = False
        self.sub_searches = 0
        self._zero = TerminalRewardTable.zero(model.n_states)
        self._tables: dict[tuple, TerminalRewardTable] = {}
        self._solved: dict[tuple, float] = {}
        self._trees: dict[tuple, SmallStepTree] = {}

    def __str__(self):
        return (f"<HeuristicEvaluator {self.spec} h={self.horizon} cached={len(self._solved)} "
                f"tables={len(self._tables)}>")

    def terminal(self, tail: int) -> TerminalRewardTable:
        "Table closing a reduced horizon that leaves `tail` stages out."
        if tail <= 0:
            return self._zero
        match self.spec.kind:
            case HeuristicKind.MAXR:
                key = ("maxr", tail)
                if key not in self._tables:
                    self._tables[key] = maxr_terminal(self.model, tail)
                return self._tables[key]
            case HeuristicKind.MDP:
                key = ("mdp", tail)
                if key not in self._tables:
                    self._tables[key] = TerminalRewardTable(self.mdp[tail], tail, key)
                return self._tables[key]
            case HeuristicKind.TR:
                return self.tr_table(tail, self.spec.variant)

    def tr_table(self, tail: int, variant: RevealVariant) -> TerminalRewardTable:
        if tail < 1:
            raise ValueError(f"tail horizon must be at least 1, got {tail}")
        key = ("tr", variant, tail)
        if key not in self._tables:
            if variant is RevealVariant.AT_R:
                self._tables[key] = RevealStateTable(self, tail)
            else:
                self._tables[key] = RevealActionTable(self, tail)
        return self._tables[key]

    def solve(self, belief: np.ndarray, fixed: tuple[int | None, ...] | None, horizon: int,
              terminal: TerminalRewardTable, guard: MemoryGuard | None = None) -> float:
        if fixed is not None and all(a is None for a in fixed):
            fixed = None
        key = (np.round(belief, _BELIEF_DIGITS).tobytes(), fixed, horizon, terminal.key)
        if key not in self._solved:
            self.sub_searches += 1
            self._solved[key] = solve_heuristic(self.model, belief, fixed, horizon, terminal,
                                                self.spec.abort_cap, guard=guard)
        return self._solved[key]

    def tail_value(self, belief: np.ndarray, fixed: tuple[int | None, ...] | None,
                   tail: int) -> float:
        "Bound on `tail` stages from a revealed joint cluster with belief `belief`."
        if tail <= 0:
            return 0.0
        r = self.spec.r
        if tail <= r:
            return self.solve(belief, fixed, tail, self._zero)
        return self.solve(belief, fixed, r, self.terminal(tail - r))

    def point_value(self, state: int, action: int | None, tail: int,
                    variant: RevealVariant) -> float:
        """Bound on `tail` stages from a known state, first joint action
        forced when given. Returns inf when the search runs out of memory."""
        r = self.spec.r
        fixed = None if action is None else self.model.local_actions(action)
        terminal = self._zero if tail <= r else self.tr_table(tail - r, variant)
        try:
            return self.solve(self.model.point_belief(state), fixed, min(r, tail), terminal,
                              guard=self.guard)
        except MemoryBudgetExceeded as e:
            if not self.degraded:
                log.warning("terminal reward falls back to the MDP bound: %s", e)
            self.degraded = True
            return math.inf

    def _reveal(self, occupancy: OccupancyTable, maps: Sequence[dict[Suffix, int]],
                tail: int) -> float:
        total = occupancy.accumulated_reward
        for key, mass in occupancy.items():
            p = float(mass.sum())
            if p <= 0:
                continue
            fixed = tuple(maps[i].get(c) for i, c in enumerate(key))
            total += p * self.tail_value(mass / p, fixed, tail)
        return total

    def reveal_depth(self, policy: PartialPolicy, frontier: int = 0) -> int:
        """Stage whose joint clusters are revealed: at least 1, never before
        the policy's own stage, and no earlier than `frontier`."""
        return min(self.horizon, max(1, policy.stage, frontier))

    def depths(self, policy: PartialPolicy, frontier: int = 0) -> list[int]:
        "Reveal depths a new node is evaluated at."
        return sorted({policy.stage, self.reveal_depth(policy, frontier)})

    def extension_tree(self, tree: SmallStepTree, depth: int) -> SmallStepTree:
        "`tree` cut at `depth`, its last joint clusters closed by the heuristic."
        key = (depth, tree.horizon, tree.window, tree.mode, tree.p_max)
        if key not in self._trees:
            tail = tree.horizon - depth
            table = self._tables.get(("cluster", tail), self._zero if tail == 0 else None)
            if table is None:
                table = self._tables[("cluster", tail)] = RevealClusterTable(self, tail)
            self._trees[key] = SmallStepTree(self.model, depth, tree.window, mode=tree.mode,
                                             p_max=tree.p_max, terminal=table)
        return self._trees[key]

    def heuristic_value(self, tree: SmallStepTree, policy: PartialPolicy,
                        depth: int | None = None) -> float:
        """Bound on every completion of `policy`, revealing the joint
        clusters of stage `depth`.

        Stages between the policy's frontier and `depth` are searched best
        first, with the sub-search abort cap.
        """
        if policy.is_complete:
            return policy.value
        if depth is None:
            depth = self.reveal_depth(policy)
        if depth < policy.stage:
            raise ValueError(f"reveal depth {depth} is before stage {policy.stage}")
        if depth == policy.stage:
            return self._reveal(policy.occupancy, tree.stage_maps(policy), tree.horizon - depth)
        self.sub_searches += 1
        return _best_first(self.extension_tree(tree, depth), policy, self.spec.abort_cap)


def tr_terminal(model: DecPomdp, r: int, tail_h: int, variant: RevealVariant, *,
                abort_cap: int | None = DEFAULT_ABORT_CAP,
                evaluator: HeuristicEvaluator | None = None) -> TerminalRewardTable:
    if evaluator is None:
        spec = HeuristicSpec(HeuristicKind.TR, r, variant, abort_cap)
        evaluator = HeuristicEvaluator(model, tail_h, spec)
    return evaluator.tr_table(tail_h, variant)
