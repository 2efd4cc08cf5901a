"""
Small-step search tree over clustered partial policies

A partial policy assigns actions to clusters one at a time, following the
expansion order: stage, then agent, then the agent's clusters at that stage
sorted by descending probability.
"""
import heapq
import itertools
import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np

from maa_planner.maa_clustering import (ClusterMode, StageClustering, cluster_stage,
                                        initial_clustering)
from maa_planner.maa_model import (ClusterPolicy, DecPomdp, JointCluster, OccupancyTable,
                                   Suffix, check_horizon, initial_occupancy, propagate)

log = logging.getLogger(__name__)


class ExpansionBudgetError(ValueError):
    "A stage clustering is too large for the per-stage expansion budget."


class MemoryBudgetExceeded(RuntimeError):
    "Estimated memory of the open nodes went over the limit."


class ProgressMeasure(Enum):
    "How far a partial policy is from being fully specified"
    PROG = "prog"
    UNIFORM = "uniform"


class TerminalRewardTable:
    """Per-state reward collected after the last stage of a reduced problem.

    `tail` is the number of stages the table stands for and `key`
    identifies it in memoization caches.
    """
    per_state = True

    def __init__(self, values: np.ndarray, tail: int, key: tuple) -> None:
        self._values = np.array(values, dtype=float)
        self.tail = tail
        self.key = key

    def __str__(self):
        return f"<{self.__class__.__name__} {self.key[0]} tail={self.tail}>"

    @classmethod
    def zero(cls, n_states: int) -> "TerminalRewardTable":
        return cls(np.zeros(n_states), 0, ("zero",))

    def state_values(self, mask: np.ndarray | None = None) -> np.ndarray:
        "Values per state; entries outside `mask` may hold a bound only."
        return self._values

    def state_bound(self) -> np.ndarray:
        "Cheap per-state upper bound on whatever the table returns."
        return self._values

    def value(self, occupancy: OccupancyTable) -> float:
        marginal = occupancy.state_marginal(len(self._values))
        return float(marginal @ self.state_values(marginal > 0))


class PartialPolicy:
    """Actions for a prefix of the expansion order.

    actions[t][i] holds agent i's actions for the first clusters of
    clusterings[t].reachable(i). The frontier is (stage, agent, index).
    `occupancy` belongs to `stage`; once every stage is assigned, stage
    equals the horizon, `occupancy` holds the final windows and `value` is
    the exact value.
    """
    __slots__ = ("stage", "agent", "index", "actions", "clusterings", "occupancy", "value")

    def __init__(self, stage: int, agent: int, index: int,
                 actions: tuple[tuple[tuple[int, ...], ...], ...],
                 clusterings: tuple[StageClustering, ...], occupancy: OccupancyTable,
                 value: float | None = None) -> None:
        self.stage = stage
        self.agent = agent
        self.index = index
        self.actions = actions
        self.clusterings = clusterings
        self.occupancy = occupancy
        self.value = value

    def __str__(self):
        state = f"value={self.value:.6g}" if self.is_complete else \
            f"frontier=({self.stage}, {self.agent}, {self.index})"
        return f"<PartialPolicy ..{hex(id(self))[-5:]} {state}>"

    @property
    def is_complete(self) -> bool:
        return self.value is not None

    @property
    def accumulated_reward(self) -> float:
        return self.occupancy.accumulated_reward

    def assignments(self) -> Iterator[tuple[int, int, Suffix, int]]:
        "Yield (stage, agent, cluster, action) for every assigned cluster."
        for t, stage_actions in enumerate(self.actions):
            for i, agent_actions in enumerate(stage_actions):
                order = self.clusterings[t].reachable(i)
                for cluster, action in zip(order, agent_actions):
                    yield t, i, cluster, action

    def size(self) -> int:
        return sum(len(agent) for stage in self.actions for agent in stage)

    def footprint(self) -> int:
        "Rough number of bytes held by this node."
        entries = sum(vec.nbytes + 64 for vec in self.occupancy.entries.values())
        return entries + 8 * self.size() + 256


def extends(child: PartialPolicy, parent: PartialPolicy) -> bool:
    "True when `child` assigns everything `parent` does, with the same actions."
    return set(parent.assignments()) <= set(child.assignments())


def merge_heuristics(stored: tuple[tuple[int, float], ...], depth: int, value: float
                     ) -> tuple[tuple[int, float], ...]:
    "Keep one value per reveal depth, the smallest seen, sorted by depth."
    values = dict(stored)
    values[depth] = min(values.get(depth, math.inf), value)
    return tuple(sorted(values.items()))


@dataclass(slots=True, eq=False)
class SearchNode:
    policy: PartialPolicy
    heuristics: tuple[tuple[int, float], ...]
    prog: float = 0.0
    counter: int = -1

    @property
    def priority(self) -> float:
        return min(value for _, value in self.heuristics)

    @property
    def depth(self) -> int:
        "Deepest reveal depth evaluated so far."
        return max(depth for depth, _ in self.heuristics)


@dataclass(eq=False)
class OpenQueue:
    "Max-priority queue; among equal priorities the newest node comes first."
    _heap: list[tuple[float, int, SearchNode]] = field(default_factory=list)
    _counter: Iterator[int] = field(default_factory=itertools.count)

    def __len__(self):
        return len(self._heap)

    def push(self, node: SearchNode):
        node.counter = next(self._counter)
        heapq.heappush(self._heap, (-node.priority, -node.counter, node))

    def pop(self) -> SearchNode:
        return heapq.heappop(self._heap)[2]

    def peek(self) -> SearchNode | None:
        return self._heap[0][2] if self._heap else None


class MemoryGuard:
    "Compares the estimated size of the open nodes with a byte limit."

    def __init__(self, limit: int | None) -> None:
        self.limit = limit

    def exceeded(self, open_nodes: int, sample: PartialPolicy) -> bool:
        return self.limit is not None and open_nodes * sample.footprint() > self.limit

    def check(self, open_nodes: int, sample: PartialPolicy):
        if self.exceeded(open_nodes, sample):
            raise MemoryBudgetExceeded(f"{open_nodes} open nodes exceed {self.limit} bytes")


def prog_formula(stage: int, agent: int, assigned: int, mass: float, budget: int,
                 n_agents: int, size: int) -> float:
    "Progress of a partial policy whose frontier is `assigned` clusters into `size`."
    share = budget / n_agents
    if budget < n_agents * size:
        raise ExpansionBudgetError(f"budget {budget} is below {n_agents} agents x {size} clusters")
    return stage * budget + agent * share + assigned + mass * (share - size)


class SmallStepTree:
    """Children and values of partial policies for one (sub)problem.

    `fixed` forces stage-0 actions for some agents, `belief` replaces the
    model's initial belief and `terminal` is added to the value of complete
    policies.
    """

    def __init__(self, model: DecPomdp, horizon: int, window: int, *,
                 mode: ClusterMode = ClusterMode.LOSSLESS, p_max: float | None = None,
                 budget: int | None = None, terminal: TerminalRewardTable | None = None,
                 fixed: Sequence[int | None] | None = None,
                 belief: np.ndarray | None = None) -> None:
        self.model = model
        self.horizon = check_horizon(horizon)
        if window < 1:
            raise ValueError(f"window size must be at least 1, got {window}")
        self.window = window
        self.mode = mode
        self.p_max = p_max
        self.budget = budget
        self.terminal = terminal or TerminalRewardTable.zero(model.n_states)
        self.fixed = tuple(fixed) if fixed is not None else (None,) * model.n_agents
        if len(self.fixed) != model.n_agents:
            raise ValueError(f"{len(self.fixed)} fixed actions for {model.n_agents} agents")
        self.belief = model.initial_belief if belief is None else np.asarray(belief, dtype=float)
        self._strides = tuple(int(np.prod(model.action_counts[i + 1:]))
                              for i in range(model.n_agents))

    def __str__(self):
        return (f"<SmallStepTree ..{hex(id(self))[-5:]} h={self.horizon} k={self.window} "
                f"{self.mode.value} terminal={self.terminal}>")

    def joint_index(self, local: Sequence[int]) -> int:
        return sum(a * s for a, s in zip(local, self._strides))

    @cached_property
    def lookahead(self) -> np.ndarray:
        """(horizon+1, S, JA) optimistic action values; row m has m stages to go.

        The last stage is followed by the terminal table's state bound.
        """
        model = self.model
        values = np.zeros((self.horizon + 1, model.n_states, model.n_joint_actions))
        future = np.asarray(self.terminal.state_bound(), dtype=float)
        for m in range(1, self.horizon + 1):
            values[m] = model.reward + model.transition @ future
            future = values[m].max(axis=1)
        return values

    def root(self) -> PartialPolicy:
        n = self.model.n_agents
        policy = PartialPolicy(0, 0, 0, (((),) * n,), (initial_clustering(n, self.window),),
                               initial_occupancy(self.model, self.belief))
        return self._apply_fixed(policy)

    def _apply_fixed(self, policy: PartialPolicy) -> PartialPolicy:
        while (not policy.is_complete and policy.stage == 0
               and self.fixed[policy.agent] is not None):
            policy = self._assign(policy, self.fixed[policy.agent])
        return policy

    def next_cluster(self, policy: PartialPolicy) -> tuple[int, int, Suffix]:
        "The (stage, agent, cluster) the next extension assigns."
        if policy.is_complete:
            raise ValueError("policy is fully specified")
        order = policy.clusterings[policy.stage].reachable(policy.agent)
        return policy.stage, policy.agent, order[policy.index]

    def action_count(self, policy: PartialPolicy) -> int:
        return self.model.action_counts[policy.agent]

    def extend(self, policy: PartialPolicy, action: int) -> PartialPolicy:
        if policy.is_complete:
            raise ValueError("policy is fully specified")
        if not 0 <= action < self.action_count(policy):
            raise ValueError(f"agent {policy.agent} has no action {action}")
        return self._apply_fixed(self._assign(policy, action))

    def children(self, policy: PartialPolicy) -> list[PartialPolicy]:
        "One child per local action, or the single closed policy at the last step."
        if self.can_close(policy):
            return [self.close_last_stage(policy)]
        return [self.extend(policy, a) for a in range(self.action_count(policy))]

    def _assign(self, policy: PartialPolicy, action: int) -> PartialPolicy:
        u, i = policy.stage, policy.agent
        stage_actions = list(policy.actions[u])
        stage_actions[i] = stage_actions[i] + (action,)
        actions = policy.actions[:u] + (tuple(stage_actions),)
        if policy.index + 1 < len(policy.clusterings[u].reachable(i)):
            return PartialPolicy(u, i, policy.index + 1, actions, policy.clusterings,
                                 policy.occupancy)
        if i + 1 < self.model.n_agents:
            return PartialPolicy(u, i + 1, 0, actions, policy.clusterings, policy.occupancy)
        return self._complete_stage(policy, actions)

    def _complete_stage(self, policy: PartialPolicy,
                        actions: tuple[tuple[tuple[int, ...], ...], ...]) -> PartialPolicy:
        u = policy.stage
        clustering = policy.clusterings[u]
        maps = [dict(zip(clustering.reachable(i), actions[u][i]))
                for i in range(self.model.n_agents)]

        def joint_action(key: JointCluster) -> int:
            return self.joint_index([maps[i].get(c, 0) for i, c in enumerate(key)])

        _, candidates = propagate(self.model, policy.occupancy, joint_action, clustering.candidate)
        if u + 1 == self.horizon:
            value = candidates.accumulated_reward + self.terminal.value(candidates)
            return PartialPolicy(self.horizon, 0, 0, actions, policy.clusterings, candidates, value)
        following, merged = cluster_stage(self.model, candidates, clustering, self.window,
                                          self.p_max, self.mode)
        self._check_budget(following)
        empty = ((),) * self.model.n_agents
        return PartialPolicy(u + 1, 0, 0, actions + (empty,), policy.clusterings + (following,),
                             merged)

    def _check_budget(self, clustering: StageClustering):
        if self.budget is None:
            return
        n = self.model.n_agents
        for i in range(n):
            size = len(clustering.reachable(i))
            if self.budget < n * size:
                raise ExpansionBudgetError(
                    f"stage {clustering.stage}: agent {i} has {size} clusters, budget "
                    f"{self.budget} allows at most {self.budget // n}")

    def stage_maps(self, policy: PartialPolicy) -> list[dict[Suffix, int]]:
        "Cluster to action maps of the frontier stage, assigned clusters only."
        clustering = policy.clusterings[policy.stage]
        return [dict(zip(clustering.reachable(i), policy.actions[policy.stage][i]))
                for i in range(self.model.n_agents)]

    def consistent_joint_actions(self, fixed: Sequence[int | None]) -> list[int]:
        choices = [range(count) if a is None else (a,)
                   for a, count in zip(fixed, self.model.action_counts)]
        return [self.joint_index(local) for local in itertools.product(*choices)]

    def can_close(self, policy: PartialPolicy) -> bool:
        "The last agent's last stage can be assigned in one step."
        return (not policy.is_complete and self.terminal.per_state
                and policy.stage == self.horizon - 1
                and policy.agent == self.model.n_agents - 1)

    def close_last_stage(self, policy: PartialPolicy) -> PartialPolicy:
        """Best actions for the remaining clusters of the last agent.

        Each cluster's choice only moves its own entries, so the argmax of
        reward plus terminal is taken cluster by cluster.
        """
        if not self.can_close(policy):
            raise ValueError(f"{policy} is not at the last agent's last stage")
        model = self.model
        agent = policy.agent
        support = policy.occupancy.state_marginal(model.n_states) > 0
        reachable = model.transition[support].sum(axis=(0, 1)) > 0
        q = model.reward + model.transition @ self.terminal.state_values(reachable)
        maps = self.stage_maps(policy)
        order = policy.clusterings[policy.stage].reachable(agent)
        remaining = order[policy.index:]
        scores = {c: np.zeros(model.action_counts[agent]) for c in remaining}
        for key, mass in policy.occupancy.items():
            if key[agent] not in scores:
                continue
            values = (mass @ q).reshape(model.action_counts)
            scores[key[agent]] += values[tuple(maps[j][key[j]] for j in range(agent))]
        for cluster in remaining:
            policy = self._assign(policy, int(np.argmax(scores[cluster])))
        return policy

    def optimistic_value(self, policy: PartialPolicy) -> float:
        """Realized reward plus an MDP bound per joint cluster.

        Exact for complete policies.
        """
        if policy.is_complete:
            return policy.value
        q = self.lookahead[self.horizon - policy.stage]
        maps = self.stage_maps(policy)
        counts = self.model.action_counts
        total = policy.accumulated_reward
        for key, mass in policy.occupancy.items():
            values = (mass @ q).reshape(counts)
            index = tuple(maps[i].get(c, slice(None)) for i, c in enumerate(key))
            total += float(np.max(values[index]))
        return total

    def greedy_complete(self, policy: PartialPolicy) -> PartialPolicy:
        "Complete a policy picking, cluster by cluster, the action with the best bound."
        counts = self.model.action_counts
        while not policy.is_complete:
            if self.can_close(policy):
                policy = self.close_last_stage(policy)
                continue
            stage, agent, cluster = self.next_cluster(policy)
            q = self.lookahead[self.horizon - stage]
            maps = self.stage_maps(policy)
            scores = np.zeros(counts[agent])
            for key, mass in policy.occupancy.items():
                if key[agent] != cluster:
                    continue
                values = (mass @ q).reshape(counts)
                for action in range(counts[agent]):
                    index = tuple(action if j == agent else maps[j].get(c, slice(None))
                                  for j, c in enumerate(key))
                    scores[action] += float(np.max(values[index]))
            policy = self.extend(policy, int(np.argmax(scores)))
        return policy

    def best_completion(self, policy: PartialPolicy) -> PartialPolicy:
        "Exhaustive search over every completion of `policy`."
        if policy.is_complete:
            return policy
        best = None
        for child in self.children(policy):
            candidate = self.best_completion(child)
            if best is None or candidate.value > best.value:
                best = candidate
        return best

    def prog(self, policy: PartialPolicy, budget: int,
             measure: ProgressMeasure = ProgressMeasure.PROG) -> float:
        if policy.is_complete:
            return float(self.horizon * budget)
        n = self.model.n_agents
        clustering = policy.clusterings[policy.stage]
        order = clustering.reachable(policy.agent)
        if measure is ProgressMeasure.UNIFORM:
            return (policy.stage * budget + policy.agent * budget / n
                    + policy.index * budget / (n * len(order)))
        mass = sum(clustering.probability(policy.agent, c) for c in order[:policy.index])
        return prog_formula(policy.stage, policy.agent, policy.index, mass, budget, n, len(order))

    def to_cluster_policy(self, policy: PartialPolicy) -> ClusterPolicy:
        "Fully specified policy; clusters that cannot be reached act 0."
        if not policy.is_complete:
            raise ValueError(f"{policy} is not fully specified")
        clusters = []
        actions = []
        for clustering, stage_actions in zip(policy.clusterings, policy.actions):
            clusters.append(clustering.clusters)
            per_agent = []
            for i in range(self.model.n_agents):
                table = {c: 0 for c in clustering.clusters[i]}
                table.update(zip(clustering.reachable(i), stage_actions[i]))
                per_agent.append(table)
            actions.append(per_agent)
        return ClusterPolicy(self.window, clusters, actions)

    def max_clusters(self, policy: PartialPolicy) -> int:
        return max(clustering.max_clusters() for clustering in policy.clusterings)
