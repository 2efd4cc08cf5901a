"""
Dec-POMDP model, exact policy evaluation and MDP backward induction
"""
import logging
import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass
from functools import cached_property
from typing import TypedDict

import numpy as np

from maa_planner.maa_serializable import Serializable
from maa_planner.utils import probability_rows_ok, validate_dict

log = logging.getLogger(__name__)

PROBABILITY_TOLERANCE = 1e-9

Suffix = tuple[int, ...]
JointCluster = tuple[Suffix, ...]


class ModelError(ValueError):
    "Model tables violate a Dec-POMDP invariant."


class PolicyError(ValueError):
    "A cluster policy cannot be executed on a model."


def check_horizon(h: int) -> int:
    if isinstance(h, bool) or not isinstance(h, int) or h < 1:
        raise ValueError(f"horizon must be a positive integer, got {h!r}")
    return h


def extend_window(suffix: Suffix, obs: int, window: int) -> Suffix:
    "Append an observation to a window and keep the last `window` entries."
    return (suffix + (obs,))[-window:]


def containing_cluster(clusters: Iterable[Suffix] | frozenset[Suffix],
                       window: Suffix) -> Suffix | None:
    "The cluster whose defining suffix is a suffix of `window`."
    lookup = clusters if isinstance(clusters, (set, frozenset)) else frozenset(clusters)
    for length in range(len(window) + 1):
        candidate = window[len(window) - length:]
        if candidate in lookup:
            return candidate
    return None


@dataclass(frozen=True, eq=False)
class DecPomdp:
    """Finite Dec-POMDP with dense tables.

    transition[s, a, s'], observation[a, s', o] and reward[s, a] are indexed by
    joint actions/observations in row-major order (first agent most
    significant).
    """
    states: tuple[str, ...]
    actions: tuple[tuple[str, ...], ...]
    observations: tuple[tuple[str, ...], ...]
    transition: np.ndarray
    observation: np.ndarray
    reward: np.ndarray
    initial_belief: np.ndarray
    agents: tuple[str, ...] = ()
    name: str = ""

    def __post_init__(self):
        if not self.agents:
            object.__setattr__(self, "agents", tuple(str(i) for i in range(len(self.actions))))
        for attr in ("transition", "observation", "reward", "initial_belief"):
            table = np.array(getattr(self, attr), dtype=float)
            table.setflags(write=False)
            object.__setattr__(self, attr, table)
        self._validate()

    def __str__(self):
        return (f"<DecPomdp '{self.name}' agents={self.n_agents} states={self.n_states} "
                f"actions={self.action_counts} observations={self.observation_counts}>")

    def _validate(self):
        n = len(self.agents)
        if len(self.actions) != n or len(self.observations) != n:
            raise ModelError(f"agent-count mismatch: {n} agents, {len(self.actions)} action sets, "
                             f"{len(self.observations)} observation sets")
        S, JA, JO = self.n_states, self.n_joint_actions, self.n_joint_observations
        expected = {
            "transition": (S, JA, S),
            "observation": (JA, S, JO),
            "reward": (S, JA),
            "initial_belief": (S,),
        }
        for attr, shape in expected.items():
            if getattr(self, attr).shape != shape:
                raise ModelError(f"{attr} has shape {getattr(self, attr).shape}, expected {shape}")
        for attr in ("transition", "observation", "initial_belief"):
            table = getattr(self, attr)
            if np.any(table < -PROBABILITY_TOLERANCE) or np.any(table > 1 + PROBABILITY_TOLERANCE):
                raise ModelError(f"{attr} has entries outside [0, 1]")
        if not np.all(np.isfinite(self.reward)):
            raise ModelError("reward table has non-finite entries")

        bad = np.argwhere(~probability_rows_ok(self.transition, PROBABILITY_TOLERANCE))
        if len(bad):
            s, a = bad[0]
            raise ModelError(f"T row for state '{self.states[s]}' and joint action "
                             f"'{self.joint_action_name(a)}' sums to "
                             f"{self.transition[s, a].sum():.9g}")
        bad = np.argwhere(~probability_rows_ok(self.observation, PROBABILITY_TOLERANCE))
        if len(bad):
            a, s = bad[0]
            raise ModelError(f"O row for joint action '{self.joint_action_name(a)}' and next "
                             f"state '{self.states[s]}' sums to {self.observation[a, s].sum():.9g}")
        if not probability_rows_ok(self.initial_belief, PROBABILITY_TOLERANCE):
            raise ModelError(f"initial belief sums to {self.initial_belief.sum():.9g}")

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def n_states(self) -> int:
        return len(self.states)

    @cached_property
    def action_counts(self) -> tuple[int, ...]:
        return tuple(len(it) for it in self.actions)

    @cached_property
    def observation_counts(self) -> tuple[int, ...]:
        return tuple(len(it) for it in self.observations)

    @property
    def n_joint_actions(self) -> int:
        return math.prod(self.action_counts)

    @property
    def n_joint_observations(self) -> int:
        return math.prod(self.observation_counts)

    @cached_property
    def r_max(self) -> float:
        return float(self.reward.max())

    @cached_property
    def joint_observation_components(self) -> np.ndarray:
        "Array (joint observations, agents) of local observation indices."
        grid = np.indices(self.observation_counts).reshape(self.n_agents, -1)
        return grid.T.copy()

    @cached_property
    def joint_action_components(self) -> np.ndarray:
        grid = np.indices(self.action_counts).reshape(self.n_agents, -1)
        return grid.T.copy()

    def joint_action(self, local: Iterable[int]) -> int:
        return int(np.ravel_multi_index(tuple(local), self.action_counts))

    def local_actions(self, joint: int) -> tuple[int, ...]:
        return tuple(int(it) for it in self.joint_action_components[joint])

    def joint_action_name(self, joint: int) -> str:
        return " ".join(self.actions[i][a] for i, a in enumerate(self.local_actions(joint)))

    def point_belief(self, state: int) -> np.ndarray:
        belief = np.zeros(self.n_states)
        belief[state] = 1.0
        return belief

    @cached_property
    def uniform_transition(self) -> np.ndarray:
        "State transition under uniformly random joint actions."
        return self.transition.mean(axis=1)


class OccupancyTable:
    "Joint distribution over (joint cluster, state) at one stage."
    __slots__ = ("stage", "entries", "accumulated_reward")

    def __init__(self, stage: int, entries: dict[JointCluster, np.ndarray],
                 accumulated_reward: float = 0.0) -> None:
        self.stage = stage
        self.entries = entries
        self.accumulated_reward = accumulated_reward

    def __len__(self):
        return len(self.entries)

    def __str__(self):
        return (f"<OccupancyTable stage={self.stage} entries={len(self.entries)} "
                f"reward={self.accumulated_reward:.6g}>")

    def items(self):
        return self.entries.items()

    def total(self) -> float:
        return float(sum(vec.sum() for vec in self.entries.values()))

    def state_marginal(self, n_states: int) -> np.ndarray:
        marginal = np.zeros(n_states)
        for vec in self.entries.values():
            marginal += vec
        return marginal

    def cluster_probabilities(self, agent: int) -> dict[Suffix, float]:
        probabilities: dict[Suffix, float] = {}
        for key, vec in self.entries.items():
            probabilities[key[agent]] = probabilities.get(key[agent], 0.0) + float(vec.sum())
        return probabilities

    def relabel(self, mapping: Callable[[JointCluster], JointCluster]) -> "OccupancyTable":
        "Merge entries whose relabelled keys coincide."
        merged: dict[JointCluster, np.ndarray] = {}
        for key, vec in self.entries.items():
            target = mapping(key)
            if target in merged:
                merged[target] = merged[target] + vec
            else:
                merged[target] = vec
        return OccupancyTable(self.stage, merged, self.accumulated_reward)

    def check(self, tolerance: float = PROBABILITY_TOLERANCE):
        if any(np.any(vec < -tolerance) for vec in self.entries.values()):
            raise ValueError("occupancy has negative entries")
        if abs(self.total() - 1.0) > tolerance:
            raise ValueError(f"occupancy sums to {self.total():.12g}")


def initial_occupancy(model: DecPomdp, belief: np.ndarray | None = None) -> OccupancyTable:
    belief = model.initial_belief if belief is None else belief
    return OccupancyTable(0, {((),) * model.n_agents: np.array(belief, dtype=float)}, 0.0)


def propagate(model: DecPomdp, occupancy: OccupancyTable,
              joint_action: Callable[[JointCluster], int],
              successor: Callable[[int, Suffix, int], Suffix]
              ) -> tuple[float, OccupancyTable]:
    """One stage of forward propagation.

    Returns the expected stage reward and the occupancy at the next stage,
    keyed by the successor clusters of each agent.
    """
    components = model.joint_observation_components
    cache: dict[tuple[int, Suffix, int], Suffix] = {}
    reward = 0.0
    following: dict[JointCluster, np.ndarray] = {}
    for key, mass in occupancy.entries.items():
        ja = joint_action(key)
        reward += float(mass @ model.reward[:, ja])
        after = mass @ model.transition[:, ja, :]
        joint = after[:, None] * model.observation[ja]
        weights = joint.sum(axis=0)
        for jo in np.flatnonzero(weights > 0):
            locals_ = components[jo]
            target = []
            for i, cluster in enumerate(key):
                token = (i, cluster, int(locals_[i]))
                if token not in cache:
                    cache[token] = successor(*token)
                target.append(cache[token])
            target_key = tuple(target)
            if target_key in following:
                following[target_key] = following[target_key] + joint[:, jo]
            else:
                following[target_key] = joint[:, jo].copy()
    table = OccupancyTable(occupancy.stage + 1, following, occupancy.accumulated_reward + reward)
    return reward, table


def mdp_action_values(model: DecPomdp, future: np.ndarray) -> np.ndarray:
    "R(s,a) + sum_s' T(s'|s,a) future(s') as an (S, JA) array."
    return model.reward + model.transition @ future


def mdp_value(model: DecPomdp, h: int) -> np.ndarray:
    """Backward induction on the centralized fully observable MDP.

    Row h' of the result holds Q_MDP(., h') for 0 <= h' <= h.
    """
    if h < 0:
        raise ValueError(f"horizon must be non-negative, got {h}")
    values = np.zeros((h + 1, model.n_states))
    for stage in range(1, h + 1):
        values[stage] = mdp_action_values(model, values[stage - 1]).max(axis=1)
    return values


def random_policy_value(model: DecPomdp, h: int) -> float:
    "Exact value of the policy that picks every local action uniformly."
    check_horizon(h)
    belief = np.array(model.initial_belief)
    mean_reward = model.reward.mean(axis=1)
    total = 0.0
    for _ in range(h):
        total += float(belief @ mean_reward)
        belief = belief @ model.uniform_transition
    return total


class ClusterActionSerialize(TypedDict):
    suffix: list[int]
    action: int


class ClusterPolicySerialize(TypedDict):
    window: int
    agents: list[list[list[ClusterActionSerialize]]]


class ClusterPolicy(Serializable):
    """Fully specified policy over a sliding-window clustering.

    clusters[t][i] lists the defining suffixes of agent i at stage t and
    actions[t][i] maps each of them to a local action.
    """

    def __init__(self, window: int, clusters: Sequence[Sequence[Sequence[Sequence[int]]]],
                 actions: Sequence[Sequence[Mapping[Suffix, int]]]) -> None:
        super().__init__()
        if window < 1:
            raise ValueError(f"window must be at least 1, got {window}")
        self.window = window
        self.clusters: tuple[tuple[tuple[Suffix, ...], ...], ...] = tuple(
            tuple(tuple(tuple(int(o) for o in c) for c in agent) for agent in stage)
            for stage in clusters)
        self.actions: tuple[tuple[dict[Suffix, int], ...], ...] = tuple(
            tuple({tuple(k): int(v) for k, v in agent.items()} for agent in stage)
            for stage in actions)
        if len(self.clusters) != len(self.actions):
            raise ValueError("clusters and actions cover different numbers of stages")
        for t, (stage_clusters, stage_actions) in enumerate(zip(self.clusters, self.actions)):
            if len(stage_clusters) != len(stage_actions):
                raise ValueError(f"stage {t}: clusters and actions cover different agents")
            for i, (agent_clusters, agent_actions) in enumerate(zip(stage_clusters, stage_actions)):
                missing = [c for c in agent_clusters if c not in agent_actions]
                if missing:
                    raise PolicyError(f"stage {t}, agent {i}: no action for clusters {missing}")
        self._lookup = tuple(tuple(frozenset(agent) for agent in stage) for stage in self.clusters)

    def __str__(self):
        return f"<ClusterPolicy ..{hex(id(self))[-5:]} h={self.horizon} k={self.window}>"

    @property
    def horizon(self) -> int:
        return len(self.clusters)

    @property
    def n_agents(self) -> int:
        return len(self.clusters[0]) if self.clusters else 0

    def action(self, stage: int, agent: int, cluster: Suffix) -> int:
        try:
            return self.actions[stage][agent][cluster]
        except KeyError:
            raise PolicyError(f"missing action for reachable cluster {list(cluster)} "
                              f"of agent {agent} at stage {stage}") from None

    def successor(self, stage: int, agent: int, cluster: Suffix, obs: int) -> Suffix:
        "Cluster at stage+1 reached from `cluster` after observing `obs`."
        window = extend_window(cluster, obs, self.window)
        if stage + 1 >= self.horizon:
            return window
        target = containing_cluster(self._lookup[stage + 1][agent], window)
        if target is None:
            raise PolicyError(f"window {list(window)} of agent {agent} has no cluster "
                              f"at stage {stage + 1}")
        return target

    def max_clusters(self) -> int:
        return max((len(agent) for stage in self.clusters for agent in stage), default=0)

    def serialize(self) -> ClusterPolicySerialize:
        agents = []
        for i in range(self.n_agents):
            stages = []
            for t in range(self.horizon):
                stages.append([{"suffix": list(c), "action": self.actions[t][i][c]}
                               for c in self.clusters[t][i]])
            agents.append(stages)
        return {"window": self.window, "agents": agents}

    @classmethod
    def deserialize(cls, data: ClusterPolicySerialize) -> "ClusterPolicy":
        validate_dict(data, ClusterPolicySerialize)
        agents = data["agents"]
        horizon = len(agents[0]) if agents else 0
        if any(len(stages) != horizon for stages in agents):
            raise ValueError("agents cover different numbers of stages")
        clusters = [[[tuple(entry["suffix"]) for entry in agents[i][t]]
                     for i in range(len(agents))] for t in range(horizon)]
        actions = [[{tuple(entry["suffix"]): entry["action"] for entry in agents[i][t]}
                    for i in range(len(agents))] for t in range(horizon)]
        return cls(data["window"], clusters, actions)


def evaluate_policy(model: DecPomdp, policy: ClusterPolicy, h: int | None = None
                    ) -> tuple[float, list[OccupancyTable]]:
    """Exact value of a cluster policy by occupancy propagation.

    Also returns the occupancy tables of stages 0..h-1.
    """
    h = policy.horizon if h is None else check_horizon(h)
    if h > policy.horizon:
        raise PolicyError(f"policy covers {policy.horizon} stages, {h} requested")
    if policy.n_agents != model.n_agents:
        raise PolicyError(f"policy has {policy.n_agents} agents, model has {model.n_agents}")
    occupancy = initial_occupancy(model)
    tables = [occupancy]
    for stage in range(h):
        def joint_action(key: JointCluster, stage=stage) -> int:
            return model.joint_action(policy.action(stage, i, c) for i, c in enumerate(key))

        def successor(agent: int, cluster: Suffix, obs: int, stage=stage) -> Suffix:
            return policy.successor(stage, agent, cluster, obs)

        _, occupancy = propagate(model, occupancy, joint_action, successor)
        if stage + 1 < h:
            tables.append(occupancy)
    return occupancy.accumulated_reward, tables


def _sample_rows(rng: np.random.Generator, rows: np.ndarray) -> np.ndarray:
    cumulative = rows.cumsum(axis=1)
    draws = rng.random(len(rows))[:, None] * cumulative[:, -1:]
    return np.minimum((cumulative <= draws).sum(axis=1), rows.shape[1] - 1)


def simulate_policy(model: DecPomdp, policy: ClusterPolicy, h: int | None = None,
                    episodes: int = 100_000, seed: int | None = 0) -> tuple[float, float]:
    "Monte-Carlo estimate (mean, standard error) of a cluster policy's value."
    h = policy.horizon if h is None else check_horizon(h)
    rng = np.random.default_rng(seed)
    n = model.n_agents
    ids = [[{c: pos for pos, c in enumerate(agent)} for agent in stage]
           for stage in policy.clusters[:h]]
    action_tables = [[np.array([policy.actions[t][i][c] for c in policy.clusters[t][i]], dtype=int)
                      for i in range(n)] for t in range(h)]
    successor_tables = []
    for t in range(h - 1):
        per_agent = []
        for i in range(n):
            table = np.zeros((len(policy.clusters[t][i]), model.observation_counts[i]), dtype=int)
            for pos, c in enumerate(policy.clusters[t][i]):
                for o in range(model.observation_counts[i]):
                    table[pos, o] = ids[t + 1][i][policy.successor(t, i, c, o)]
            per_agent.append(table)
        successor_tables.append(per_agent)

    states = rng.choice(model.n_states, size=episodes, p=model.initial_belief)
    positions = np.zeros((n, episodes), dtype=int)
    returns = np.zeros(episodes)
    for t in range(h):
        local = np.stack([action_tables[t][i][positions[i]] for i in range(n)])
        ja = np.ravel_multi_index(tuple(local), model.action_counts)
        returns += model.reward[states, ja]
        if t + 1 == h:
            break
        following = _sample_rows(rng, model.transition[states, ja])
        jo = _sample_rows(rng, model.observation[ja, following])
        obs = model.joint_observation_components[jo].T
        positions = np.stack([successor_tables[t][i][positions[i], obs[i]] for i in range(n)])
        states = following
    error = float(returns.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else math.inf
    return float(returns.mean()), error
