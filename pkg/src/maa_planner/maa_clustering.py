"""
Sliding-window clusterings of local observation histories

A cluster is identified by its defining suffix: it holds every window that
ends in that suffix. Clusters of one agent at one stage are suffix-free.
"""
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from maa_planner.maa_model import (DecPomdp, JointCluster, OccupancyTable, Suffix,
                                   containing_cluster, extend_window)

log = logging.getLogger(__name__)

BELIEF_TOLERANCE = 1e-8


class ClusterMode(Enum):
    "How candidate windows are merged at a stage boundary"
    NONE = "none"
    POSSIBLE = "possible"
    LOSSLESS = "lossless"


def ends_with(window: Suffix, suffix: Suffix) -> bool:
    return len(window) >= len(suffix) and window[len(window) - len(suffix):] == suffix


def sliding_window_cluster(loh: Sequence[int], k: int) -> Suffix:
    "Defining suffix of a history under plain sliding k-window memory."
    if k < 1:
        raise ValueError(f"window size must be at least 1, got {k}")
    return tuple(loh[-k:]) if loh else ()


@dataclass(frozen=True, eq=False)
class StageClustering:
    """Partition of the windows of every agent at one stage.

    clusters[i] is agent i's partition in expansion order (descending
    probability, then lexicographic suffix).
    """
    stage: int
    window: int
    clusters: tuple[tuple[Suffix, ...], ...]
    probabilities: tuple[dict[Suffix, float], ...]
    _lookup: tuple[frozenset[Suffix], ...] = field(init=False, repr=False)
    _reachable: tuple[tuple[Suffix, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_lookup", tuple(frozenset(it) for it in self.clusters))
        object.__setattr__(self, "_reachable", tuple(
            tuple(c for c in agent if probs.get(c, 0.0) > 0)
            for agent, probs in zip(self.clusters, self.probabilities)))

    def __str__(self):
        sizes = ", ".join(str(len(it)) for it in self.clusters)
        return f"<StageClustering t={self.stage} k={self.window} clusters=({sizes})>"

    @property
    def n_agents(self) -> int:
        return len(self.clusters)

    @property
    def window_length(self) -> int:
        return min(self.stage, self.window)

    def cluster_of(self, agent: int, window: Suffix) -> Suffix | None:
        return containing_cluster(self._lookup[agent], window)

    def candidate(self, agent: int, cluster: Suffix, obs: int) -> Suffix:
        "Candidate window at the next stage, before any merging."
        return extend_window(cluster, obs, self.window)

    def probability(self, agent: int, cluster: Suffix) -> float:
        return self.probabilities[agent].get(cluster, 0.0)

    def reachable(self, agent: int) -> tuple[Suffix, ...]:
        "Clusters with positive probability, in expansion order."
        return self._reachable[agent]

    def max_clusters(self) -> int:
        return max((len(it) for it in self.clusters), default=0)


def initial_clustering(n_agents: int, window: int) -> StageClustering:
    return StageClustering(0, window, (((),),) * n_agents,
                           tuple({(): 1.0} for _ in range(n_agents)))


def f_extend(prev: StageClustering, observation_counts: Sequence[int]
             ) -> tuple[dict[Suffix, tuple[tuple[Suffix, int], ...]], ...]:
    """Finest incremental extension of a clustering to the next stage.

    For every agent maps each candidate window to the (cluster, observation)
    pairs that produce it.
    """
    extended = []
    for agent, clusters in enumerate(prev.clusters):
        groups: dict[Suffix, list[tuple[Suffix, int]]] = {}
        for cluster in clusters:
            for obs in range(observation_counts[agent]):
                groups.setdefault(prev.candidate(agent, cluster, obs), []).append((cluster, obs))
        extended.append({c: tuple(groups[c]) for c in sorted(groups)})
    return tuple(extended)


class SuffixBeliefs:
    """Conditional distributions over (other agents' candidates, state) given
    that agent's window ends in a suffix."""

    def __init__(self, occupancy: OccupancyTable, agent: int, candidates: Iterable[Suffix],
                 window_length: int, n_states: int) -> None:
        self.agent = agent
        self.window_length = window_length
        self.candidates = tuple(candidates)
        self._row = {c: pos for pos, c in enumerate(self.candidates)}
        self.others: dict[JointCluster, int] = {}
        entries: list[tuple[int, int, np.ndarray]] = []
        for key, vec in occupancy.items():
            if key[agent] not in self._row:
                raise ValueError(f"occupancy window {list(key[agent])} of agent {agent} "
                                 f"is not a candidate")
            others = key[:agent] + key[agent + 1:]
            column = self.others.setdefault(others, len(self.others))
            entries.append((self._row[key[agent]], column, vec))
        self._table = np.zeros((len(self.candidates), max(len(self.others), 1), n_states))
        for row, column, vec in entries:
            self._table[row, column] += vec
        self._cache: dict[Suffix, tuple[float, np.ndarray]] = {}

    def _aggregate(self, suffix: Suffix) -> tuple[float, np.ndarray]:
        if suffix not in self._cache:
            rows = [pos for c, pos in self._row.items() if ends_with(c, suffix)]
            total = self._table[rows].sum(axis=0) if rows else np.zeros(self._table.shape[1:])
            self._cache[suffix] = (float(total.sum()), total.ravel())
        return self._cache[suffix]

    def mass(self, suffix: Suffix) -> float:
        "Probability that the window ends in `suffix`."
        return self._aggregate(suffix)[0]

    def belief(self, suffix: Suffix) -> np.ndarray | None:
        "Flattened conditional distribution, None when unreachable."
        total, joint = self._aggregate(suffix)
        if total <= 0:
            return None
        return joint / total

    def distribution(self, suffix: Suffix) -> dict[JointCluster, np.ndarray] | None:
        flat = self.belief(suffix)
        if flat is None:
            return None
        table = flat.reshape(self._table.shape[1:])
        return {others: table[column] for others, column in self.others.items()}


def suffix_beliefs(occupancy: OccupancyTable, agent: int, candidates: Iterable[Suffix],
                   window: int, n_states: int) -> SuffixBeliefs:
    return SuffixBeliefs(occupancy, agent, candidates, min(occupancy.stage, window), n_states)


def _same(first: np.ndarray, second: np.ndarray, tolerance: float) -> bool:
    return float(np.max(np.abs(first - second), initial=0.0)) <= tolerance


class _Merger:
    "Coarsest-first search for the clusters of one agent."

    def __init__(self, beliefs: SuffixBeliefs, candidates: list[Suffix], n_obs: int,
                 mode: ClusterMode, p_max: float | None, tolerance: float) -> None:
        self.beliefs = beliefs
        self.candidates = candidates
        self.n_obs = n_obs
        self.mode = mode
        self.p_max = p_max
        self.tolerance = tolerance

    def resolve(self, suffix: Suffix = ()) -> list[Suffix]:
        members = [c for c in self.candidates if ends_with(c, suffix)]
        if not members:
            return []
        if members == [suffix] or self.mergeable(members, suffix):
            return [suffix]
        clusters: list[Suffix] = []
        for obs in range(self.n_obs):
            clusters.extend(self.resolve((obs,) + suffix))
        return clusters

    def mergeable(self, members: list[Suffix], suffix: Suffix) -> bool:
        mass = self.beliefs.mass(suffix)
        if mass <= 0:
            return True
        if self.p_max is not None and mass <= self.p_max:
            return True
        reachable = [c for c in members if self.beliefs.mass(c) > 0]
        if len(reachable) <= 1:
            return True
        if self.mode is ClusterMode.POSSIBLE:
            return False
        for length in range(len(suffix) + 1, self.beliefs.window_length + 1):
            reference = None
            for c in reachable:
                belief = self.beliefs.belief(c[len(c) - min(length, len(c)):])
                if belief is None:
                    continue
                if reference is None:
                    reference = belief
                elif not _same(reference, belief, self.tolerance):
                    return False
        return True


def cluster_stage(model: DecPomdp, occupancy: OccupancyTable, prev: StageClustering | None,
                  window: int, p_max: float | None = None,
                  mode: ClusterMode = ClusterMode.LOSSLESS, *,
                  tolerance: float = BELIEF_TOLERANCE,
                  rng: np.random.Generator | None = None
                  ) -> tuple[StageClustering, OccupancyTable]:
    """Clusters of every agent at the occupancy's stage.

    `occupancy` is keyed by the candidate windows of `prev` (see f_extend);
    the returned occupancy is keyed by the merged clusters. `rng` shuffles
    the order in which candidates are considered.
    """
    if window < 1:
        raise ValueError(f"window size must be at least 1, got {window}")
    if prev is None:
        if occupancy.stage != 0:
            raise ValueError("stage 0 is the only stage without a previous clustering")
        return initial_clustering(model.n_agents, window), occupancy
    if occupancy.stage != prev.stage + 1:
        raise ValueError(f"occupancy at stage {occupancy.stage} does not follow "
                         f"clustering at stage {prev.stage}")
    extended = f_extend(prev, model.observation_counts)
    assignments: list[dict[Suffix, Suffix]] = []
    partitions: list[list[Suffix]] = []
    for agent, groups in enumerate(extended):
        candidates = list(groups)
        if rng is not None:
            candidates = [candidates[i] for i in rng.permutation(len(candidates))]
        if mode is ClusterMode.NONE:
            clusters = sorted(candidates)
        else:
            beliefs = suffix_beliefs(occupancy, agent, candidates, window, model.n_states)
            merger = _Merger(beliefs, candidates, model.observation_counts[agent], mode, p_max,
                             tolerance)
            clusters = merger.resolve()
        lookup = frozenset(clusters)
        assignments.append({c: containing_cluster(lookup, c) or () for c in candidates})
        partitions.append(clusters)

    merged = occupancy.relabel(
        lambda key: tuple(assignments[i][c] for i, c in enumerate(key)))
    probabilities = []
    ordered = []
    for agent, clusters in enumerate(partitions):
        marginal = merged.cluster_probabilities(agent)
        probs = {c: marginal.get(c, 0.0) for c in clusters}
        probabilities.append(probs)
        ordered.append(tuple(sorted(clusters, key=lambda c: (-probs[c], c))))
    clustering = StageClustering(occupancy.stage, window, tuple(ordered), tuple(probabilities))
    log.debug("stage %d clusters per agent: %s (candidates %s)", occupancy.stage,
              [len(it) for it in ordered], [len(it) for it in extended])
    return clustering, merged


def check_incremental(prev: StageClustering, following: StageClustering,
                      observation_counts: Sequence[int]) -> list[str]:
    "Windows whose extension does not land in exactly one next-stage cluster."
    violations = []
    for agent in range(prev.n_agents):
        if not is_suffix_free(following.clusters[agent]):
            violations.append(f"agent {agent} stage {following.stage}: "
                              "clusters are not suffix-free")
        for cluster in prev.clusters[agent]:
            for obs in range(observation_counts[agent]):
                window = prev.candidate(agent, cluster, obs)
                hits = [c for c in following.clusters[agent] if ends_with(window, c)]
                if len(hits) != 1:
                    violations.append(f"agent {agent} stage {prev.stage}: cluster {list(cluster)} "
                                      f"+ {obs} lands in {len(hits)} clusters")
    return violations


def is_suffix_free(clusters: Iterable[Suffix]) -> bool:
    clusters = list(clusters)
    return not any(a != b and ends_with(a, b) for a in clusters for b in clusters)
