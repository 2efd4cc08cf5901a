"""
Cross-checks of the solvers against enumeration and sampling
"""
import logging
import math
from collections.abc import Iterable
from dataclasses import dataclass
from enum import Enum

import numpy as np

from maa_planner.maa_clustering import (ClusterMode, StageClustering, check_incremental,
                                        cluster_stage, initial_clustering)
from maa_planner.maa_heuristics import HeuristicKind, HeuristicSpec, RevealVariant
from maa_planner.maa_model import (DecPomdp, JointCluster, evaluate_policy, initial_occupancy,
                                   mdp_value, propagate, random_policy_value, simulate_policy)
from maa_planner.maa_search import (BOUND_TOLERANCE, ENUMERATION_GUARD, EnumerationGuardError,
                                    SolverConfig, SolverMode, best_extension_value,
                                    brute_force_optimum, pf_maa_star, policy_count, tr_maa_star)
from maa_planner.maa_tree import SearchNode, SmallStepTree

log = logging.getLogger(__name__)

MONTE_CARLO_EPISODES = 100_000
MAX_CHECKED_NODES = 200


class Check(Enum):
    "Property checked by verify"
    LOSSLESS = "lossless"
    ADMISSIBLE = "admissible"
    INCREMENTAL = "incremental"
    SANDWICH = "sandwich"
    MONTECARLO = "montecarlo"


@dataclass
class CheckOutcome:
    check: Check
    benchmark: str
    horizon: int
    passed: bool
    detail: str
    seed: int | None = None
    skipped: bool = False

    def __str__(self):
        status = "SKIP" if self.skipped else "PASS" if self.passed else "FAIL"
        seed = "" if self.seed is None else f" seed={self.seed}"
        return f"{status} {self.check.value} {self.benchmark} h={self.horizon}{seed}: {self.detail}"


def check_lossless(model: DecPomdp, h: int, window: int) -> tuple[bool, str]:
    "Clustered and plain window-k memory reach the same optimum."
    plain = brute_force_optimum(model, h, window, mode=ClusterMode.NONE)
    clustered = brute_force_optimum(model, h, window, mode=ClusterMode.LOSSLESS)
    ok = math.isclose(plain, clustered, rel_tol=0.0, abs_tol=1e-9)
    return ok, f"plain {plain:.10g}, clustered {clustered:.10g}"


def random_clusterings(model: DecPomdp, h: int, window: int, seed: int,
                       mode: ClusterMode = ClusterMode.LOSSLESS
                       ) -> Iterable[tuple[StageClustering, StageClustering, StageClustering]]:
    """Walk one random policy stage by stage.

    Yields (previous, next, next computed from shuffled candidates).
    """
    rng = np.random.default_rng(seed)
    prev = initial_clustering(model.n_agents, window)
    occupancy = initial_occupancy(model)
    for t in range(h - 1):
        actions = [{c: int(rng.integers(model.action_counts[i])) for c in prev.clusters[i]}
                   for i in range(model.n_agents)]

        def joint_action(key: JointCluster) -> int:
            return model.joint_action(actions[i][c] for i, c in enumerate(key))

        _, candidates = propagate(model, occupancy, joint_action, prev.candidate)
        following, merged = cluster_stage(model, candidates, prev, window, mode=mode)
        shuffled, _ = cluster_stage(model, candidates, prev, window, mode=mode,
                                    rng=np.random.default_rng(seed * 1000 + t))
        yield prev, following, shuffled
        prev, occupancy = following, merged


def check_incremental_walk(model: DecPomdp, h: int, window: int, seed: int) -> tuple[bool, str]:
    problems = []
    for prev, following, shuffled in random_clusterings(model, h, window, seed):
        problems += check_incremental(prev, following, model.observation_counts)
        for i in range(model.n_agents):
            if set(following.clusters[i]) != set(shuffled.clusters[i]):
                problems.append(f"stage {following.stage} agent {i}: merge depends on order")
    return not problems, "; ".join(problems[:3]) or f"{h - 1} stage boundaries"


def check_admissible(model: DecPomdp, h: int, r: int, variant: RevealVariant
                     ) -> tuple[bool, str]:
    "Every expanded node's priority bounds its best completion."
    count = policy_count(model, h, h)
    if count > ENUMERATION_GUARD:
        raise EnumerationGuardError(f"{count} joint policies exceed the guard of "
                                    f"{ENUMERATION_GUARD}")
    worst = -math.inf
    checked = 0

    def inspect(tree: SmallStepTree, node: SearchNode):
        nonlocal worst, checked
        if checked >= MAX_CHECKED_NODES:
            return
        checked += 1
        worst = max(worst, best_extension_value(tree, node.policy) - node.priority)

    spec = HeuristicSpec(HeuristicKind.TR, r, variant)
    tr_maa_star(model, h, SolverConfig(SolverMode.UPPER, heuristic=spec), on_expand=inspect)
    return worst <= BOUND_TOLERANCE, f"{checked} nodes, largest excess {worst:.3g}"


def check_sandwich(model: DecPomdp, h: int, window: int) -> tuple[bool, str]:
    "random <= policy value <= optimum <= upper bound <= MDP bound"
    chain = [("random", random_policy_value(model, h))]
    found = pf_maa_star(model, h, SolverConfig(SolverMode.POLICY, window=window, limit=10**5))
    chain.append(("policy", found.value))
    try:
        chain.append(("optimum", brute_force_optimum(model, h)))
    except EnumerationGuardError:
        log.info("%s h=%d: optimum skipped, too many policies", model.name, h)
    upper = tr_maa_star(model, h, SolverConfig(
        SolverMode.UPPER, heuristic=HeuristicSpec(HeuristicKind.TR, max(1, h - 1))))
    chain.append(("upper", upper.upper_bound))
    chain.append(("mdp", float(model.initial_belief @ mdp_value(model, h)[h])))
    ok = all(a[1] <= b[1] + BOUND_TOLERANCE for a, b in zip(chain, chain[1:]))
    return ok, " <= ".join(f"{name} {value:.6g}" for name, value in chain)


def check_montecarlo(model: DecPomdp, h: int, window: int, seed: int) -> tuple[bool, str]:
    "Exact evaluation agrees with sampling within four standard errors."
    found = pf_maa_star(model, h, SolverConfig(SolverMode.POLICY, window=window, limit=10**5))
    exact, _ = evaluate_policy(model, found.best_policy)
    mean, error = simulate_policy(model, found.best_policy, episodes=MONTE_CARLO_EPISODES,
                                  seed=seed)
    ok = abs(mean - exact) <= max(4 * error, 1e-9)
    return ok, f"exact {exact:.6g}, sampled {mean:.6g} +- {error:.3g}"


def run_check(check: Check, name: str, model: DecPomdp, h: int, window: int | None = None,
              seed: int = 0, r: int = 2,
              variant: RevealVariant = RevealVariant.AT_R1) -> CheckOutcome:
    window = h if window is None else window
    try:
        match check:
            case Check.LOSSLESS:
                ok, detail = check_lossless(model, h, window)
            case Check.ADMISSIBLE:
                ok, detail = check_admissible(model, h, r, variant)
            case Check.INCREMENTAL:
                ok, detail = check_incremental_walk(model, h, window, seed)
            case Check.SANDWICH:
                ok, detail = check_sandwich(model, h, window)
            case Check.MONTECARLO:
                ok, detail = check_montecarlo(model, h, window, seed)
    except EnumerationGuardError as e:
        return CheckOutcome(check, name, h, True, str(e), seed, skipped=True)
    outcome = CheckOutcome(check, name, h, ok, detail, seed)
    (log.info if ok else log.error)("%s", outcome)
    return outcome
