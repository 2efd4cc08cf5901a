"""
Small-step MAA*: policy finding with progress pruning and upper-bound search
"""
import logging
import math
import resource
import sys
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum

from maa_planner.maa_clustering import ClusterMode
from maa_planner.maa_heuristics import HeuristicEvaluator, HeuristicKind, HeuristicSpec
from maa_planner.maa_model import ClusterPolicy, DecPomdp, check_horizon
from maa_planner.maa_tree import (ExpansionBudgetError, MemoryGuard, OpenQueue, PartialPolicy,
                                  ProgressMeasure, SearchNode, SmallStepTree, merge_heuristics)

log = logging.getLogger(__name__)

DEFAULT_MEMORY_LIMIT = 16 * 2**30
ENUMERATION_GUARD = 10**7
CHECK_INTERVAL = 1024
BOUND_TOLERANCE = 1e-9


class SearchLimitError(RuntimeError):
    "A limit fired before any fully specified policy could be produced."

    def __init__(self, message: str, expansions: int = 0, open_nodes: int = 0,
                 bound: float | None = None) -> None:
        super().__init__(message)
        self.expansions = expansions
        self.open_nodes = open_nodes
        self.bound = bound


class EnumerationGuardError(ValueError):
    "The policy space is too large to enumerate."


class SolverMode(Enum):
    "Which side of the optimum a run works on"
    POLICY = "policy"
    UPPER = "upper"


@dataclass(frozen=True)
class SolverConfig:
    """Parameters of one search run.

    window None means the horizon. limit is the per-stage expansion budget L
    and only applies in policy mode.
    """
    mode: SolverMode = SolverMode.POLICY
    window: int | None = None
    limit: int = 1000
    heuristic: HeuristicSpec = field(default_factory=HeuristicSpec)
    p_max: float | None = None
    cluster_mode: ClusterMode = ClusterMode.LOSSLESS
    progress: ProgressMeasure = ProgressMeasure.PROG
    time_limit: float | None = None
    memory_limit: int | None = DEFAULT_MEMORY_LIMIT
    provided_lower_bound: float | None = None

    def __post_init__(self):
        if self.window is not None and self.window < 1:
            raise ValueError(f"window size must be at least 1, got {self.window}")
        if self.limit < 1:
            raise ValueError(f"expansion budget must be at least 1, got {self.limit}")
        if self.p_max is not None and not 0.0 <= self.p_max <= 1.0:
            raise ValueError(f"p_max must lie in [0, 1], got {self.p_max}")
        if self.p_max is not None and self.mode is SolverMode.UPPER:
            raise ValueError("p_max merges clusters lossily and cannot be used for upper bounds")
        if self.time_limit is not None and self.time_limit <= 0:
            raise ValueError(f"time limit must be positive, got {self.time_limit}")
        if self.memory_limit is not None and self.memory_limit <= 0:
            raise ValueError(f"memory limit must be positive, got {self.memory_limit}")

    @property
    def r(self) -> int:
        return self.heuristic.r

    def window_for(self, h: int) -> int:
        return h if self.window is None else self.window


@dataclass
class SolveResult:
    mode: SolverMode
    horizon: int
    best_policy: ClusterPolicy | None = None
    value: float | None = None
    upper_bound: float | None = None
    expansions: int = 0
    pruned: int = 0
    wall_time: float = 0.0
    peak_memory: int = 0
    degraded: bool = False
    timed_out: bool = False
    memory_out: bool = False
    max_clusters: int = 0
    bound_trace: list[float] = field(default_factory=list)

    def __str__(self):
        return (f"<SolveResult {self.mode.value} h={self.horizon} value={self.value} "
                f"bound={self.upper_bound} expansions={self.expansions}>")

    @property
    def hit_limit(self) -> bool:
        return self.timed_out or self.memory_out


ExpandCallback = Callable[[SmallStepTree, SearchNode], None]


def peak_memory() -> int:
    "Peak resident set size of this process in bytes."
    usage = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return usage if sys.platform == "darwin" else usage * 1024


class _Run:
    "State shared by both search modes."

    def __init__(self, model: DecPomdp, h: int, config: SolverConfig, tree: SmallStepTree) -> None:
        self.model = model
        self.h = h
        self.config = config
        self.tree = tree
        self.evaluator = HeuristicEvaluator(model, h, config.heuristic,
                                            memory_limit=config.memory_limit)
        self.guard = MemoryGuard(config.memory_limit)
        self.queue = OpenQueue()
        self.started = time.perf_counter()
        self.deadline = None if config.time_limit is None else self.started + config.time_limit
        self.expansions = 0
        self.pruned = 0
        # joint clusters of this stage are revealed; follows the deepest popped node
        self.depth = 1
        self._checked = -1

    def out_of_time(self) -> bool:
        return self.deadline is not None and time.perf_counter() > self.deadline

    def out_of_memory(self, sample: PartialPolicy) -> bool:
        if self.expansions % CHECK_INTERVAL or self.expansions == self._checked:
            return False
        self._checked = self.expansions
        log.debug("%d expansions, %d open, top %.6g, %d sub-searches", self.expansions,
                  len(self.queue), self.queue.peek().priority if self.queue else math.nan,
                  self.evaluator.sub_searches)
        return self.guard.exceeded(len(self.queue) + 1, sample)

    def node(self, policy: PartialPolicy, parent: SearchNode | None) -> SearchNode:
        if policy.is_complete:
            heuristics = ((self.h, policy.value),)
        else:
            heuristics = parent.heuristics if parent else ()
            for depth in self.evaluator.depths(policy, self.depth):
                value = self.evaluator.heuristic_value(self.tree, policy, depth)
                heuristics = merge_heuristics(heuristics, depth, value)
        prog = 0.0
        if self.config.mode is SolverMode.POLICY:
            prog = self.tree.prog(policy, self.config.limit, self.config.progress)
        return SearchNode(policy, heuristics, prog)

    def refresh(self, node: SearchNode) -> bool:
        """Re-evaluate a popped node at the current reveal depth.

        True when its priority dropped below the top of the queue and it has
        to go back instead of being expanded.
        """
        self.depth = max(self.depth, node.policy.stage)
        depth = self.evaluator.reveal_depth(node.policy, self.depth)
        if depth <= node.depth:
            return False
        value = self.evaluator.heuristic_value(self.tree, node.policy, depth)
        node.heuristics = merge_heuristics(node.heuristics, depth, value)
        top = self.queue.peek()
        return top is not None and node.priority < top.priority

    def result(self, best: PartialPolicy | None, **kwargs) -> SolveResult:
        result = SolveResult(self.config.mode, self.h, expansions=self.expansions,
                             pruned=self.pruned, **kwargs)
        if best is not None:
            result.best_policy = self.tree.to_cluster_policy(best)
            result.value = best.value
            result.max_clusters = self.tree.max_clusters(best)
        result.degraded = result.degraded or self.evaluator.degraded
        result.wall_time = time.perf_counter() - self.started
        result.peak_memory = peak_memory()
        log.info("%s %s: value %s, bound %s, %d expansions in %.2fs", self.model.name or "model",
                 self.config.mode.value, result.value, result.upper_bound, result.expansions,
                 result.wall_time)
        return result


def _better(best: PartialPolicy | None, policy: PartialPolicy) -> PartialPolicy:
    return policy if best is None or policy.value > best.value else best


def pf_maa_star(model: DecPomdp, h: int, config: SolverConfig,
                on_expand: ExpandCallback | None = None) -> SolveResult:
    """Best-first search that expands a node only while its progress keeps
    up with the number of expansions; returns within h*L expansions."""
    check_horizon(h)
    if config.mode is not SolverMode.POLICY:
        raise ValueError(f"policy finding needs mode 'policy', got '{config.mode.value}'")
    tree = SmallStepTree(model, h, config.window_for(h), mode=config.cluster_mode,
                         p_max=config.p_max, budget=config.limit)
    run = _Run(model, h, config, tree)
    log.info("policy search on %s: h=%d k=%d L=%d %s", model.name or "model", h, tree.window,
             config.limit, config.heuristic)
    run.queue.push(run.node(tree.root(), None))
    best: PartialPolicy | None = None
    timed_out = memory_out = False
    while run.queue:
        top = run.queue.peek()
        if run.out_of_time():
            timed_out = True
            break
        if run.out_of_memory(top.policy):
            memory_out = True
            break
        node = run.queue.pop()
        if node.policy.is_complete:
            return run.result(_better(best, node.policy))
        if node.prog < run.expansions:
            run.pruned += 1
            continue
        if run.refresh(node):
            run.queue.push(node)
            continue
        run.expansions += 1
        if on_expand is not None:
            on_expand(tree, node)
        for child in tree.children(node.policy):
            if child.is_complete:
                best = _better(best, child)
            run.queue.push(run.node(child, node))

    if not timed_out and not memory_out:
        raise SearchLimitError("open queue ran empty before a policy was completed",
                               run.expansions, 0)
    log.warning("%s after %d expansions", "time limit" if timed_out else "memory limit",
                run.expansions)
    if best is None:
        try:
            best = tree.greedy_complete(run.queue.peek().policy)
        except ExpansionBudgetError as e:
            raise SearchLimitError(f"no policy completed: {e}", run.expansions,
                                   len(run.queue)) from e
    return run.result(best, timed_out=timed_out, memory_out=memory_out)


def tr_maa_star(model: DecPomdp, h: int, config: SolverConfig,
                on_expand: ExpandCallback | None = None) -> SolveResult:
    """Best-first search without pruning; the top priority of the open queue
    is an upper bound on the optimum at any time."""
    check_horizon(h)
    if config.mode is not SolverMode.UPPER:
        raise ValueError(f"upper-bound search needs mode 'upper', got '{config.mode.value}'")
    if config.heuristic.kind is not HeuristicKind.TR:
        log.warning("upper bounds with %s are not certified", config.heuristic)
    window = config.window_for(h)
    if window < h - 1:
        raise ValueError(f"window {window} cannot represent every history of horizon {h}")
    tree = SmallStepTree(model, h, window, mode=config.cluster_mode)
    run = _Run(model, h, config, tree)
    lower = config.provided_lower_bound
    log.info("upper-bound search on %s: h=%d %s lower bound %s", model.name or "model", h,
             config.heuristic, lower)
    run.queue.push(run.node(tree.root(), None))
    trace: list[float] = []
    best: PartialPolicy | None = None
    timed_out = memory_out = False
    while run.queue:
        top = run.queue.peek()
        if run.out_of_time():
            timed_out = True
            break
        if run.out_of_memory(top.policy):
            memory_out = True
            break
        node = run.queue.pop()
        trace.append(node.priority)
        if node.policy.is_complete:
            best = node.policy
            break
        if run.refresh(node):
            if lower is not None and node.priority < lower - BOUND_TOLERANCE:
                run.pruned += 1
            else:
                run.queue.push(node)
            continue
        run.expansions += 1
        if on_expand is not None:
            on_expand(tree, node)
        for child in tree.children(node.policy):
            child_node = run.node(child, node)
            if lower is not None and child_node.priority < lower - BOUND_TOLERANCE:
                run.pruned += 1
                continue
            run.queue.push(child_node)

    if best is not None:
        bound = best.value
    elif run.queue:
        bound = run.queue.peek().priority
        log.warning("%s after %d expansions, bound %.6g",
                    "time limit" if timed_out else "memory limit", run.expansions, bound)
    elif lower is not None:
        # everything below the provided lower bound was pruned
        bound = lower
    else:
        raise SearchLimitError("open queue ran empty", run.expansions, 0)
    result = run.result(best, upper_bound=bound, degraded=memory_out, timed_out=timed_out,
                        memory_out=memory_out, bound_trace=trace)
    if result.value is None and lower is not None:
        result.value = lower
    return result


def solve(model: DecPomdp, h: int, config: SolverConfig,
          on_expand: ExpandCallback | None = None) -> SolveResult:
    if config.mode is SolverMode.POLICY:
        return pf_maa_star(model, h, config, on_expand)
    return tr_maa_star(model, h, config, on_expand)


def best_extension_value(tree: SmallStepTree, policy: PartialPolicy) -> float:
    "Maximum value over every completion of `policy`."
    return tree.best_completion(policy).value


def policy_count(model: DecPomdp, h: int, window: int) -> int:
    "Number of deterministic joint policies over plain sliding windows."
    total = 1
    for actions, observations in zip(model.action_counts, model.observation_counts):
        windows = sum(observations ** min(t, window) for t in range(h))
        total *= actions ** windows
    return total


def brute_force_optimum(model: DecPomdp, h: int, k: int | None = None, *,
                        mode: ClusterMode = ClusterMode.NONE,
                        guard: int = ENUMERATION_GUARD) -> float:
    "Exact optimum over window-k policies by enumeration."
    check_horizon(h)
    window = h if k is None else k
    count = policy_count(model, h, window)
    if count > guard:
        raise EnumerationGuardError(f"{count} joint policies exceed the guard of {guard}")
    tree = SmallStepTree(model, h, window, mode=mode)
    return best_extension_value(tree, tree.root())
