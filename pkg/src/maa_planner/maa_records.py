"""
Run records and their json, csv and text renderings
"""
import csv
import io
import json
import logging
import platform
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib import metadata
from typing import TypedDict

from maa_planner.maa_clustering import ClusterMode
from maa_planner.maa_heuristics import HeuristicKind, HeuristicSpec, RevealVariant
from maa_planner.maa_model import ClusterPolicy, ClusterPolicySerialize
from maa_planner.maa_search import SolveResult, SolverConfig, SolverMode
from maa_planner.maa_serializable import Serializable
from maa_planner.maa_tree import ProgressMeasure
from maa_planner.utils import significant, validate_dict

log = logging.getLogger(__name__)


class ConfigSerialize(TypedDict):
    mode: SolverMode
    window: int | None
    limit: int
    heuristic: HeuristicKind
    r: int
    variant: RevealVariant
    abort_cap: int | None
    pmax: float | None
    cluster_mode: ClusterMode
    progress: ProgressMeasure
    time_limit: float | None
    memory_limit: int | None
    lower_bound: float | None


class ResultSerialize(TypedDict):
    value: float | None
    upper_bound: float | None
    expansions: int
    pruned: int
    degraded: bool
    timed_out: bool
    memory_out: bool
    max_clusters: int
    bound_trace: list[float]
    policy: ClusterPolicySerialize | None


class EnvironmentSerialize(TypedDict):
    version: str
    host: str
    timestamp: str
    wall_time: float
    peak_memory: int


class RunRecordSerialize(TypedDict):
    benchmark: str
    horizon: int
    config: ConfigSerialize
    result: ResultSerialize
    environment: EnvironmentSerialize


def package_version() -> str:
    try:
        return metadata.version("maa-planner")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def config_to_dict(config: SolverConfig) -> ConfigSerialize:
    spec = config.heuristic
    return {
        "mode": config.mode.value,
        "window": config.window,
        "limit": config.limit,
        "heuristic": spec.kind.value,
        "r": spec.r,
        "variant": spec.variant.value,
        "abort_cap": spec.abort_cap,
        "pmax": config.p_max,
        "cluster_mode": config.cluster_mode.value,
        "progress": config.progress.value,
        "time_limit": config.time_limit,
        "memory_limit": config.memory_limit,
        "lower_bound": config.provided_lower_bound,
    }


def config_from_dict(data: ConfigSerialize) -> SolverConfig:
    validate_dict(data, ConfigSerialize)
    spec = HeuristicSpec(HeuristicKind(data["heuristic"]), data["r"],
                         RevealVariant(data["variant"]), data["abort_cap"])
    return SolverConfig(SolverMode(data["mode"]), data["window"], data["limit"], spec,
                        data["pmax"], ClusterMode(data["cluster_mode"]),
                        ProgressMeasure(data["progress"]), data["time_limit"],
                        data["memory_limit"], data["lower_bound"])


@dataclass(eq=False)
class RunRecord(Serializable):
    "One solver run: what was solved, how, what came out and where it ran."
    benchmark: str
    horizon: int
    config: SolverConfig
    result: SolveResult
    version: str = ""
    host: str = ""
    timestamp: str = ""

    def __post_init__(self):
        self.version = self.version or package_version()
        self.host = self.host or platform.node()
        self.timestamp = self.timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds")

    def __str__(self):
        return f"<RunRecord {self.benchmark} h={self.horizon} {self.config.mode.value}>"

    def serialize(self) -> RunRecordSerialize:
        result = self.result
        policy = result.best_policy.serialize() if result.best_policy is not None else None
        return {
            "benchmark": self.benchmark,
            "horizon": self.horizon,
            "config": config_to_dict(self.config),
            "result": {
                "value": result.value,
                "upper_bound": result.upper_bound,
                "expansions": result.expansions,
                "pruned": result.pruned,
                "degraded": result.degraded,
                "timed_out": result.timed_out,
                "memory_out": result.memory_out,
                "max_clusters": result.max_clusters,
                "bound_trace": list(result.bound_trace),
                "policy": policy,
            },
            "environment": {
                "version": self.version,
                "host": self.host,
                "timestamp": self.timestamp,
                "wall_time": result.wall_time,
                "peak_memory": result.peak_memory,
            },
        }

    @classmethod
    def deserialize(cls, data: RunRecordSerialize) -> "RunRecord":
        validate_dict(data, RunRecordSerialize)
        config = config_from_dict(data["config"])
        stored = data["result"]
        environment = data["environment"]
        policy = stored["policy"]
        result = SolveResult(
            config.mode, data["horizon"],
            best_policy=ClusterPolicy.deserialize(policy) if policy is not None else None,
            value=stored["value"], upper_bound=stored["upper_bound"],
            expansions=stored["expansions"], pruned=stored["pruned"],
            wall_time=environment["wall_time"], peak_memory=environment["peak_memory"],
            degraded=stored["degraded"], timed_out=stored["timed_out"],
            memory_out=stored["memory_out"], max_clusters=stored["max_clusters"],
            bound_trace=list(stored["bound_trace"]))
        return cls(data["benchmark"], data["horizon"], config, result, environment["version"],
                   environment["host"], environment["timestamp"])


CSV_COLUMNS = ("benchmark", "horizon", "mode", "heuristic", "r", "variant", "window", "limit",
               "value", "upper_bound", "gap", "expansions", "pruned", "max_clusters",
               "degraded", "timed_out", "memory_out", "wall_time", "peak_memory")


def gaps(records: Sequence[RunRecord]) -> list[float | None]:
    """(upper - lower) / |upper| for every record whose benchmark and horizon
    have both a policy value and an upper bound."""
    lower: dict[tuple[str, int], float] = {}
    upper: dict[tuple[str, int], float] = {}
    for record in records:
        key = (record.benchmark, record.horizon)
        if record.config.mode is SolverMode.POLICY and record.result.value is not None:
            lower[key] = max(lower.get(key, record.result.value), record.result.value)
        if record.config.mode is SolverMode.UPPER and record.result.upper_bound is not None:
            upper[key] = min(upper.get(key, record.result.upper_bound), record.result.upper_bound)
    found = []
    for record in records:
        key = (record.benchmark, record.horizon)
        if key in lower and key in upper and upper[key] != 0:
            found.append((upper[key] - lower[key]) / abs(upper[key]))
        else:
            found.append(None)
    return found


def _row(record: RunRecord, gap: float | None, number) -> dict[str, str]:
    config, result = record.config, record.result
    return {
        "benchmark": record.benchmark,
        "horizon": str(record.horizon),
        "mode": config.mode.value,
        "heuristic": config.heuristic.kind.value,
        "r": str(config.r),
        "variant": config.heuristic.variant.value,
        "window": str(config.window_for(record.horizon)),
        "limit": str(config.limit),
        "value": number(result.value),
        "upper_bound": number(result.upper_bound),
        "gap": number(gap),
        "expansions": str(result.expansions),
        "pruned": str(result.pruned),
        "max_clusters": str(result.max_clusters),
        "degraded": str(result.degraded).lower(),
        "timed_out": str(result.timed_out).lower(),
        "memory_out": str(result.memory_out).lower(),
        "wall_time": number(result.wall_time),
        "peak_memory": str(result.peak_memory),
    }


def render_csv(records: Sequence[RunRecord]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for record, gap in zip(records, gaps(records)):
        writer.writerow(_row(record, gap, significant))
    return buffer.getvalue()


def render_json(records: Iterable[RunRecord]) -> str:
    records = list(records)
    payload = records[0].serialize() if len(records) == 1 else [it.serialize() for it in records]
    return json.dumps(payload, indent=4) + "\n"


def _rounded(value: float | None) -> str:
    return "" if value is None else f"{value:.2f}"


def render_text(records: Sequence[RunRecord]) -> str:
    "Aligned table rounded to two decimals."
    columns = ("benchmark", "horizon", "mode", "heuristic", "value", "upper_bound", "gap",
               "expansions", "wall_time")
    rows = [[_row(record, gap, _rounded)[c] for c in columns]
            for record, gap in zip(records, gaps(records))]
    widths = [max([len(c)] + [len(row[pos]) for row in rows]) for pos, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in rows]
    return "\n".join(lines) + "\n"


def render(records: Sequence[RunRecord], fmt: str) -> str:
    match fmt:
        case "json":
            return render_json(records)
        case "csv":
            return render_csv(records)
        case "text":
            return render_text(records)
    raise ValueError(f"unknown output format '{fmt}'")
