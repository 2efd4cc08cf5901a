from maa_planner.maa_model import ClusterPolicy, DecPomdp, evaluate_policy
from maa_planner.maa_parser import load_dpomdp, parse_dpomdp
from maa_planner.maa_search import SolveResult, SolverConfig, SolverMode, solve

__all__ = ["ClusterPolicy", "DecPomdp", "SolveResult", "SolverConfig", "SolverMode",
           "evaluate_policy", "load_dpomdp", "parse_dpomdp", "solve"]
