"""Two-level planning over room MDPs with certified latent abstractions."""

from .errors import ModelError, RoomsynthError
from .mdp import Mdp, Policy, optimal_value_and_policy, value_reach_avoid
from .twolevel import MapGraph, Room, TwoLevelModel, VertexLabel, stitch_explicit_mdp
from .latent import Embedding, LatentMdp, PacReport
from .synthesis import Planner, build_mdp_plan, build_succinct, synthesize_planner

__version__ = "0.1.0"

__all__ = [
    "Embedding",
    "LatentMdp",
    "MapGraph",
    "Mdp",
    "ModelError",
    "PacReport",
    "Planner",
    "Policy",
    "Room",
    "RoomsynthError",
    "TwoLevelModel",
    "VertexLabel",
    "build_mdp_plan",
    "build_succinct",
    "optimal_value_and_policy",
    "stitch_explicit_mdp",
    "synthesize_planner",
    "value_reach_avoid",
]
