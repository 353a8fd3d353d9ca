from .config import ALGOS, TrainConfig, preset
from .cql import FactoredCql, factored_cql_loss, factored_cql_update
from .edac import HybridEdac, TrainingDiverged, hybrid_edac_update
from .iql import EXP_ADV_MAX, HybridIql, hybrid_iql_update
from .policy import FactoredPolicy, HybridAction, HybridActor, act, hybrid_input
from .train import load_policy, make_learner, train

__all__ = [
    "ALGOS", "TrainConfig", "preset", "FactoredCql", "factored_cql_loss", "factored_cql_update",
    "HybridEdac", "TrainingDiverged", "hybrid_edac_update", "EXP_ADV_MAX", "HybridIql",
    "hybrid_iql_update", "FactoredPolicy", "HybridAction", "HybridActor", "act", "hybrid_input",
    "load_policy", "make_learner", "train",
]
