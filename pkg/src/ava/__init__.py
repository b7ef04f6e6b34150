"""Consensus feature attributions from influence-weighted training neighbourhoods."""

from ava.aggregation import AVAExplainer, ConsensusAttribution, aggregate_weighted, ava_ig, ava_shap
from ava.attribution import (Attribution, CoalitionValueFn, harsanyi_dividend, integrated_gradients,
                             shapley, shapley_exact, shapley_sampled)
from ava.data import Dataset, load_csv, load_iris, make_synthetic, prepare, split
from ava.evaluation import (EvalReport, GoldSet, gold_set, mean_feature_importance,
                            random_baseline, recall_at_gold, run_benchmark, select_m)
from ava.influence import (InfluenceCalculator, SolverConfig, influence_up_loss, inverse_hvp,
                           select_neighborhood)
from ava.models import build_model

__version__ = "0.1.0"

__all__ = [
    "AVAExplainer", "Attribution", "CoalitionValueFn", "ConsensusAttribution", "Dataset",
    "EvalReport", "GoldSet", "InfluenceCalculator", "SolverConfig", "aggregate_weighted",
    "ava_ig", "ava_shap", "build_model", "gold_set", "harsanyi_dividend", "influence_up_loss",
    "integrated_gradients", "inverse_hvp", "load_csv", "load_iris", "make_synthetic",
    "mean_feature_importance", "prepare", "random_baseline", "recall_at_gold",
    "run_benchmark", "select_m", "select_neighborhood", "shapley", "shapley_exact",
    "shapley_sampled", "split",
]
