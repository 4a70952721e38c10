"""Heterogeneous treatment effects with machine learning.

Double/debiased ML for partially linear (IV) models, honest causal forests
with infinitesimal-jackknife inference, and generic ML inference (BLP,
GATES, CLAN) for proxy predictors of treatment-effect heterogeneity.
"""
from __future__ import annotations

__version__ = "0.1.0"

from .causal_forest import (CatePrediction, ForestError, ForestModel, ForestParams,  # noqa: E402
                            dr_scores, fit_causal_forest, forest_ate, heterogeneity_test,
                            load_forest, predict_cate, save_forest, subgroup_ate, tune_forest,
                            variable_importance)
from .dataset import (DGP_NAMES, DataError, Dataset, DgpSample, generate_dgp,  # noqa: E402
                      load_csv, make_split_plan)
from .dml import DmlConfig, DmlError, aggregate_splits, dml_plm, dml_pliv  # noqa: E402
from .generic_ml import (GenericMLError, GenericResult, OracleProxy,  # noqa: E402
                         PropensityModel, run_generic_ml)
from .learners import LearnerSpec, fit_learner, weighted_ols  # noqa: E402
from .summary import EstimateSummary  # noqa: E402

__all__ = [
    "__version__", "Dataset", "DataError", "DgpSample", "DGP_NAMES", "generate_dgp", "load_csv",
    "make_split_plan", "LearnerSpec", "fit_learner", "weighted_ols", "EstimateSummary",
    "DmlConfig", "DmlError", "aggregate_splits", "dml_plm", "dml_pliv", "ForestParams",
    "ForestModel", "ForestError", "CatePrediction", "fit_causal_forest", "predict_cate",
    "dr_scores", "forest_ate", "heterogeneity_test", "subgroup_ate", "variable_importance",
    "tune_forest", "save_forest", "load_forest", "GenericMLError", "GenericResult",
    "OracleProxy", "PropensityModel", "run_generic_ml",
]
