"""Boundary-augmented neural linear models with a Bayesian last layer."""

from .bayes import (
    HmcConfig,
    LastLayerModel,
    PosteriorSamples,
    UncertaintyReport,
    bbvi_fit,
    decompose_probs,
    decompose_uncertainty,
    hmc_sample,
    mc_dropout_predict,
    posterior_predictive,
)
from .config import ExperimentConfig, load_config
from .datasets import GmmSpec, LabeledDataset, MoonsSpec, generate_gmm, generate_moons, load_csv
from .flow import RealNvpFlow, ShellSpec, generate_boundary, outlier_filter, train_flow
from .nn import Mlp, MlpConfig, train_mlp
from .pipeline import (
    entropy_grid,
    evaluate_auc,
    pathology_experiment,
    region_report,
    train_bacoun,
    train_nlm_baseline,
)

__all__ = [
    "ExperimentConfig",
    "GmmSpec",
    "HmcConfig",
    "LabeledDataset",
    "LastLayerModel",
    "Mlp",
    "MlpConfig",
    "MoonsSpec",
    "PosteriorSamples",
    "RealNvpFlow",
    "ShellSpec",
    "UncertaintyReport",
    "bbvi_fit",
    "decompose_probs",
    "decompose_uncertainty",
    "entropy_grid",
    "evaluate_auc",
    "generate_boundary",
    "generate_gmm",
    "generate_moons",
    "hmc_sample",
    "load_config",
    "load_csv",
    "mc_dropout_predict",
    "outlier_filter",
    "pathology_experiment",
    "posterior_predictive",
    "region_report",
    "train_bacoun",
    "train_flow",
    "train_mlp",
    "train_nlm_baseline",
]
