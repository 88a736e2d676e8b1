"""Ensemble variance from one model: NTK-GP oracles, finite ensembles and CSD."""
from . import errors
from .csd import (
    AugConfig,
    Augment,
    CsdModel,
    External,
    QueryRegressor,
    ReuseTrain,
    csd_loss,
    make_csd_model,
    predict_variance,
    single_query_variance,
    train_csd,
)
from .ensemble import EnsembleStats, mc_linearized_ensemble, train_ensemble
from .errors import ConfigError, CsdError, DivergenceError, NumericError, ParseError, ShapeError
from .gp import GpPosterior, posterior, sample_prior
from .kernel import KernelKind, gram, ntk
from .metrics import aupr, auroc
from .nn import MlpParams, MlpSpec, TrainConfig, forward, init_mlp, train_regression

__version__ = "0.1.0"
