"""Nowcasting of delayed-reporting counts by EM with pluggable regression learners."""

from .data import (
    DEFAULT_SPLIT_FRACTIONS,
    CompletedDataset,
    Dataset,
    FeatureVector,
    ObservationRecord,
    ParameterEstimates,
    assign_splits,
    compute_tau,
)
from .em import EMNowcaster, FitResult, Nowcast, expectation_step, initialize_estimates, nowcast, predict_estimates, run_em
from .exceptions import (
    ConfigError,
    ContractError,
    ConvergenceError,
    DataError,
    DivergenceError,
    DomainError,
    InvalidRecordError,
    NowcastError,
    NumericalError,
    SchemaError,
)
from .glm import MultinomialGLM, PoissonGLM
from .learners import GBTLearner, GLMLearner, MLPLearner, make_learner
from .likelihood import ase_lambda, ase_p, complete_ll, observed_ll, q_occ, q_rep
from .simulation import SimulationSpec, get_spec, linear_spec, nonlinear_spec, simulate_dataset, simulate_replicates
from .tuning import load_config, load_grid, random_grid_search

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
