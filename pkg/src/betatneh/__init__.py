"""Beta-TNEH excess-hazard cure model."""
from .estimation import (
    Dataset,
    FitResult,
    check_identifiability,
    delta_method_ci,
    fisher_info,
    fit,
    initial_value_sweep,
    loglik,
    select_by_aic,
)
from .lifetable import LifeTable, WeibullPopHazard, load_life_table
from .model_core import (
    ModelSpec,
    ParamVector,
    cum_excess_hazard,
    cure_fraction,
    excess_hazard,
    net_survival,
)
from .simulation import SETTINGS, SIM_SPEC, SimulationConfig, run_study, setting, simulate_dataset

__version__ = "0.1.0"
