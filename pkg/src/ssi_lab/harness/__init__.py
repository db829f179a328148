"""Configured experiment sweeps, persistent records and the command line."""
from .config import DEFAULTS, KINDS, ExperimentSpec, derive_seed, load_spec, spec_hash
from .emit import SCHEMAS, emit_plot_data
from .experiments import (
    ExperimentResult,
    fit_loglog,
    run_experiment,
    run_gain_experiment,
    run_ode_experiment,
    run_phase_experiment,
    run_sgd_experiment,
    run_landscape,
    run_sie,
)
from .records import RecordStore, RunRecord
