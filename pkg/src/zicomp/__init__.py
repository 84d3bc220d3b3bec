"""Zero-inflated Conway-Maxwell-Poisson regression on graphs.

Counts on a graph's nodes over time, modeled as a mixture of
structural zeros and a COMP count process whose intensity and
dispersion carry spatial random effects on a Moran eigenvector basis
with spike-and-slab selection. Posterior sampling uses the exchange
algorithm so the intractable COMP normalizer never needs evaluating
inside acceptance ratios.
"""

from .comp import (
    CompParams,
    NormalizerResult,
    NumericsError,
    comp_log_kernel,
    comp_log_normalizer,
    comp_mean_var_approx,
    comp_pmf,
    comp_sample,
    nb_pmf,
    nb_sample,
)
from .diagnostics import (
    RqrSet,
    batch_means_mcse,
    hpd_interval,
    inclusion_probabilities,
    posterior_predictive_mean,
    rqr,
    summary_table,
)
from .estimator import ZicompRegression
from .harness import Scenario, StudyReport, make_scenario, run_replicates, truth_overlap_report
from .model import (
    Dataset,
    ModelState,
    Predictors,
    PriorConfig,
    compute_predictors,
    load_dataset_csv,
    log_binary_likelihood,
    log_priors,
    log_unnorm_likelihood,
    month_dummies,
    save_dataset_csv,
    simulate_auxiliary,
    simulate_dataset,
    zip_mode,
)
from .sampler import ChainAbort, ChainConfig, ChainOutput, fit_dataset, run_chain
from .spatial import (
    AdjacencyGraph,
    BasisSet,
    CarPrecision,
    build_lattice,
    car_precision,
    compute_basis,
    load_graph,
    moran_operator,
    save_graph,
)

__version__ = "0.1.0"
