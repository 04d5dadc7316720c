"""Proportional principal stratum hazards for the first non-fatal event."""
from .survdata import DataError, Dataset, SubjectRecord, event_times, load_dataset, risk_set, save_dataset
from .estimators import StepFunction, event_free_survival, fit_cox_death, km_survival
from .frailty import PsWeightTable, build_ps_weights, eta_death, eta_event, ps_probability
from .model import (BootstrapResult, FitError, PpshFit, bootstrap_ci, fit_cause_specific, fit_ppsh,
                    information, weighted_score)
from .schoenfeld import PropTestResult, prop_test, schoenfeld_residuals, time_transform
from .copula import (CopulaFamily, NestedClayton, NestedCopula, copula_eval, copula_ps_weights,
                     fit_assessment, fit_mple, kendall_tau, nested_clayton_eval, tau_to_varsigma)
from .simgen import SimConfig, eta1_T, invert_eta, replicate, sample_frailty, simulate_trial

__version__ = "0.1.0"
