"""Anisotropic-stepsize Langevin sampling and EBM training toolkit."""

__version__ = "0.1.0"

from .energy import (AnalyticEnergy, EnergyModel, GaussianEnergy,
                     MixtureEnergy, NeuralEnergy, ParamVector, RingsEnergy,
                     eval_energy, grad_theta, grad_x, log_density)
from .samplers import (ChainEnsemble, SamplerConfig, SamplerKind,
                       StepsizeMode, StepsizeRefresh, anisotropic_stepsize,
                       gd_step, hmc_step, mala_step, refresh_stepsizes,
                       run_chain, rwmh_step, stanley_step, ula_step)
from .trainer import (InitPolicy, Optimizer, TrainConfig, TrainState,
                      adam_update, grad_estimator, init_negatives, sgd_update,
                      train_ebm)
from .diagnostics import (DriftSpec, ProbeReport, drift_function, drift_probe,
                          ess, fit_geometric_decay, geometric_rate_fit,
                          hist_kl, make_kernel, minorization_probe, mmd,
                          proposal_envelope_check)
from .data import (Dataset, gmm_sampler, read_dataset, rings_generator,
                   write_dataset, write_sample_grid)

__all__ = [
    "AnalyticEnergy", "ChainEnsemble", "Dataset", "DriftSpec", "EnergyModel",
    "GaussianEnergy", "InitPolicy", "MixtureEnergy", "NeuralEnergy",
    "Optimizer", "ParamVector", "ProbeReport", "RingsEnergy", "SamplerConfig",
    "SamplerKind", "StepsizeMode", "StepsizeRefresh", "TrainConfig",
    "TrainState", "adam_update", "anisotropic_stepsize", "drift_function",
    "drift_probe", "ess", "eval_energy", "fit_geometric_decay", "gd_step",
    "geometric_rate_fit", "gmm_sampler", "grad_estimator", "grad_theta",
    "grad_x", "hist_kl", "hmc_step", "init_negatives", "log_density",
    "make_kernel", "mala_step", "minorization_probe", "mmd",
    "proposal_envelope_check", "read_dataset", "refresh_stepsizes",
    "rings_generator", "run_chain", "rwmh_step", "sgd_update", "stanley_step",
    "train_ebm", "ula_step", "write_dataset", "write_sample_grid",
]
