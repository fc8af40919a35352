"""VAE-based channel estimation with conditionally Gaussian channel models."""
from .bench import SweepConfig, SweepResult, emit_csv, nmse, run_sweep
from .channel import ChannelDataset, ClusterParams, ScenarioConfig, generate_dataset, load_dataset, observe, save_dataset
from .errors import VaeceError
from .estimators import EstimateRequest, Estimator, fit_sample_cov
from .gmm import GmmModel, gmm_fit, load_gmm, save_gmm
from .spectral import CovarianceSpectrum, NoiseModel, dft_matrix, lmmse_apply
from .vae import TrainConfig, VaeModel, load_model, save_model, train

__version__ = "0.1.0"

__all__ = [
    "ChannelDataset",
    "ClusterParams",
    "CovarianceSpectrum",
    "EstimateRequest",
    "Estimator",
    "GmmModel",
    "NoiseModel",
    "ScenarioConfig",
    "SweepConfig",
    "SweepResult",
    "TrainConfig",
    "VaeModel",
    "VaeceError",
    "dft_matrix",
    "emit_csv",
    "fit_sample_cov",
    "generate_dataset",
    "gmm_fit",
    "lmmse_apply",
    "load_dataset",
    "load_gmm",
    "load_model",
    "nmse",
    "observe",
    "run_sweep",
    "save_dataset",
    "save_gmm",
    "save_model",
    "train",
]
