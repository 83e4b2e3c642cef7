"""Multi-modal mmWave beam prediction: synthetic data, models, metrics."""

from ._core import (
    ConfigError,
    DataError,
    Model,
    NumericError,
    beam_powers,
    census,
    dba_score,
    dft_codebook,
    optimal_beam,
    rate,
    run_cli,
    snr,
    steering_vector,
    synth,
    topk_accuracy,
)

__all__ = [
    "ConfigError",
    "DataError",
    "Model",
    "NumericError",
    "beam_powers",
    "census",
    "dba_score",
    "dft_codebook",
    "optimal_beam",
    "rate",
    "run_cli",
    "snr",
    "steering_vector",
    "synth",
    "topk_accuracy",
]
