"""Desk-scale simulator for multi-user orbital-angular-momentum backhaul.

The package covers the full downlink chain: circular-array geometry and
free-space channels, mode-domain transforms, training-based position
estimation, the two-stage interference-eliminating precoder, and link
metrics (BER, spectral and energy efficiency, complexity counts).
"""

__version__ = "1.0.0"

from .config import (
    CarrierGrid,
    ConfigError,
    DimensionMismatchError,
    ModeSet,
    ModeUnresolvableError,
    NearFieldWarning,
    NoiseModel,
    PowerModel,
    SbsPlacement,
    SystemConfig,
    UcaGeometry,
    UccaGeometry,
    consecutive_modes,
    validate_config,
)
from .channel import ChannelTensor, assemble_channel, assemble_ucca_channel
from .modes import ModeTransform, build_mode_transform, effective_oam_channel
from .estimation import EstimationReport, estimate_positions, run_estimation, synth_uplink_training
from .precoding import PrecodingSet, build_precoder, verify_decoupling
from .linkeval import (
    ber_monte_carlo,
    complexity_estimates,
    energy_efficiency,
    evaluate_link,
    mu_mimo_baseline_se,
    spectral_efficiency,
)
from .presets import get_preset, preset_names

__all__ = [
    "CarrierGrid",
    "ChannelTensor",
    "ConfigError",
    "DimensionMismatchError",
    "EstimationReport",
    "ModeSet",
    "ModeTransform",
    "ModeUnresolvableError",
    "NearFieldWarning",
    "NoiseModel",
    "PowerModel",
    "PrecodingSet",
    "SbsPlacement",
    "SystemConfig",
    "UcaGeometry",
    "UccaGeometry",
    "assemble_channel",
    "assemble_ucca_channel",
    "ber_monte_carlo",
    "build_mode_transform",
    "build_precoder",
    "complexity_estimates",
    "consecutive_modes",
    "effective_oam_channel",
    "energy_efficiency",
    "estimate_positions",
    "evaluate_link",
    "get_preset",
    "mu_mimo_baseline_se",
    "preset_names",
    "run_estimation",
    "spectral_efficiency",
    "synth_uplink_training",
    "validate_config",
    "verify_decoupling",
]
