"""Canonical evaluation scenarios, addressable by name.

All presets share the 9 GHz desk-scale backhaul deployment: a 63-element
transmit ring (radius 30 wavelengths) serving three small-cell receivers
with 21-element rings (radius 15 wavelengths) at 12, 24 and 36 meters.
They differ in carrier counts, mode counts, ring counts and coherence
block length; each covers one evaluation scenario (estimation accuracy,
BER, spectral or energy efficiency).  The names are stable keys only.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, List

from .config import (
    CarrierGrid,
    ModeSet,
    NoiseModel,
    PowerModel,
    SbsPlacement,
    SystemConfig,
    UcaGeometry,
    UccaGeometry,
    consecutive_modes,
    validate_config,
)

BASE_FREQUENCY = 9.0e9
SUBCARRIER_SPACING = 1.48e6
WAVELENGTH = 299792458.0 / BASE_FREQUENCY

TX_RADIUS = 30.0 * WAVELENGTH
RX_RADIUS = 15.0 * WAVELENGTH
TX_ELEMENTS = 63
RX_ELEMENTS = 21

USER_PLACEMENTS = (
    SbsPlacement(12.0, math.radians(18.0), math.radians(2.0)),
    SbsPlacement(24.0, math.radians(10.0), math.radians(10.0)),
    SbsPlacement(36.0, math.radians(2.0), math.radians(18.0)),
)

DEFAULT_POWER = PowerModel(
    pa_efficiency=0.35,
    p_bb=0.2,
    p_rf=0.25,
    p_lna=0.02,
    per_subcarrier_tx=0.1,
    bandwidth=190.0e6,
)


def _ring(radius: float, elements: int) -> UcaGeometry:
    return UcaGeometry(radius=radius, element_count=elements)


def _ucca(base_radius: float, elements: int, rings: int) -> UccaGeometry:
    # Concentric rings spaced half a base radius apart keep the geometry
    # valid without crowding the aperture.
    return UccaGeometry(
        tuple(
            _ring(base_radius * (1.0 + 0.5 * i), elements) for i in range(rings)
        )
    )


def _build(
    data_carriers: int,
    training_carriers: int,
    mode_count: int,
    training_mode_count: int = 20,
    rings: int = 1,
    snr_db: float = 20.0,
    coherence_symbols: int = 512,
    power: PowerModel = DEFAULT_POWER,
) -> SystemConfig:
    if rings == 1:
        tx = _ring(TX_RADIUS, TX_ELEMENTS)
        users = tuple(
            (_ring(RX_RADIUS, RX_ELEMENTS), pl) for pl in USER_PLACEMENTS
        )
    else:
        tx = _ucca(TX_RADIUS, TX_ELEMENTS, rings)
        users = tuple(
            (_ucca(RX_RADIUS, RX_ELEMENTS, rings), pl) for pl in USER_PLACEMENTS
        )
    config = SystemConfig(
        tx=tx,
        users=users,
        carriers=CarrierGrid(
            BASE_FREQUENCY, SUBCARRIER_SPACING, data_carriers, training_carriers
        ),
        modes=ModeSet(
            data_modes=consecutive_modes(mode_count),
            training_modes=consecutive_modes(training_mode_count),
        ),
        noise=NoiseModel(snr_db=snr_db),
        power=power,
        coherence_symbols=coherence_symbols,
    )
    return validate_config(config)


def _fig7() -> SystemConfig:
    """Position estimation showcase: 64 training subcarriers, 20 modes."""
    return _build(data_carriers=64, training_carriers=64, mode_count=20)


def _fig8() -> SystemConfig:
    """Estimation accuracy versus SNR; same scenario as fig7."""
    return _build(data_carriers=64, training_carriers=64, mode_count=20)


def _fig9() -> SystemConfig:
    """BER versus SNR on the full 128-subcarrier band."""
    return _build(data_carriers=128, training_carriers=64, mode_count=20)


def _fig10() -> SystemConfig:
    """BER with precoding from estimated positions."""
    return _build(data_carriers=128, training_carriers=64, mode_count=20)


def _fig11() -> SystemConfig:
    """Reduced 16-mode data multiplex (modes -8..+7)."""
    return _build(data_carriers=128, training_carriers=64, mode_count=16)


def _fig12() -> SystemConfig:
    """Spectral efficiency with the 512-symbol coherence block."""
    return _build(
        data_carriers=128, training_carriers=64, mode_count=20, coherence_symbols=512
    )


def _fig13() -> SystemConfig:
    """Four concentric rings per array, training on the innermost one."""
    return _build(
        data_carriers=128,
        training_carriers=64,
        mode_count=20,
        rings=4,
        coherence_symbols=512,
    )


def _fig14a() -> SystemConfig:
    """Energy efficiency, single-ring arrays."""
    return _build(data_carriers=128, training_carriers=64, mode_count=20)


def _fig14b() -> SystemConfig:
    """Energy efficiency, four-ring arrays."""
    return _build(data_carriers=128, training_carriers=64, mode_count=20, rings=4)


def _table1() -> SystemConfig:
    """Complexity accounting scenario (same dimensions as fig7)."""
    return _build(data_carriers=64, training_carriers=64, mode_count=20)


_PRESETS: Dict[str, Callable[[], SystemConfig]] = {
    "fig7": _fig7,
    "fig8": _fig8,
    "fig9": _fig9,
    "fig10": _fig10,
    "fig11": _fig11,
    "fig12": _fig12,
    "fig13": _fig13,
    "fig14a": _fig14a,
    "fig14b": _fig14b,
    "table1": _table1,
}


def preset_names() -> List[str]:
    return list(_PRESETS)


def get_preset(name: str) -> SystemConfig:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise KeyError(
            f"unknown preset {name!r}; available: {', '.join(_PRESETS)}"
        ) from None
