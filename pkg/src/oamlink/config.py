"""Scenario types, validation and shared carrier/mode grids.

All angles are stored in radians, all lengths in meters, all frequencies
in Hz.  Every type here is an immutable dataclass and safe to share
between threads.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple, Union

import numpy as np

SPEED_OF_LIGHT = 299792458.0


class ConfigError(ValueError):
    """A scenario violates a structural constraint."""


class DimensionMismatchError(ConfigError):
    """Transmit element count does not equal user_count * rx_element_count."""


class ModeUnresolvableError(ConfigError):
    """An OAM mode index is too large for the receive array to resolve."""


class NearFieldWarning(UserWarning):
    """A user sits below the configured far-field range threshold."""


@dataclass(frozen=True)
class UcaGeometry:
    """A uniform circular array: radius, element count, first-element angle."""

    radius: float
    element_count: int
    initial_angle: float = 0.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError(f"UCA radius must be positive, got {self.radius}")
        if self.element_count < 2:
            raise ConfigError(
                f"UCA needs at least 2 elements, got {self.element_count}"
            )

    @property
    def azimuths(self) -> np.ndarray:
        """Element azimuth angles, strictly increasing over one turn."""
        n = np.arange(self.element_count)
        return 2.0 * np.pi * n / self.element_count + self.initial_angle


@dataclass(frozen=True)
class UccaGeometry:
    """Concentric UCAs sharing a center, ordered by strictly increasing radius."""

    rings: Tuple[UcaGeometry, ...]

    def __post_init__(self):
        if not self.rings:
            raise ConfigError("UCCA needs at least one ring")
        radii = [r.radius for r in self.rings]
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise ConfigError(f"UCCA ring radii must be strictly increasing: {radii}")
        counts = {r.element_count for r in self.rings}
        if len(counts) > 1:
            raise ConfigError(f"UCCA rings must share an element count, got {counts}")

    @property
    def ring_count(self) -> int:
        return len(self.rings)

    @property
    def element_count(self) -> int:
        return self.rings[0].element_count

    @property
    def max_radius(self) -> float:
        return self.rings[-1].radius


ArrayGeometry = Union[UcaGeometry, UccaGeometry]


def as_rings(geom: ArrayGeometry) -> Tuple[UcaGeometry, ...]:
    """View any array geometry as a tuple of rings (a UCA is one ring)."""
    if isinstance(geom, UccaGeometry):
        return geom.rings
    return (geom,)


@dataclass(frozen=True)
class SbsPlacement:
    """Receiver position in transmitter-centered spherical coordinates."""

    range_m: float
    elevation: float
    azimuth: float

    def __post_init__(self):
        if self.range_m <= 0:
            raise ConfigError(f"range must be positive, got {self.range_m}")
        if not 0.0 <= self.elevation < np.pi / 2:
            raise ConfigError(
                f"elevation must lie in [0, pi/2), got {self.elevation}"
            )
        if not -np.pi <= self.azimuth < np.pi:
            raise ConfigError(f"azimuth must lie in [-pi, pi), got {self.azimuth}")


@dataclass(frozen=True)
class CarrierGrid:
    """Evenly spaced subcarriers; the first training_count carry training."""

    base_frequency: float
    spacing: float
    data_count: int
    training_count: int

    def __post_init__(self):
        if self.base_frequency <= 0 or self.spacing <= 0:
            raise ConfigError("frequency and spacing must be positive")
        if not 1 <= self.training_count <= self.data_count:
            raise ConfigError(
                f"need 1 <= training_count <= data_count, got "
                f"{self.training_count} / {self.data_count}"
            )

    @property
    def frequencies(self) -> np.ndarray:
        w = np.arange(self.data_count)
        return self.base_frequency + w * self.spacing

    @property
    def wave_numbers(self) -> np.ndarray:
        return 2.0 * np.pi * self.frequencies / SPEED_OF_LIGHT

    @property
    def training_wave_numbers(self) -> np.ndarray:
        return self.wave_numbers[: self.training_count]

    @property
    def wave_number_spacing(self) -> float:
        return 2.0 * np.pi * self.spacing / SPEED_OF_LIGHT

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.base_frequency


def build_carrier_grid(
    base_frequency: float, spacing: float, data_count: int, training_count: int
) -> CarrierGrid:
    """Construct the subcarrier grid; wave numbers are strictly increasing."""
    return CarrierGrid(base_frequency, spacing, data_count, training_count)


@dataclass(frozen=True)
class ModeSet:
    """Ordered OAM mode numbers used for data and for training."""

    data_modes: Tuple[int, ...]
    training_modes: Tuple[int, ...]

    def __post_init__(self):
        for name, modes in (("data", self.data_modes), ("training", self.training_modes)):
            if not modes:
                raise ConfigError(f"{name} mode set is empty")

    @property
    def data_count(self) -> int:
        return len(self.data_modes)

    @property
    def training_count(self) -> int:
        return len(self.training_modes)


def consecutive_modes(count: int) -> Tuple[int, ...]:
    """Symmetric consecutive mode set, e.g. count=20 -> -10..+9."""
    lo = -(count // 2)
    return tuple(range(lo, lo + count))


@dataclass(frozen=True)
class NoiseModel:
    """Receive-referred SNR: circular complex Gaussian noise, i.i.d. per
    antenna element and subcarrier, scaled against mean received signal power."""

    snr_db: float

    @property
    def snr_linear(self) -> float:
        return 10.0 ** (self.snr_db / 10.0)


@dataclass(frozen=True)
class PowerModel:
    """Transmit and circuit power constants used by the energy-efficiency model."""

    pa_efficiency: float
    p_bb: float
    p_rf: float
    p_lna: float
    per_subcarrier_tx: float
    bandwidth: float

    def __post_init__(self):
        if not 0.0 < self.pa_efficiency <= 1.0:
            raise ConfigError(
                f"PA efficiency must lie in (0, 1], got {self.pa_efficiency}"
            )
        for name in ("p_bb", "p_rf", "p_lna", "per_subcarrier_tx", "bandwidth"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


@dataclass(frozen=True)
class SystemConfig:
    """Full scenario: arrays, user placements, carriers, modes, power, noise."""

    tx: ArrayGeometry
    users: Tuple[Tuple[ArrayGeometry, SbsPlacement], ...]
    carriers: CarrierGrid
    modes: ModeSet
    noise: NoiseModel
    power: PowerModel
    beta: float = 1.0
    coherence_symbols: int = 512
    training_symbols: Optional[int] = None
    far_field_factor: float = 10.0

    @property
    def user_count(self) -> int:
        return len(self.users)

    @property
    def ring_count(self) -> int:
        return len(as_rings(self.tx))

    @property
    def tx_element_count(self) -> int:
        """Elements per transmit ring."""
        return as_rings(self.tx)[0].element_count

    @property
    def rx_element_count(self) -> int:
        """Elements per receive ring (shared by all users)."""
        return as_rings(self.users[0][0])[0].element_count

    @property
    def placements(self) -> Tuple[SbsPlacement, ...]:
        return tuple(pl for _, pl in self.users)

    @property
    def effective_training_symbols(self) -> int:
        if self.training_symbols is not None:
            return self.training_symbols
        return self.modes.training_count

    def with_placements(self, placements) -> "SystemConfig":
        """Copy of this config with user placements replaced."""
        users = tuple(
            (geom, pl) for (geom, _), pl in zip(self.users, placements)
        )
        return replace(self, users=users)


def validate_config(config: SystemConfig, strict_far_field: bool = False) -> SystemConfig:
    """Check all cross-type invariants; returns the config unchanged on success.

    Raises DimensionMismatchError, ModeUnresolvableError or ConfigError.  A
    user below the far-field threshold raises only when strict_far_field is
    set; otherwise it emits a NearFieldWarning.
    """
    if config.user_count < 1:
        raise ConfigError("need at least one user")

    n_rings = config.ring_count
    p = config.user_count
    m = config.rx_element_count
    n = config.tx_element_count

    for geom, _ in config.users:
        user_rings = as_rings(geom)
        if len(user_rings) != n_rings:
            raise ConfigError(
                f"user ring count {len(user_rings)} != transmit ring count {n_rings}"
            )
        if user_rings[0].element_count != m:
            raise ConfigError("all users must share a receive element count")

    if n != p * m:
        raise DimensionMismatchError(
            f"transmit elements per ring N={n} must equal P*M={p}*{m}={p * m}"
        )

    for ell in set(config.modes.data_modes) | set(config.modes.training_modes):
        if abs(ell) >= m / 2:
            raise ModeUnresolvableError(
                f"mode {ell} cannot be resolved by an {m}-element receive array"
            )
    for name, modes in (
        ("data", config.modes.data_modes),
        ("training", config.modes.training_modes),
    ):
        residues = [ell % m for ell in modes]
        if len(set(residues)) != len(residues):
            raise ModeUnresolvableError(f"{name} modes collide modulo M={m}")

    if config.effective_training_symbols > config.coherence_symbols:
        raise ConfigError("training symbols exceed the coherence block")

    tx_r = max(r.radius for r in as_rings(config.tx))
    for geom, placement in config.users:
        rx_r = max(r.radius for r in as_rings(geom))
        threshold = config.far_field_factor * max(tx_r, rx_r)
        if placement.range_m < threshold:
            msg = (
                f"user at range {placement.range_m:.3g} m is below the "
                f"far-field threshold {threshold:.3g} m"
            )
            if strict_far_field:
                raise ConfigError(msg)
            warnings.warn(msg, NearFieldWarning, stacklevel=2)

    return config
