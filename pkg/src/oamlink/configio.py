"""Scenario files: a small YAML schema with round-trip load/dump.

Angles in files are degrees; lengths are meters unless given as a string
like "30 lambda", which is resolved against the carrier wavelength at
load time.  The top-level integer `version` key gates future schema
changes.
"""

from __future__ import annotations

import math
from typing import Any, Dict, IO, List, Union

import yaml

from .config import (
    CarrierGrid,
    ConfigError,
    ModeSet,
    NoiseModel,
    PowerModel,
    SbsPlacement,
    SystemConfig,
    UcaGeometry,
    UccaGeometry,
    as_rings,
    validate_config,
)

SCHEMA_VERSION = 1


def _resolve_length(value: Union[float, int, str], wavelength: float) -> float:
    """Meters, or a "<number> lambda" string scaled by the wavelength."""
    if isinstance(value, (int, float)):
        return float(value)
    parts = str(value).split()
    if len(parts) == 2 and parts[1] in ("lambda", "wavelength", "wavelengths"):
        return float(parts[0]) * wavelength
    raise ConfigError(f"cannot parse length {value!r}")


def _parse_array(node: Dict[str, Any], wavelength: float):
    elements = int(node["elements"])
    radius = node.get("radius")
    radii = node.get("radii")
    if (radius is None) == (radii is None):
        raise ConfigError("array needs exactly one of 'radius' or 'radii'")
    if radius is not None:
        return UcaGeometry(_resolve_length(radius, wavelength), elements)
    rings = tuple(
        UcaGeometry(_resolve_length(r, wavelength), elements) for r in radii
    )
    return UccaGeometry(rings)


def _parse_user(node: Dict[str, Any], wavelength: float):
    geom = _parse_array(node["array"], wavelength)
    placement = SbsPlacement(
        range_m=_resolve_length(node["range"], wavelength),
        elevation=math.radians(float(node["elevation_deg"])),
        azimuth=math.radians(float(node["azimuth_deg"])),
    )
    return geom, placement


def load_config(source: Union[str, IO[str]]) -> SystemConfig:
    """Parse a scenario file or YAML string into a validated SystemConfig."""
    if hasattr(source, "read"):
        raw = yaml.safe_load(source)
    else:
        try:
            with open(source) as fh:
                raw = yaml.safe_load(fh)
        except (OSError, FileNotFoundError):
            raw = yaml.safe_load(source)
    if not isinstance(raw, dict):
        raise ConfigError("scenario file must hold a mapping")
    version = raw.get("version")
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported scenario version {version!r}, expected {SCHEMA_VERSION}"
        )
    try:
        carriers_node = raw["carriers"]
        grid = CarrierGrid(
            base_frequency=float(carriers_node["base_frequency_hz"]),
            spacing=float(carriers_node["spacing_hz"]),
            data_count=int(carriers_node["data_count"]),
            training_count=int(carriers_node["training_count"]),
        )
        wavelength = grid.wavelength
        tx = _parse_array(raw["transmitter"], wavelength)
        users = tuple(_parse_user(u, wavelength) for u in raw["users"])
        modes_node = raw["modes"]
        modes = ModeSet(
            data_modes=tuple(int(v) for v in modes_node["data"]),
            training_modes=tuple(int(v) for v in modes_node["training"]),
        )
        noise = NoiseModel(snr_db=float(raw.get("snr_db", 20.0)))
        power_node = raw["power"]
        power = PowerModel(
            pa_efficiency=float(power_node["pa_efficiency"]),
            p_bb=float(power_node["baseband_w"]),
            p_rf=float(power_node["rf_chain_w"]),
            p_lna=float(power_node["lna_w"]),
            per_subcarrier_tx=float(power_node["per_subcarrier_tx_w"]),
            bandwidth=float(power_node["bandwidth_hz"]),
        )
        config = SystemConfig(
            tx=tx,
            users=users,
            carriers=grid,
            modes=modes,
            noise=noise,
            power=power,
            beta=float(raw.get("beta", 1.0)),
            coherence_symbols=int(raw.get("coherence_symbols", 512)),
            training_symbols=(
                int(raw["training_symbols"]) if "training_symbols" in raw else None
            ),
        )
    except KeyError as exc:
        raise ConfigError(f"scenario file missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed scenario file: {exc}") from None
    return validate_config(config)


def _dump_array(geom) -> Dict[str, Any]:
    rings = as_rings(geom)
    node: Dict[str, Any] = {"elements": rings[0].element_count}
    if isinstance(geom, UccaGeometry):
        node["radii"] = [float(r.radius) for r in rings]
    else:
        node["radius"] = float(rings[0].radius)
    return node


def dump_config(config: SystemConfig) -> str:
    """Serialize a SystemConfig back to the scenario-file schema."""
    doc: Dict[str, Any] = {
        "version": SCHEMA_VERSION,
        "carriers": {
            "base_frequency_hz": config.carriers.base_frequency,
            "spacing_hz": config.carriers.spacing,
            "data_count": config.carriers.data_count,
            "training_count": config.carriers.training_count,
        },
        "transmitter": _dump_array(config.tx),
        "users": [
            {
                "array": _dump_array(geom),
                "range": float(pl.range_m),
                "elevation_deg": math.degrees(pl.elevation),
                "azimuth_deg": math.degrees(pl.azimuth),
            }
            for geom, pl in config.users
        ],
        "modes": {
            "data": list(config.modes.data_modes),
            "training": list(config.modes.training_modes),
        },
        "snr_db": config.noise.snr_db,
        "power": {
            "pa_efficiency": config.power.pa_efficiency,
            "baseband_w": config.power.p_bb,
            "rf_chain_w": config.power.p_rf,
            "lna_w": config.power.p_lna,
            "per_subcarrier_tx_w": config.power.per_subcarrier_tx,
            "bandwidth_hz": config.power.bandwidth,
        },
        "beta": config.beta,
        "coherence_symbols": config.coherence_symbols,
    }
    if config.training_symbols is not None:
        doc["training_symbols"] = config.training_symbols
    return yaml.safe_dump(doc, sort_keys=False)
