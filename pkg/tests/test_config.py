"""Scenario type validation and the preset catalogue."""

import io
import math

import numpy as np
import pytest
from dataclasses import replace

from oamlink.config import (
    CarrierGrid,
    ConfigError,
    DimensionMismatchError,
    ModeSet,
    ModeUnresolvableError,
    NearFieldWarning,
    SbsPlacement,
    UcaGeometry,
    UccaGeometry,
    consecutive_modes,
    validate_config,
)
from oamlink.configio import dump_config, load_config
from oamlink.presets import get_preset, preset_names

from scenarios import small_config


class TestGeometry:
    def test_uca_rejects_nonpositive_radius(self):
        with pytest.raises(ConfigError):
            UcaGeometry(radius=0.0, element_count=8)

    def test_uca_rejects_single_element(self):
        with pytest.raises(ConfigError):
            UcaGeometry(radius=1.0, element_count=1)

    def test_uca_azimuths_cover_one_turn(self):
        ring = UcaGeometry(radius=1.0, element_count=6, initial_angle=0.1)
        az = ring.azimuths
        assert az.shape == (6,)
        assert np.all(np.diff(az) > 0)
        assert az[0] == pytest.approx(0.1)
        assert az[-1] - az[0] == pytest.approx(2 * np.pi * 5 / 6)

    def test_ucca_requires_increasing_radii(self):
        a = UcaGeometry(radius=1.0, element_count=6)
        b = UcaGeometry(radius=0.5, element_count=6)
        with pytest.raises(ConfigError):
            UccaGeometry(rings=(a, b))

    def test_ucca_requires_shared_element_count(self):
        a = UcaGeometry(radius=1.0, element_count=6)
        b = UcaGeometry(radius=2.0, element_count=8)
        with pytest.raises(ConfigError):
            UccaGeometry(rings=(a, b))

    def test_placement_bounds(self):
        with pytest.raises(ConfigError):
            SbsPlacement(-1.0, 0.1, 0.1)
        with pytest.raises(ConfigError):
            SbsPlacement(10.0, math.pi / 2, 0.1)
        with pytest.raises(ConfigError):
            SbsPlacement(10.0, 0.1, math.pi)


class TestCarrierGrid:
    def test_training_subset(self):
        grid = CarrierGrid(9.0e9, 1.48e6, 8, 4)
        assert grid.wave_numbers.shape == (8,)
        assert np.all(np.diff(grid.wave_numbers) > 0)
        np.testing.assert_allclose(
            grid.training_wave_numbers, grid.wave_numbers[:4]
        )

    def test_training_count_bounds(self):
        with pytest.raises(ConfigError):
            CarrierGrid(9.0e9, 1.48e6, 4, 5)
        with pytest.raises(ConfigError):
            CarrierGrid(9.0e9, 1.48e6, 4, 0)


class TestModes:
    def test_consecutive_modes_symmetric(self):
        assert consecutive_modes(20) == tuple(range(-10, 10))
        assert consecutive_modes(5) == (-2, -1, 0, 1, 2)

    def test_empty_mode_set_rejected(self):
        with pytest.raises(ConfigError):
            ModeSet(data_modes=(), training_modes=(0,))


class TestValidation:
    def test_small_config_valid(self):
        validate_config(small_config())

    def test_dimension_mismatch(self):
        cfg = small_config()
        bad = replace(cfg, tx=UcaGeometry(radius=cfg.tx.radius, element_count=15))
        with pytest.raises(DimensionMismatchError):
            validate_config(bad)

    def test_unresolvable_mode(self):
        cfg = small_config()
        bad = replace(cfg, modes=ModeSet((-4, 0, 1), (0,)))
        with pytest.raises(ModeUnresolvableError):
            validate_config(bad)

    def test_mode_collision_modulo_m(self):
        cfg = small_config()  # M = 7: modes -3 and 4 would collide, but 4
        # is already unresolvable; use -3 and 4 mod 7 via training set 3, -4.
        bad = replace(cfg, modes=ModeSet((0, 1), (3, -4)))
        with pytest.raises(ModeUnresolvableError):
            validate_config(bad)

    def test_training_exceeds_coherence(self):
        cfg = replace(small_config(), coherence_symbols=2)
        with pytest.raises(ConfigError):
            validate_config(cfg)

    def test_near_field_warning_and_strict_error(self):
        cfg = small_config()
        close = cfg.with_placements(
            [SbsPlacement(0.5, p.elevation, p.azimuth) for p in cfg.placements]
        )
        with pytest.warns(NearFieldWarning):
            validate_config(close)
        with pytest.raises(ConfigError):
            validate_config(close, strict_far_field=True)


class TestPresets:
    def test_catalogue(self):
        names = preset_names()
        assert len(names) == 10
        for expected in (
            "fig7", "fig8", "fig9", "fig10", "fig11",
            "fig12", "fig13", "fig14a", "fig14b", "table1",
        ):
            assert expected in names

    def test_unknown_preset(self):
        with pytest.raises(KeyError):
            get_preset("nope")

    def test_fig7_parameters(self):
        cfg = get_preset("fig7")
        assert cfg.user_count == 3
        assert cfg.rx_element_count == 21
        assert cfg.tx_element_count == 63
        wavelength = 299792458.0 / 9.0e9
        assert cfg.tx.radius == pytest.approx(30 * wavelength)
        ranges = [p.range_m for p in cfg.placements]
        assert ranges == [12.0, 24.0, 36.0]
        assert cfg.placements[0].elevation == pytest.approx(math.radians(18.0))

    def test_fig14a_power_model(self):
        cfg = get_preset("fig14a")
        assert cfg.power.bandwidth == pytest.approx(190.0e6)
        assert cfg.power.pa_efficiency == pytest.approx(0.35)

    def test_fig13_rings(self):
        cfg = get_preset("fig13")
        assert cfg.ring_count == 4
        assert cfg.coherence_symbols == 512


class TestConfigIo:
    @pytest.mark.parametrize("preset", ["fig7", "fig13"])
    def test_round_trip(self, preset):
        cfg = get_preset(preset)
        text = dump_config(cfg)
        back = load_config(io.StringIO(text))
        assert back.user_count == cfg.user_count
        assert back.ring_count == cfg.ring_count
        assert back.modes == cfg.modes
        assert back.carriers.data_count == cfg.carriers.data_count
        for a, b in zip(back.placements, cfg.placements):
            assert a.range_m == pytest.approx(b.range_m, rel=1e-12)
            assert a.elevation == pytest.approx(b.elevation, rel=1e-12)
            assert a.azimuth == pytest.approx(b.azimuth, rel=1e-12)
        # A second serialization of the parsed config is stable.
        assert dump_config(back) == text
