"""Instrument presets."""

from __future__ import annotations

from .core_types import RadarConfig

# TI MMWCAS-RF cascade radar as used in the IFR indoor dataset.
IFR_CARRIER_FREQUENCY_HZ = 77e9
IFR_RANGE_RESOLUTION_M = 0.038
IFR_AZIMUTH_RESOLUTION_DEG = 1.18
IFR_AZIMUTH_FOV_DEG = 120.0
IFR_MAX_RANGE_M = 10.0


def ifr_preset(elevation_resolution_deg: float, elevation_fov_deg: float, **overrides) -> RadarConfig:
    """IFR radar parameters. The elevation geometry of that radar is not published,
    so both elevation values must be supplied by the caller."""
    params = dict(
        carrier_frequency=IFR_CARRIER_FREQUENCY_HZ,
        range_resolution=IFR_RANGE_RESOLUTION_M,
        azimuth_resolution=IFR_AZIMUTH_RESOLUTION_DEG,
        azimuth_fov=IFR_AZIMUTH_FOV_DEG,
        max_range=IFR_MAX_RANGE_M,
        elevation_resolution=elevation_resolution_deg,
        elevation_fov=elevation_fov_deg,
    )
    params.update(overrides)
    return RadarConfig(**params)
