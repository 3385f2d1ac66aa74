"""Material-aware mmWave radar point-cloud simulation."""

from .calibrate import GapReport, IntensityHistogramModel, apply_histogram_match, compare, fit_reference
from .core_types import (
    CameraIntrinsics,
    LabeledMesh,
    MaterialClass,
    ParseError,
    RadarConfig,
    RadarPointCloud,
    SensorPose,
    Sim2RadarError,
    ValidationError,
)
from .em_materials import complex_permittivity, fresnel, reflection_amplitude
from .fileio import load_point_cloud, load_radar_config, save_point_cloud
from .presets import ifr_preset
from .raytrace import build_bvh, intersect, trace_frame
from .reconstruction import align_depth_scale_shift, backproject, mesh_from_depth
from .signal import RangeAzElGrid, bin_returns, extract_points, simulate

__version__ = "0.1.0"
