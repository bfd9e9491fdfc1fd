"""Photon-pair time-tag simulation and analysis for two-node entanglement distribution."""
from .tagstream import TagStream, TimeTag, read_tag_file, write_tag_file
from .coincidence import count_coincidences, delay_scan, estimate_accidentals, fit_gaussian_peak
from .sync import allan_variance, apply_correction, find_initial_offset, synchronize, track_drift
from .bell import chsh_s, expectation, fit_correlation_curve
from .rates import brightness, fit_rate_curve, predict_car
from .config import ConfigError, RunConfig, load_config

__version__ = "0.1.0"
