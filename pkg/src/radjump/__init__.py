"""Radiation impacts on a superconducting qubit chip: simulation and analysis.

Modules: ``chip`` (layout and impact geometry), ``simulator`` (jump-detector
runs), ``tls`` (interleaved TLS spectroscopy), ``detector`` (matched-filter
jump detection and clustering), ``stats`` (dip, delay, distance and Pearson
analyses), ``records`` (file formats), ``pipeline`` (multi-run studies) and
``cli``.
"""

from .chip import ChipLayout, ImpactEvent, charge_response, default_layout, distance, load_layout
from .detector import DetectorParams, JumpDetection, MultiQubitJump, cluster_jumps, detect_run, detect_trace
from .simulator import RunRecord, SimConfig, simulate_run
from .stats import (DipProfile, InsufficientDataError, classify_scrambling, coincidence_vs_distance,
                    dip_aggregate, fit_modified_poisson, normalized_rate, pearson_window_r)
from .tls import SpectrumSeries, TlsConfig, simulate_tls_run

__version__ = "0.1.0"

__all__ = [
    "ChipLayout", "ImpactEvent", "charge_response", "default_layout", "distance", "load_layout",
    "DetectorParams", "JumpDetection", "MultiQubitJump", "cluster_jumps", "detect_run", "detect_trace",
    "RunRecord", "SimConfig", "simulate_run",
    "DipProfile", "InsufficientDataError", "classify_scrambling", "coincidence_vs_distance",
    "dip_aggregate", "fit_modified_poisson", "normalized_rate", "pearson_window_r",
    "SpectrumSeries", "TlsConfig", "simulate_tls_run",
]
