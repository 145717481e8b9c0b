"""Sensing-parameter estimation from compensated CSI."""

from .dynamic import (DynamicDetections, DynamicMeasurement, doppler_filter, estimate_dynamic,
                      fit_atoms, notch, notch_response, range_doppler_map, refine_dynamic)
from .static import (AnchorMeasurement, StaticProcessor, extract_zero_doppler, identify_anchors)
from .subspace import RankDeficientCovariance, Subspace, signal_subspace


def music_range_spectrum(static, aoa, range_grid=None, waveform=None, subarray=None,
                         noise_var=None):
    """Range MUSIC pseudo-spectrum on the cut at a known AOA; returns (ranges, values)."""
    from ..channel import Waveform

    proc = StaticProcessor.build(static, waveform or Waveform(), subarray, noise_var)
    return proc.spectrum(aoa, range_grid)


__all__ = [
    "AnchorMeasurement", "DynamicDetections", "DynamicMeasurement", "RankDeficientCovariance",
    "StaticProcessor", "Subspace", "doppler_filter", "estimate_dynamic", "extract_zero_doppler",
    "fit_atoms", "identify_anchors", "music_range_spectrum", "notch", "notch_response",
    "range_doppler_map", "refine_dynamic", "signal_subspace",
]
