"""Two-stage kernel-score framework for common-source testing of spectra.

Stage one asks whether a set of trace spectra could share a source with a
set of control spectra; stage two estimates how rare the trace's
characteristics are in a population of sources (random match probability).

Modules
-------
spectra      spectra, libraries, file formats, B-spline source models, synthetic sources
kernel       pairwise dissimilarity kernel and trace/control score partition
score_model  random-effects model for within-source score vectors
posterior    direct posterior sampler for the model parameters
inference    conditional score distribution and the Monte Carlo statistic h
calibration  threshold calibration, power curves, match probabilities, diagnostics
cli          command-line front end
"""

from .calibration import (CalibrationTable, PowerCurve, RmpEstimate, calibrate_c_alpha,
                          estimate_rmp, normality_diagnostics, power_curve)
from .inference import Decision, TestOutcome, decide, test_statistic
from .kernel import KernelSpec, MaskPolicy, kernel_score, pairwise_scores
from .posterior import PriorConfig, sample_posterior
from .score_model import ModelParams, anova_estimates, log_likelihood
from .spectra import (SourceLibrary, Spectrum, SyntheticConfig, generate_synthetic_library,
                      load_library, write_library)

__all__ = [
    "CalibrationTable", "PowerCurve", "RmpEstimate", "calibrate_c_alpha", "estimate_rmp",
    "normality_diagnostics", "power_curve", "Decision", "TestOutcome", "decide", "test_statistic",
    "KernelSpec", "MaskPolicy", "kernel_score", "pairwise_scores", "PriorConfig",
    "sample_posterior", "ModelParams", "anova_estimates", "log_likelihood", "SourceLibrary",
    "Spectrum", "SyntheticConfig", "generate_synthetic_library", "load_library", "write_library",
]
