"""State-space sequence detector for range-azimuth radar frames, with CFAR baselines.

Modules: ``cfar`` (classical detectors and calibration), ``ssm``
(continuous/discrete state-space machinery), ``autodiff`` (reverse-mode
gradients on numpy), ``model``, ``train``, ``datagen`` (synthetic labelled
scenes), ``evaluation`` (Pd/Pf, ROC, reports) and ``cli``.
"""

from .errors import CalibrationError, InvalidInputError, NumericError, SingularityError

__version__ = "0.1.0"

__all__ = ["CalibrationError", "InvalidInputError", "NumericError", "SingularityError"]
