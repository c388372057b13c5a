"""Sequential Principal Curves Analysis with a density-tunable metric."""

import os as _os

# cap BLAS threads before numpy loads
if _os.environ.get("SPCA_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["SPCA_THREADS"])

__version__ = "0.1.0"

from .errors import (ConfigError, DataFormatError, DegenerateDataError, ExtrapolationError,  # noqa: E402
                     FitError, NonConvergedError, OutOfSupportError, ParameterError,
                     RangeError, SpcaError)
from .core import SampleSet, read_csv, write_csv  # noqa: E402
from .curves import CurveParams, PrincipalCurve, geodesic_project, trace_curve, weighted_length  # noqa: E402
from .model import ResponseVector, SpcaModel, fit  # noqa: E402
from .datagen import EnsembleSpec, GambaSpec, SurfaceSpec, generate  # noqa: E402
from .analysis import (LatticeQuantizer, LinearMap, build_lattice, least_squares_map,  # noqa: E402
                       mutual_information, pca_whitening_fit, quantization_rmse)
from .psychophysics import (AtdFrame, atd_convert, corresponding_pairs, fechner_integrate,  # noqa: E402
                            thresholds_physiological, thresholds_psychophysical)
from .config import ExperimentConfig, load_config  # noqa: E402

__all__ = [
    "ConfigError", "DataFormatError", "DegenerateDataError", "ExtrapolationError", "FitError",
    "NonConvergedError", "OutOfSupportError", "ParameterError", "RangeError", "SpcaError",
    "SampleSet", "read_csv", "write_csv",
    "CurveParams", "PrincipalCurve", "geodesic_project", "trace_curve", "weighted_length",
    "ResponseVector", "SpcaModel", "fit",
    "EnsembleSpec", "GambaSpec", "SurfaceSpec", "generate",
    "LatticeQuantizer", "LinearMap", "build_lattice", "least_squares_map",
    "mutual_information", "pca_whitening_fit", "quantization_rmse",
    "AtdFrame", "atd_convert", "corresponding_pairs", "fechner_integrate",
    "thresholds_physiological", "thresholds_psychophysical",
    "ExperimentConfig", "load_config",
]
