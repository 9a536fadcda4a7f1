"""Balanced crossed random-effects models: REML/ML fitting, EBLUPs and prediction intervals."""

import sys

from ._core import (
    ConfigError,
    CrossblupError,
    DataError,
    DomainError,
    FitResult,
    Layout,
    VarianceComponents,
    __version__,
    eblup,
    fit,
    mse_lsw,
    simulate,
)
from ._core import main as _main


def main(argv=None):
    """Console entry point mirroring the ``crossblup`` executable."""
    return _main(list(sys.argv[1:] if argv is None else argv))


__all__ = [
    "ConfigError",
    "CrossblupError",
    "DataError",
    "DomainError",
    "FitResult",
    "Layout",
    "VarianceComponents",
    "__version__",
    "eblup",
    "fit",
    "main",
    "mse_lsw",
    "simulate",
]
