"""Hedonic flood-risk pricing engine.

Pipeline: ingest raw contract/cadastral records, tag transactions with flood
risk and administrative units, attach a decaying flood-awareness measure, fit
high-dimensional fixed-effects regressions with cluster-robust inference, and
run spatial diagnostics. See README.md for the CLI walk-through.
"""

from ._core import BACKEND as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
