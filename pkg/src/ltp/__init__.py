"""Language priors for lane-topology prediction.

Road-metadata text extraction from OSM, retrieval-backed lane-width
lookup from road design manuals, embedding fusion with a learnable
weight, and a topology-aware evaluation suite.
"""

__version__ = "0.1.0"

from .frechet import backend_name, discrete_frechet  # noqa: F401
