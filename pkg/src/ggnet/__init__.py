"""Nested-graph virtual sensing for multivariate spatio-temporal data."""

__version__ = "0.1.0"

from .dataset import SpatioTemporalDataset  # noqa: E402
from .estimators import (GeoKNNImputer, GgNetImputer, MeanImputer,  # noqa: E402
                         RecurrentImputer, load_imputer)

__all__ = ["GeoKNNImputer", "GgNetImputer", "MeanImputer", "RecurrentImputer",
           "SpatioTemporalDataset", "load_imputer", "__version__"]
