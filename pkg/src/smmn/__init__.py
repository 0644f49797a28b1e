"""Surface masked mesh network (SMMN).

Self-supervised masked-reconstruction learning on icosphere meshes with
spherical-harmonics filter convolutions, ROI-masked anomaly scoring, and
group statistics.
"""

from .conv import FacetFeatureMap, FeatureMap
from .mesh import AtlasLabels, IcosphereHierarchy, TriMesh, build_hierarchy, icosphere
from .net import ContextVector, MMNModel, ModelConfig, Sample, TrainConfig
from .spharm import FilterBank

__version__ = "0.1.0"

__all__ = [
    "AtlasLabels",
    "ContextVector",
    "FacetFeatureMap",
    "FeatureMap",
    "FilterBank",
    "IcosphereHierarchy",
    "MMNModel",
    "ModelConfig",
    "Sample",
    "TrainConfig",
    "TriMesh",
    "build_hierarchy",
    "icosphere",
]
