"""Relationship-augmented voxel radiance fields.

Train density/color/semantic/instance/relationship heads from posed images
with synthetic oracle supervision, answer open-vocabulary object and
relationship queries, extract 3D scene graphs, and run relationship-guided
instance segmentation.
"""

__version__ = "0.1.0"

from .field import FieldSample, GridConfig, RelationField

__all__ = ["FieldSample", "GridConfig", "RelationField", "__version__"]
