"""Mass-preserving elastic image registration on staggered grids."""

from massreg.grid import CellField, GridGeometry, NodeField, StaggeredField

__all__ = ["GridGeometry", "CellField", "NodeField", "StaggeredField"]
__version__ = "0.1.0"
