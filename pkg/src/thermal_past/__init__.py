"""Past human pose estimation from thermal frames on a 72x96 heatmap grid."""

from __future__ import annotations

__version__ = "0.1.0"
