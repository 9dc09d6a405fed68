"""Quantification toolkit for retinal OCT segmentations.

Segmentation metrics, layer thickness and pathology maps on the ETDRS grid,
cohort statistics, OCT preprocessing and a synthetic phantom generator.
"""

__version__ = "0.1.0"
