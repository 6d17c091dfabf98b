"""Rotating-radar terrain perception for low-altitude UAVs.

Pose-consistent preprocessing, radar ground segmentation with prior-guided
refinement, a queryable B-spline heightfield, a deterministic scenario
simulator and the comparison baselines used to benchmark them.
"""

__version__ = "0.1.0"
