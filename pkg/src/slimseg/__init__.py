"""Complexity-driven data slimming + progressive channel pruning toolkit.

Images are numpy float64 arrays in [0, 1], shaped (H, W) for grayscale or
(H, W, 3) for RGB.  Label maps are integer arrays shaped (H, W).
"""

__version__ = "0.1.0"
