"""Cross-view drone/satellite geo-localization toolkit.

Joint RGB + surface-normal descriptors on a self-contained float64 autodiff
engine, plus the geometric augmentation and retrieval tooling around it.
"""

__version__ = "0.1.0"
