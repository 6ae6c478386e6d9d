"""Multi-view consensus for self-supervised detection and segmentation."""

__version__ = "0.1.0"
