"""Cross-task pseudo-label curation toolkit for instance segmentation."""

__version__ = "0.1.0"
