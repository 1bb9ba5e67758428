"""Image-level and semantic-level context aggregation for segmentation."""

__version__ = "0.1.0"
