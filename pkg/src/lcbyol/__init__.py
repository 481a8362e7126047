"""Label-efficient land-cover segmentation with BYOL pretraining at desk scale."""

__version__ = "0.1.0"
