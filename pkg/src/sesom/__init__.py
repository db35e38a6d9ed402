"""Sample-specific ensembles of soft-prompted source models, at desk scale."""

__version__ = "0.1.0"
