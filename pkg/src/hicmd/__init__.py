"""Hierarchical cross-modality disentanglement for visible-infrared person
re-identification, at desk scale."""

__version__ = "0.1.0"
