"""Offline exporter producing ISAT1 semantic priors and extractor weights."""

from .export import ModelLoadError, export_extractor_weights, export_semantic

__all__ = ["ModelLoadError", "export_extractor_weights", "export_semantic"]
