"""One-shot exporter: public VGG-16 zoo parameters -> engine weight container."""

from .export import ExportEntry, ExportError, ExportReport, export, main

__all__ = ["ExportEntry", "ExportError", "ExportReport", "export", "main"]
__version__ = "0.1.0"
