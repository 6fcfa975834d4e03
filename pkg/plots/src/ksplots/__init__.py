"""Figure rendering for the kscontrol CSV/JSON artifacts."""

__version__ = "0.1.0"

from .render import FigureSpec, SchemaError, render

__all__ = ["FigureSpec", "SchemaError", "render"]
