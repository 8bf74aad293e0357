"""Figure regeneration from analysis CSV artifacts.

Reads only the documented CSV schemas emitted by the graphmoe CLI and
renders the standard figure types, each with a plain-text sidecar of
the plotted numbers so correctness is testable without image diffing.
"""

from figkit.render import FIGURE_KINDS, FigureSpec, SchemaError, render

__all__ = ["FIGURE_KINDS", "FigureSpec", "SchemaError", "render"]

__version__ = "0.1.0"
