"""wecs-plots: renders wecs sweep CSV files into figures."""

from .render import FigureSpec, SchemaError, render

__version__ = "0.1.0"
