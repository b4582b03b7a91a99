"""Standalone figure rendering for fedsync metrics CSVs.

This package depends only on the CSV schemas the simulation CLI writes
(per-round metrics files and sweep summaries), never on the simulation
code itself.
"""

__version__ = "0.1.0"

from .render import FIGURE_KINDS, PlotSpec, RenderResult, SchemaError, render
