"""Unsupervised multi-source transfer through distant-supervision charts.

Source models vote on a target sentence through per-position substructure
marginals. A chart keeps the substructures that survive a coverage threshold,
either per source then unioned (``pptx``) or after pooling sources with a
logarithmic opinion pool (``lop``). Target models are trained to put their
mass on the chart.
"""

from .structures import PARSING, TAGGING, TASKS, DepTree, SubstructureDist, TagSeq

__version__ = "0.1.0"

__all__ = ["PARSING", "TAGGING", "TASKS", "DepTree", "SubstructureDist", "TagSeq", "__version__"]
