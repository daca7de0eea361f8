"""Multi-period OPF engine for unbalanced LV feeders."""

__version__ = "0.1.0"
