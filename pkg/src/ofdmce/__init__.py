"""Pilot-aided OFDM channel estimation: a simulated TDL-A channel with
classical baselines, plus transformer estimators trained by a small numpy
reverse-mode autodiff engine."""

__version__ = "0.1.0"
