"""Thrombus segmentation with gradual modality dropout and an attention/Logic-LSTM network."""

__version__ = "0.1.0"
