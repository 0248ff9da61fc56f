"""Config-driven hybrid DNN-HMM acoustic model training engine."""

__version__ = "0.1.0"
