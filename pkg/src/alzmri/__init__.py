"""Multi-residual attention CNN for MRI-slice dementia staging, with a
NumPy autodiff core, data pipeline, metrics and CAM explanations."""

__version__ = "0.1.0"
