"""Multi-scale masked point cloud autoencoding on a minimal autodiff core."""

__version__ = "0.1.0"
